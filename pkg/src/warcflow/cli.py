"""Command-line front end tying the pipeline modules together."""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
import threading

from . import WarcflowError
from .config import (
    PipelineConfig,
    apply_overrides,
    config_from_dict,
    dump_config,
    effective_endpoint,
    parse_config,
)
from .consumer import ConsumerServer, run_consumer
from .fixtures import FixtureSpec, generate_fixture
from .linker import UriIndex, build_uri_index, join_pairs
from .producer import ConnectionLost, assign_shards, run_producer
from .profiler import ProfilerError, measure_rates
from .warc_io import (
    NotHttp,
    WarcIoError,
    extract_http_payload,
    iterate_records,
    read_manifest,
)

logger = logging.getLogger(__name__)


def _load_config(path: str | None) -> PipelineConfig:
    if path:
        return parse_config(path)
    return config_from_dict({})


def _write_stats(stats_dict: dict, path: str | None):
    text = json.dumps(stats_dict, indent=1) + "\n"
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_produce(args) -> int:
    config = _load_config(args.config)
    files = read_manifest(args.manifest)
    if not 0 <= args.worker_id < args.workers:
        raise WarcflowError(
            f"worker id {args.worker_id} outside 0..{args.workers - 1}")
    sized = []
    for path in files:
        try:
            sized.append((path, os.path.getsize(path)))
        except OSError:
            sized.append((path, 0))  # run_producer will count it unreadable
    shard = assign_shards(sized, args.workers).files_for(args.worker_id)
    endpoint = effective_endpoint(config)
    try:
        stats = run_producer(config, shard, worker_id=args.worker_id,
                             endpoint=endpoint)
    except ConnectionLost as exc:
        _write_stats(exc.stats.to_dict(), args.stats_out)
        raise
    _write_stats(stats.to_dict(), args.stats_out)
    return 0


def _cmd_consume(args) -> int:
    config = _load_config(args.config)
    config = apply_overrides(
        config, endpoint=args.listen, mode=args.mode, out_dir=args.out)
    stats = run_consumer(config, producers=args.producers)
    print(f"{stats.samples_processed} samples in {stats.batches_emitted} batches "
          f"from {stats.producers_connected} producers; "
          f"{stats.results_written} results written to {config.out_dir}")
    return 0


def _cmd_run(args) -> int:
    config = _load_config(args.config)
    config = apply_overrides(config, out_dir=args.out)
    files = read_manifest(args.manifest)

    server = ConsumerServer(config, producers=1, listen=("127.0.0.1", 0))
    box: dict = {}

    def _serve():
        try:
            box["stats"] = server.serve()
        except WarcflowError as exc:
            box["error"] = exc

    thread = threading.Thread(target=_serve, name="warcflow-consumer")
    thread.start()
    try:
        producer_stats = run_producer(
            config, files, endpoint=f"127.0.0.1:{server.port}")
    finally:
        thread.join(timeout=60.0)
    if "error" in box:
        raise box["error"]
    consumer_stats = box["stats"]

    _write_stats(producer_stats.to_dict(),
                 os.path.join(config.out_dir, "producer_stats.json"))
    print(f"{producer_stats.records_read} records read, "
          f"{producer_stats.records_kept} kept, "
          f"{consumer_stats.results_written} results written to {config.out_dir}")
    return 0


def _cmd_profile(args) -> int:
    paths = sorted(glob.glob(args.producer_stats))
    if not paths:
        raise ProfilerError(f"no producer stats match {args.producer_stats!r}")
    producer_stats = []
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            producer_stats.append(json.load(fh))
    with open(args.consumer_stats, encoding="utf-8") as fh:
        consumer_stats = json.load(fh)
    report = measure_rates(producer_stats, consumer_stats)
    print(json.dumps(report.to_dict(), indent=1))
    return 0


def _cmd_link_index(args) -> int:
    files = read_manifest(args.manifest)
    index = build_uri_index(files)
    index.save(args.out)
    print(f"indexed {len(index.entries)} image records from {len(files)} files",
          file=sys.stderr)
    return 0


def _cmd_join(args) -> int:
    files = read_manifest(args.manifest)
    if args.index:
        index = UriIndex.load(args.index)
    else:
        index = build_uri_index(files)
    stream = join_pairs(files, index)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for pair in stream:
            line = {
                "page_record_id": pair.page_envelope["record_id"].decode("utf-8", "replace"),
                "image_record_id": pair.image_envelope["record_id"].decode("utf-8", "replace"),
                "page_uri": pair.page_envelope["target_uri"].decode("utf-8", "replace"),
                "image_uri": pair.image_envelope["target_uri"].decode("utf-8", "replace"),
                "link_uri": pair.link_uri,
            }
            out.write(json.dumps(line) + "\n")
    finally:
        if args.out:
            out.close()
    print(f"{stream.page_count} pages scanned, {stream.miss_count} links missed, "
          f"{stream.failed_fetch_count} fetch failures", file=sys.stderr)
    return 0


def _cmd_ls(args) -> int:
    for i, record in enumerate(iterate_records(args.file)):
        try:
            mime = extract_http_payload(record).mime_type
        except (NotHttp, WarcIoError):
            mime = record.header("Content-Type") or "-"
        print(f"{i}\t{record.warc_type}\t{record.target_uri or '-'}\t"
              f"{record.content_length}\t{mime}")
    return 0


def _cmd_gen_fixture(args) -> int:
    spec = FixtureSpec(
        seed=args.seed, pages=args.pages, images=args.images, others=args.others,
        files=args.files, corrupt=args.corrupt, duplicates=args.duplicates,
        chunked_fraction=args.chunked_fraction)
    truth = generate_fixture(spec, args.out)
    print(f"wrote {spec.total_records()} records across {len(truth['files'])} "
          f"files under {args.out}")
    return 0


def _cmd_config_dump(args) -> int:
    sys.stdout.write(dump_config(_load_config(args.config)))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="warcflow",
        description="Stream filtered web-archive records to a batching consumer")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log at INFO instead of WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("produce", help="parse a manifest shard and stream it")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--manifest", required=True, help="file listing archive paths")
    p.add_argument("--worker-id", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--stats-out", help="write producer stats JSON here")
    p.set_defaults(func=_cmd_produce)

    p = sub.add_parser("consume", help="accept producer streams and process them")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--listen", help="addr:port to bind (overrides config endpoint)")
    p.add_argument("--producers", type=int, default=1)
    p.add_argument("--mode", choices=("infer", "train"))
    p.add_argument("--out", help="output directory (overrides config out_dir)")
    p.set_defaults(func=_cmd_consume)

    p = sub.add_parser("run", help="producer and consumer in one process over loopback")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="output directory (overrides config out_dir)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("profile", help="recommend the producer:consumer ratio")
    p.add_argument("--producer-stats", required=True, help="glob of producer stats JSON")
    p.add_argument("--consumer-stats", required=True, help="consumer stats.json path")
    p.set_defaults(func=_cmd_profile)

    p = sub.add_parser("link-index", help="index image records by normalized URI")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="index file to write")
    p.set_defaults(func=_cmd_link_index)

    p = sub.add_parser("join", help="pair HTML pages with the images they link")
    p.add_argument("--manifest", required=True)
    p.add_argument("--index", help="prebuilt index file (default: build in memory)")
    p.add_argument("--out", help="pairs JSONL path (default: stdout)")
    p.set_defaults(func=_cmd_join)

    p = sub.add_parser("ls", help="list the records of one archive file")
    p.add_argument("file")
    p.set_defaults(func=_cmd_ls)

    p = sub.add_parser("gen-fixture", help="write a deterministic synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--pages", type=int, default=0)
    p.add_argument("--images", type=int, default=0)
    p.add_argument("--others", type=int, default=0)
    p.add_argument("--files", type=int, default=1)
    p.add_argument("--corrupt", type=int, default=0)
    p.add_argument("--duplicates", type=int, default=0)
    p.add_argument("--chunked-fraction", type=float, default=0.0)
    p.set_defaults(func=_cmd_gen_fixture)

    p = sub.add_parser("config-dump", help="print the validated config with defaults")
    p.add_argument("--config", help="pipeline config JSON")
    p.set_defaults(func=_cmd_config_dump)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except WarcflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
