"""Shared fixtures: a deterministic corpus on disk and a loopback harness
that wires N in-process producers to one consumer server."""

import threading

import pytest

from warcflow.consumer import ConsumerServer
from warcflow.fixtures import FixtureSpec, generate_fixture
from warcflow.producer import ConnectionLost, run_producer


class Corpus:
    def __init__(self, root: str, truth: dict):
        self.dir = root
        self.truth = truth
        self.files = [f"{root}/{name}" for name in truth["files"]]
        self.manifest = f"{root}/manifest.txt"

    def records(self, *, corrupt=None, mime=None, warc_type=None):
        out = []
        for entry in self.truth["records"]:
            if corrupt is not None and entry["corrupt"] != corrupt:
                continue
            if mime is not None and entry["mime"] != mime:
                continue
            if warc_type is not None and entry["warc_type"] != warc_type:
                continue
            out.append(entry)
        return out


@pytest.fixture(scope="session")
def corpus(tmp_path_factory) -> Corpus:
    """Mixed corpus: html + jpeg + misc across 3 files, with duplicates,
    chunked bodies and a few corrupted gzip members."""
    root = tmp_path_factory.mktemp("corpus")
    spec = FixtureSpec(seed=7, pages=30, images=40, others=15, files=3,
                       corrupt=4, duplicates=10, chunked_fraction=0.3)
    truth = generate_fixture(spec, str(root))
    return Corpus(str(root), truth)


@pytest.fixture(scope="session")
def clean_corpus(tmp_path_factory) -> Corpus:
    """Small corpus with no corruption, for exact positional checks."""
    root = tmp_path_factory.mktemp("clean")
    spec = FixtureSpec(seed=11, pages=8, images=12, others=6, files=2,
                       duplicates=3, chunked_fraction=0.25)
    truth = generate_fixture(spec, str(root))
    return Corpus(str(root), truth)


def run_pipeline(config, shards, *, consumer_kwargs=None, producer_kwargs=None,
                 accept_timeout=30.0):
    """Run one consumer and len(shards) producers over loopback.

    Returns (consumer_stats, producer_stats_list, errors, server). Producer
    failures are collected, not raised, so accounting can be checked on the
    partial stats too.
    """
    kwargs = dict(consumer_kwargs or {})
    kwargs.setdefault("accept_timeout", accept_timeout)
    server = ConsumerServer(config, producers=len(shards),
                            listen=("127.0.0.1", 0), **kwargs)
    stats = [None] * len(shards)
    errors = []

    def work(i, files):
        try:
            stats[i] = run_producer(
                config, files, worker_id=i,
                endpoint=f"127.0.0.1:{server.port}",
                **(producer_kwargs or {}))
        except ConnectionLost as exc:
            stats[i] = exc.stats
            errors.append(exc)
        except Exception as exc:  # noqa: BLE001 - surfaced via the errors list
            errors.append(exc)

    threads = [threading.Thread(target=work, args=(i, files), daemon=True)
               for i, files in enumerate(shards)]
    for t in threads:
        t.start()
    consumer_stats = server.serve()
    for t in threads:
        t.join(timeout=30.0)
    return consumer_stats, stats, errors, server
