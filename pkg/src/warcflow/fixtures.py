"""Deterministic synthetic archive generator.

Produces gzip'd WARC files plus a ground-truth JSON describing every record
(ids, digests, offsets), the expected page/image link pairs, and duplicate
payload groups. The ground truth is computed from the bytes being written,
never by running the parser, so tests can use it as an independent oracle.
Same seed, same spec: bit-identical output files.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import uuid
from dataclasses import dataclass, asdict

from . import WarcflowError
from .warc_io import build_record, write_record

_HOSTS = ("example.com", "img.example.com", "cdn.example.net")
_OTHER_KINDS = ("png", "text", "json", "request", "metadata")


class FixtureError(WarcflowError):
    pass


@dataclass(frozen=True)
class FixtureSpec:
    seed: int
    pages: int = 0
    images: int = 0
    others: int = 0
    files: int = 1
    corrupt: int = 0
    duplicates: int = 0
    chunked_fraction: float = 0.0

    def total_records(self) -> int:
        return self.files + self.pages + self.images + self.others + self.duplicates


def _chunk_body(rng: random.Random, body: bytes) -> bytes:
    out = []
    pos = 0
    while pos < len(body):
        n = min(len(body) - pos, rng.randint(1, 512))
        out.append(f"{n:x}\r\n".encode("ascii"))
        out.append(body[pos:pos + n])
        out.append(b"\r\n")
        pos += n
    out.append(b"0\r\n\r\n")
    return b"".join(out)


def _http_response(rng: random.Random, mime: str, body: bytes, chunked: bool) -> bytes:
    head = [b"HTTP/1.1 200 OK"]
    head.append(b"Content-Type: " + mime.encode("ascii"))
    if chunked:
        head.append(b"Transfer-Encoding: chunked")
        payload = _chunk_body(rng, body)
    else:
        head.append(b"Content-Length: " + str(len(body)).encode("ascii"))
        payload = body
    head.append(b"Server: fixture")
    return b"\r\n".join(head) + b"\r\n\r\n" + payload


def _record_uuid(rng: random.Random) -> str:
    return f"<urn:uuid:{uuid.UUID(int=rng.getrandbits(128), version=4)}>"


@dataclass
class _Pending:
    record_id: str
    warc_type: str
    target_uri: str
    mime: str
    payload: bytes  # the envelope payload the pipeline should recover
    block: bytes
    content_type: str
    chunked: bool
    duplicate_of: str | None = None
    links: list | None = None  # pages only: [(raw_ref, normalized or None)]


def _jpeg_bytes(rng: random.Random) -> bytes:
    return b"\xff\xd8\xff\xe0" + rng.randbytes(rng.randint(200, 1800)) + b"\xff\xd9"


def _png_bytes(rng: random.Random) -> bytes:
    return b"\x89PNG\r\n\x1a\n" + rng.randbytes(rng.randint(100, 900))


def _normalize_host_variant(rng: random.Random, uri: str) -> str:
    """Rewrite an absolute URI so it still normalizes back to the original."""
    scheme, rest = uri.split("://", 1)
    host, _, path = rest.partition("/")
    roll = rng.random()
    if roll < 0.3:
        host = host.upper()
    elif roll < 0.5:
        host = host + ":80"
    return f"{scheme}://{host}/{path}"


def _render_link(rng: random.Random, page_uri: str, image_uri: str) -> str:
    """A reference that resolves (against page_uri) to image_uri."""
    page_host = page_uri.split("://", 1)[1].split("/", 1)[0]
    image_host, _, image_path = image_uri.split("://", 1)[1].partition("/")
    roll = rng.random()
    if roll < 0.25 and page_host == image_host:
        return "../" + image_path  # pages sit one directory deep
    if roll < 0.4 and page_host == image_host:
        return "/" + image_path
    if roll < 0.55:
        return "//" + image_host + "/" + image_path
    return _normalize_host_variant(rng, image_uri)


def _render_page(rng: random.Random, title: str, links: list[str],
                 base_href: str | None,
                 junk_refs: list[str]) -> tuple[bytes, list[int]]:
    """Returns (html, order): order lists link indices as they appear in
    the document, since the tags are shuffled in."""
    parts = ["<!DOCTYPE html>", "<html><head>", f"<title>{title}</title>"]
    if base_href:
        parts.append(f'<base href="{base_href}">')
    parts.append("</head><body>")
    parts.append(f"<h1>{title}</h1>")
    refs = [("img", j, r) for j, r in enumerate(links)] + \
        [("junk", None, r) for r in junk_refs]
    rng.shuffle(refs)
    order = [j for kind, j, _ in refs if kind == "img"]
    for i, (kind, _, ref) in enumerate(refs):
        if kind == "junk":
            parts.append(f'<img src="{ref}" alt="inline">')
            continue
        style = rng.random()
        if style < 0.3:
            parts.append(f"<img src={ref} width=40>")
        elif style < 0.6:
            parts.append(f"<img src='{ref}' alt='pic {i}'>")
        else:
            parts.append(f'<p>text {i}</p><img src="{ref}">')
    parts.append(f"<p>{rng.getrandbits(64):x}</p>")
    parts.append("</body></html>")
    return "\n".join(parts).encode("utf-8"), order


def _warcinfo(rng: random.Random, filename: str) -> _Pending:
    block = (f"software: fixture-generator\r\nfilename: {filename}\r\n").encode("ascii")
    return _Pending(
        record_id=_record_uuid(rng),
        warc_type="warcinfo",
        target_uri="",
        mime="application/warc-fields",
        payload=block,
        block=block,
        content_type="application/warc-fields",
        chunked=False,
    )


def generate_fixture(spec: FixtureSpec, out_dir: str) -> dict:
    rng = random.Random(spec.seed)
    os.makedirs(out_dir, exist_ok=True)

    file_names = [f"fixture-{i:03d}.warc.gz" for i in range(spec.files)]

    # --- synthesize image records -----------------------------------------
    images: list[_Pending] = []
    image_uris: list[str] = []
    for i in range(spec.images):
        host = rng.choice(_HOSTS)
        uri = f"http://{host}/img/img-{i:04d}.jpg"
        body = _jpeg_bytes(rng)
        chunked = rng.random() < spec.chunked_fraction
        images.append(_Pending(
            record_id=_record_uuid(rng),
            warc_type="response",
            target_uri=uri,
            mime="image/jpeg",
            payload=body,
            block=_http_response(rng, "image/jpeg", body, chunked),
            content_type="application/http; msgtype=response",
            chunked=chunked,
        ))
        image_uris.append(uri)

    duplicates: list[_Pending] = []
    for i in range(spec.duplicates):
        if not images:
            raise FixtureError("duplicates require at least one image")
        original = rng.choice(images)
        host = rng.choice(_HOSTS)
        uri = f"http://{host}/img/dup-{i:04d}.jpg"
        chunked = rng.random() < spec.chunked_fraction
        duplicates.append(_Pending(
            record_id=_record_uuid(rng),
            warc_type="response",
            target_uri=uri,
            mime="image/jpeg",
            payload=original.payload,
            block=_http_response(rng, "image/jpeg", original.payload, chunked),
            content_type="application/http; msgtype=response",
            chunked=chunked,
            duplicate_of=original.record_id,
        ))
        image_uris.append(uri)

    # --- other record kinds ------------------------------------------------
    others: list[_Pending] = []
    for i in range(spec.others):
        kind = _OTHER_KINDS[i % len(_OTHER_KINDS)]
        host = rng.choice(_HOSTS)
        if kind == "png":
            uri = f"http://{host}/img/other-{i:04d}.png"
            body = _png_bytes(rng)
            chunked = rng.random() < spec.chunked_fraction
            others.append(_Pending(_record_uuid(rng), "response", uri, "image/png",
                                   body, _http_response(rng, "image/png", body, chunked),
                                   "application/http; msgtype=response", chunked))
        elif kind == "text":
            uri = f"http://{host}/notes/note-{i:04d}.txt"
            body = rng.getrandbits(256).to_bytes(32, "big").hex().encode("ascii")
            others.append(_Pending(_record_uuid(rng), "response", uri, "text/plain",
                                   body, _http_response(rng, "text/plain", body, False),
                                   "application/http; msgtype=response", False))
        elif kind == "json":
            uri = f"http://{host}/api/item-{i:04d}"
            body = json.dumps({"item": i, "tag": rng.getrandbits(32)}).encode("ascii")
            chunked = rng.random() < spec.chunked_fraction
            others.append(_Pending(_record_uuid(rng), "response", uri, "application/json",
                                   body, _http_response(rng, "application/json", body, chunked),
                                   "application/http; msgtype=response", chunked))
        elif kind == "request":
            uri = f"http://{host}/img/img-{i % max(1, spec.images):04d}.jpg"
            block = (f"GET /{uri.split('/', 3)[-1]} HTTP/1.1\r\nHost: {host}\r\n"
                     "User-Agent: fixture\r\n\r\n").encode("ascii")
            others.append(_Pending(_record_uuid(rng), "request", uri,
                                   "application/http; msgtype=request", block, block,
                                   "application/http; msgtype=request", False))
        else:
            uri = f"http://{host}/notes/note-{i:04d}.txt"
            block = f"fetchDuration: {rng.randint(3, 900)}\r\n".encode("ascii")
            others.append(_Pending(_record_uuid(rng), "metadata", uri,
                                   "application/warc-fields", block, block,
                                   "application/warc-fields", False))

    # --- HTML pages with controlled img links -------------------------------
    pages: list[_Pending] = []
    missing_links = 0
    for i in range(spec.pages):
        host = rng.choice(_HOSTS)
        page_uri = f"http://{host}/pages/page-{i:04d}.html"
        n_links = rng.randint(0, 3) if image_uris else 0
        chosen = [rng.randrange(len(image_uris)) for _ in range(n_links)]
        all_targets = images + duplicates
        links = []
        link_pairs = []
        for idx in chosen:
            target = all_targets[idx]
            ref = _render_link(rng, page_uri, target.target_uri)
            links.append(ref)
            link_pairs.append((ref, target))
        junk = []
        if rng.random() < 0.25:
            junk.append("data:image/gif;base64,R0lGODlhAQABAAAAACw=")
        if rng.random() < 0.25:
            junk.append(f"http://{host}/img/absent-{i:04d}.jpg")
            missing_links += 1
        # a <base> naming the page's own directory changes nothing about where
        # the links land, so the pair truth stays valid while the tag path runs
        base_href = f"http://{host}/pages/" if rng.random() < 0.15 else None
        body, order = _render_page(rng, f"page {i}", links, base_href, junk)
        chunked = rng.random() < spec.chunked_fraction
        page = _Pending(
            record_id=_record_uuid(rng),
            warc_type="response",
            target_uri=page_uri,
            mime="text/html",
            payload=body,
            block=_http_response(rng, "text/html", body, chunked),
            content_type="application/http; msgtype=response",
            chunked=chunked,
        )
        page.links = [(links[j], link_pairs[j][1]) for j in order]
        pages.append(page)

    # --- distribute across files, write, corrupt ----------------------------
    everything = images + duplicates + others + pages
    placement: list[list[_Pending]] = [[] for _ in range(spec.files)]
    for pending in everything:
        placement[rng.randrange(spec.files)].append(pending)
    for i in range(spec.files):
        placement[i].insert(0, _warcinfo(rng, file_names[i]))

    members: list[tuple[_Pending, str, int, bytearray]] = []
    records_truth: list[dict] = []
    for file_index, file_name in enumerate(file_names):
        offset = 0
        for within_file, pending in enumerate(placement[file_index]):
            record = build_record(
                record_id=pending.record_id,
                warc_type=pending.warc_type,
                block=pending.block,
                target_uri=pending.target_uri or None,
                content_type=pending.content_type,
            )
            blob = bytearray(write_record(record, compress=True))
            members.append((pending, file_name, offset, blob))
            records_truth.append({
                "record_id": pending.record_id,
                "warc_type": pending.warc_type,
                "target_uri": pending.target_uri,
                "mime": pending.mime,
                "payload_sha256": hashlib.sha256(pending.payload).hexdigest(),
                "payload_len": len(pending.payload),
                "file": file_name,
                "member_offset": offset,
                "member_length": len(blob),
                "record_index": within_file,
                "chunked": pending.chunked,
                "corrupt": False,
                "duplicate_of": pending.duplicate_of,
            })
            offset += len(blob)

    if spec.corrupt:
        if spec.corrupt > len(members):
            raise FixtureError("more corruptions requested than members")
        for victim in rng.sample(range(len(members)), spec.corrupt):
            blob = members[victim][3]
            blob[12 % len(blob)] ^= 0xFF  # past the 10-byte gzip header
            records_truth[victim]["corrupt"] = True
        # a skipped member yields no record, so later indices shift down
        counters: dict[str, int] = {name: 0 for name in file_names}
        for entry in records_truth:
            if entry["corrupt"]:
                continue
            entry["record_index"] = counters[entry["file"]]
            counters[entry["file"]] += 1

    by_file: dict[str, list[bytes]] = {name: [] for name in file_names}
    for (_, file_name, _, blob) in members:
        by_file[file_name].append(bytes(blob))
    for file_name in file_names:
        with open(os.path.join(out_dir, file_name), "wb") as fh:
            fh.write(b"".join(by_file[file_name]))

    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="ascii") as fh:
        for file_name in file_names:
            fh.write(file_name + "\n")

    # --- ground truth -------------------------------------------------------
    truth_index = {entry["record_id"]: entry for entry in records_truth}
    corrupt_ids = {e["record_id"] for e in records_truth if e["corrupt"]}

    by_mime: dict[str, list[str]] = {}
    for entry in records_truth:  # records_truth is already in stream order
        if entry["corrupt"]:
            continue
        by_mime.setdefault(entry["mime"], []).append(entry["record_id"])

    pair_truth = []
    page_entries = [e for e in records_truth
                    if e["mime"] == "text/html" and not e["corrupt"]]
    pages_by_id = {p.record_id: p for p in pages}
    for entry in page_entries:
        page = pages_by_id[entry["record_id"]]
        for ref, target in page.links or []:
            if target.record_id in corrupt_ids:
                continue
            pair_truth.append({
                "page_id": entry["record_id"],
                "image_id": target.record_id,
                "link_uri": target.target_uri,
            })

    payload_groups: dict[str, list[str]] = {}
    for entry in records_truth:
        if not entry["corrupt"]:
            payload_groups.setdefault(entry["payload_sha256"], []).append(entry["record_id"])

    truth = {
        "seed": spec.seed,
        "spec": asdict(spec),
        "files": file_names,
        "records": records_truth,
        "by_mime": by_mime,
        "pairs": pair_truth,
        "missing_links": missing_links,
        "payload_groups": payload_groups,
        "unique_payloads": len(payload_groups),
    }
    with open(os.path.join(out_dir, "ground_truth.json"), "w", encoding="utf-8") as fh:
        json.dump(truth, fh, indent=1)
    return truth
