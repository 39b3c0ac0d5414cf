"""Two-pass page/image joining across archive files.

Pass one scans the corpus and indexes every image response by normalized
target URI. Pass two streams HTML pages, extracts their img links, and
fetches the linked image records by random access, pairing page and image
payloads without buffering whole files.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from html.parser import HTMLParser

from . import WarcflowError
from .warc_io import (
    SourceLocation,
    WarcIoError,
    NotHttp,
    extract_http_payload,
    iterate_records,
    read_record_at,
)
from .wire import make_record_envelope

logger = logging.getLogger(__name__)


class LinkerError(WarcflowError):
    pass


class UnresolvableReference(LinkerError):
    pass


class MissingAtLocation(LinkerError):
    def __init__(self, uri: str, location: SourceLocation):
        self.uri = uri
        self.location = location
        super().__init__(f"indexed record for {uri} not parseable at {location}")


# ---------------------------------------------------------------------------
# URI reference resolution (strict) and normalization
# ---------------------------------------------------------------------------

# Five-part URI split; each part is None when its delimiter is absent and ""
# when present but empty, which resolution must distinguish.
_URI_RE = re.compile(
    r"^(?:([^:/?#]+):)?(?://([^/?#]*))?([^?#]*)(?:\?([^#]*))?(?:#(.*))?$",
    re.DOTALL,
)


def split_uri(uri: str):
    m = _URI_RE.match(uri)
    return m.group(1), m.group(2), m.group(3), m.group(4), m.group(5)


def _recompose(scheme, authority, path, query, fragment) -> str:
    out = []
    if scheme is not None:
        out.append(scheme + ":")
    if authority is not None:
        out.append("//" + authority)
    out.append(path)
    if query is not None:
        out.append("?" + query)
    if fragment is not None:
        out.append("#" + fragment)
    return "".join(out)


def remove_dot_segments(path: str) -> str:
    output: list[str] = []
    while path:
        if path.startswith("./"):
            path = path[2:]
        elif path.startswith("../"):
            path = path[3:]
        elif path.startswith("/./"):
            path = "/" + path[3:]
        elif path == "/.":
            path = "/"
        elif path.startswith("/../"):
            path = "/" + path[4:]
            if output:
                output.pop()
        elif path == "/..":
            path = "/"
            if output:
                output.pop()
        elif path in (".", ".."):
            path = ""
        else:
            cut = path.find("/", 1) if path.startswith("/") else path.find("/")
            if cut == -1:
                output.append(path)
                path = ""
            else:
                output.append(path[:cut])
                path = path[cut:]
    return "".join(output)


def _merge_paths(base_authority, base_path: str, ref_path: str) -> str:
    if base_authority is not None and base_path == "":
        return "/" + ref_path
    cut = base_path.rfind("/")
    if cut == -1:
        return ref_path
    return base_path[:cut + 1] + ref_path


def resolve_uri(base: str, ref: str) -> str:
    """Resolve a reference against an absolute base, strictly: a reference
    carrying any scheme, even the base's own, stands alone."""
    b_scheme, b_auth, b_path, b_query, _ = split_uri(base)
    if not b_scheme:
        raise UnresolvableReference(f"base is not absolute: {base!r}")
    r_scheme, r_auth, r_path, r_query, r_frag = split_uri(ref)

    if r_scheme is not None:
        scheme, authority = r_scheme, r_auth
        path, query = remove_dot_segments(r_path), r_query
    else:
        scheme = b_scheme
        if r_auth is not None:
            authority = r_auth
            path, query = remove_dot_segments(r_path), r_query
        else:
            authority = b_auth
            if r_path == "":
                path = b_path
                query = r_query if r_query is not None else b_query
            else:
                if r_path.startswith("/"):
                    path = remove_dot_segments(r_path)
                else:
                    path = remove_dot_segments(_merge_paths(b_auth, b_path, r_path))
                query = r_query
    return _recompose(scheme, authority, path, query, r_frag)


_DEFAULT_PORTS = {"http": "80", "https": "443"}


def normalize_uri(uri: str) -> str:
    """Lowercase scheme and host, drop the fragment, and strip the scheme's
    default port. Idempotent; everything else is preserved byte for byte."""
    scheme, authority, path, query, _ = split_uri(uri)
    if scheme is not None:
        scheme = scheme.lower()
    if authority is not None:
        userinfo = ""
        hostport = authority
        if "@" in authority:
            at = authority.rindex("@")
            userinfo, hostport = authority[:at + 1], authority[at + 1:]
        if hostport.startswith("["):
            close = hostport.find("]")
            host = hostport[:close + 1].lower()
            port = hostport[close + 1:]
        else:
            colon = hostport.rfind(":")
            if colon != -1 and hostport[colon + 1:].isdigit():
                host, port = hostport[:colon].lower(), hostport[colon:]
            else:
                host, port = hostport.lower(), ""
        if port == ":" + _DEFAULT_PORTS.get(scheme or "", "\x00"):
            port = ""
        authority = userinfo + host + port
    return _recompose(scheme, authority, path, query, None)


# ---------------------------------------------------------------------------
# Image link extraction
# ---------------------------------------------------------------------------

class _ImgLinkParser(HTMLParser):
    def __init__(self, base: str):
        super().__init__(convert_charrefs=True)
        self.base = base
        self.links: list[str] = []
        self._base_applied = False

    def handle_starttag(self, tag, attrs):
        if tag == "base" and not self._base_applied:
            self._base_applied = True
            href = next((v for k, v in attrs if k == "href" and v), None)
            if href:
                try:
                    self.base = resolve_uri(self.base, href.strip())
                except UnresolvableReference:
                    pass
        elif tag == "img":
            src = next((v for k, v in attrs if k == "src"), None)
            if src is None:
                return
            src = src.strip()
            if not src or src.lower().startswith("data:"):
                return
            try:
                self.links.append(resolve_uri(self.base, src))
            except UnresolvableReference:
                pass


def extract_image_links(html: bytes, base_uri: str) -> list[str]:
    """img src references resolved against the page (or its <base href>), in
    document order with duplicates preserved. data: and empty srcs are
    skipped, as are regions the parser cannot make sense of."""
    try:
        text = html.decode("utf-8")
    except UnicodeDecodeError:
        text = html.decode("latin-1")
    parser = _ImgLinkParser(base_uri)
    try:
        parser.feed(text)
        parser.close()
    except Exception as exc:
        logger.warning("img extraction aborted early for %s: %s", base_uri, exc)
    return parser.links


# ---------------------------------------------------------------------------
# Pass one: URI -> location index
# ---------------------------------------------------------------------------

@dataclass
class UriIndex:
    entries: dict[str, SourceLocation] = field(default_factory=dict)

    def save(self, path: str):
        with open(path, "w", encoding="utf-8") as fh:
            for uri in sorted(self.entries):
                loc = self.entries[uri]
                fh.write(f"{uri}\t{loc.file_path}\t{loc.member_offset}\t{loc.record_index}\n")

    @classmethod
    def load(cls, path: str) -> "UriIndex":
        entries = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                uri, file_path, offset, index = line.split("\t")
                entries[uri] = SourceLocation(file_path, int(offset), int(index))
        return cls(entries)


def build_uri_index(paths: list[str]) -> UriIndex:
    """Index every image response by normalized URI; on collision the record
    seen last wins. Unreadable files abort; unparseable records are skipped."""
    index = UriIndex()
    for path in paths:
        for record in iterate_records(path):
            if record.warc_type != "response" or not record.target_uri:
                continue
            try:
                payload = extract_http_payload(record)
            except (NotHttp, WarcIoError):
                continue
            if payload.mime_type.lower().startswith("image/"):
                index.entries[normalize_uri(record.target_uri)] = record.source
    return index


# ---------------------------------------------------------------------------
# Pass two: stream pages, fetch linked images
# ---------------------------------------------------------------------------

@dataclass
class PairedSample:
    page_envelope: dict[str, bytes]
    image_envelope: dict[str, bytes]
    link_uri: str

    def to_envelope(self) -> dict[str, bytes]:
        env = dict(self.page_envelope)
        env["paired_payload"] = self.image_envelope["payload"]
        env["paired_uri"] = self.image_envelope["target_uri"]
        return env


def record_to_envelope(record, payload_body: bytes, mime: str) -> dict[str, bytes]:
    return make_record_envelope(
        record.record_id,
        record.target_uri or "",
        mime,
        payload_body,
        source_file=record.source.file_path.encode("utf-8"),
        source_offset=str(record.source.member_offset).encode("ascii"),
    )


class PairStream:
    """Iterates (page, image) pairs in page order, link order within a page.

    miss_count tallies links absent from the index; failed_fetch_count tallies
    indexed locations whose record no longer parses.
    """

    def __init__(self, paths: list[str], index: UriIndex):
        self.paths = list(paths)
        self.index = index
        self.miss_count = 0
        self.failed_fetch_count = 0
        self.page_count = 0

    def _fetch_image(self, uri: str, loc: SourceLocation):
        try:
            record = read_record_at(loc.file_path, loc.member_offset, loc.record_index)
            payload = extract_http_payload(record)
        except WarcIoError as exc:
            logger.warning("indexed image at %s unreadable: %s", loc, exc)
            self.failed_fetch_count += 1
            return None
        return record_to_envelope(record, payload.body, payload.mime_type)

    def __iter__(self):
        for path in self.paths:
            for record in iterate_records(path):
                if record.warc_type != "response" or not record.target_uri:
                    continue
                try:
                    payload = extract_http_payload(record)
                except (NotHttp, WarcIoError):
                    continue
                if payload.mime_type.lower() != "text/html":
                    continue
                self.page_count += 1
                page_env = record_to_envelope(record, payload.body, payload.mime_type)
                for link in extract_image_links(payload.body, record.target_uri):
                    key = normalize_uri(link)
                    loc = self.index.entries.get(key)
                    if loc is None:
                        self.miss_count += 1
                        continue
                    image_env = self._fetch_image(key, loc)
                    if image_env is not None:
                        yield PairedSample(page_env, image_env, key)


def join_pairs(paths: list[str], index: UriIndex) -> PairStream:
    return PairStream(paths, index)
