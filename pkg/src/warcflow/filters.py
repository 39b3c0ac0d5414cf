"""Composable filter/preprocess stages with drop accounting.

A stage is a callable taking a Sample and returning either a (possibly
annotated) Sample or a Drop. Stages never mutate the envelope payload;
they may only add derived metadata or drop the sample.
"""

from __future__ import annotations

import hashlib
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from html.parser import HTMLParser

from . import WarcflowError

logger = logging.getLogger(__name__)


class FilterError(WarcflowError):
    pass


class InvalidParams(FilterError):
    pass


class UnknownKind(FilterError):
    def __init__(self, kind: str):
        self.kind = kind
        super().__init__(f"unknown filter kind {kind!r}")


class BadParams(FilterError):
    pass


class StageFailure(FilterError):
    def __init__(self, stage: str, detail: str):
        self.stage = stage
        self.detail = detail
        super().__init__(f"stage {stage} failed: {detail}")


FILTER_KINDS = ("mime", "url_pattern", "size", "warc_type", "dedup", "custom")


@dataclass
class Sample:
    envelope: dict[str, bytes]
    derived: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class Drop:
    reason: str


@dataclass(frozen=True)
class FilterSpec:
    kind: str
    params: dict[str, str]


def payload_digest(envelope: dict[str, bytes]) -> bytes:
    return hashlib.sha256(envelope.get("payload", b"")).digest()


# ---------------------------------------------------------------------------
# Built-in stages
# ---------------------------------------------------------------------------

class Stage:
    name = "stage"
    serialized = False  # True: runtime must funnel samples through one at a time

    def __call__(self, sample: Sample):
        raise NotImplementedError


class MimeFilter(Stage):
    name = "mime"

    def __init__(self, accept: str):
        self.accept = accept.lower()
        self.prefix = self.accept[:-1] if self.accept.endswith("/*") else None

    def __call__(self, sample):
        mime = sample.envelope.get("mime", b"").decode("utf-8", "replace").lower()
        if self.prefix is not None:
            ok = mime.startswith(self.prefix)
        else:
            ok = mime == self.accept
        return sample if ok else Drop(self.name)


class UrlPatternFilter(Stage):
    """Keeps samples whose target URI matches the pattern, anchored at the start."""

    name = "url_pattern"

    def __init__(self, pattern: re.Pattern):
        self.pattern = pattern

    def __call__(self, sample):
        uri = sample.envelope.get("target_uri", b"").decode("utf-8", "replace")
        return sample if self.pattern.match(uri) else Drop(self.name)


class SizeFilter(Stage):
    name = "size"

    def __init__(self, min_bytes: int = 0, max_bytes: int | None = None):
        self.min_bytes = min_bytes
        self.max_bytes = max_bytes

    def __call__(self, sample):
        n = len(sample.envelope.get("payload", b""))
        if n < self.min_bytes:
            return Drop(self.name)
        if self.max_bytes is not None and n > self.max_bytes:
            return Drop(self.name)
        return sample


class WarcTypeFilter(Stage):
    name = "warc_type"

    def __init__(self, accept: str):
        self.accept = accept.lower()

    def __call__(self, sample):
        if sample.derived.get("warc_type", "").lower() == self.accept:
            return sample
        return Drop(self.name)


class _TextCollector(HTMLParser):
    _SKIP = {"script", "style"}

    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.chunks: list[str] = []
        self._suppress = 0

    def handle_starttag(self, tag, attrs):
        if tag in self._SKIP:
            self._suppress += 1

    def handle_endtag(self, tag):
        if tag in self._SKIP and self._suppress:
            self._suppress -= 1

    def handle_data(self, data):
        if not self._suppress and data.strip():
            self.chunks.append(data.strip())


class StripTagsStage(Stage):
    """Adds derived["text"]: the payload's HTML stripped to plain text."""

    name = "strip_tags"

    def __call__(self, sample):
        raw = sample.envelope.get("payload", b"")
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError:
            text = raw.decode("latin-1")
        collector = _TextCollector()
        try:
            collector.feed(text)
            collector.close()
        except Exception:
            pass
        sample.derived["text"] = " ".join(collector.chunks)
        return sample


# ---------------------------------------------------------------------------
# Bloom-filter deduplication
# ---------------------------------------------------------------------------

def bloom_params(n: int, p: float) -> tuple[int, int]:
    """Optimal bit count and hash count for n items at false-positive rate p."""
    if n < 1:
        raise InvalidParams(f"capacity must be >= 1, got {n}")
    if not 0 < p < 1:
        raise InvalidParams(f"target fpr must be in (0,1), got {p}")
    m = math.ceil(-n * math.log(p) / (math.log(2) ** 2))
    k = max(1, round((m / n) * math.log(2)))
    return m, k


class DedupState:
    """Seen-before tracking: exact (a set of 32-byte digests) or bloom.

    Bloom probe bit i is the big-endian u64 at byte offset (8*i mod 24) of
    SHA-256(key || bytes([i])), taken mod the bit count. Check-and-insert is
    not thread safe; callers serialize access.
    """

    def __init__(self, mode: str = "exact", capacity: int | None = None,
                 target_fpr: float | None = None):
        self.mode = mode
        self.inserted_count = 0
        if mode == "exact":
            self.capacity = capacity
            self.target_fpr = None
            self.bits = 0
            self.hash_count = 0
            self._seen: set[bytes] = set()
        elif mode == "bloom":
            if capacity is None or target_fpr is None:
                raise InvalidParams("bloom mode requires capacity and target_fpr")
            self.capacity = capacity
            self.target_fpr = target_fpr
            self.bits, self.hash_count = bloom_params(capacity, target_fpr)
            if not 1 <= self.hash_count <= 32:
                raise InvalidParams(f"hash count {self.hash_count} outside [1, 32]")
            self._bitset = bytearray((self.bits + 7) // 8)
        else:
            raise InvalidParams(f"unknown dedup mode {mode!r}")

    def _probes(self, key: bytes):
        for i in range(self.hash_count):
            digest = hashlib.sha256(key + bytes([i])).digest()
            off = (8 * i) % 24
            yield int.from_bytes(digest[off:off + 8], "big") % self.bits

    def contains(self, key: bytes) -> bool:
        """Read-only membership probe; never mutates the state."""
        if self.mode == "exact":
            return key in self._seen
        return all(self._bitset[bit >> 3] & (1 << (bit & 7))
                   for bit in self._probes(key))

    def check_and_insert(self, key: bytes) -> bool:
        """True iff the key was (probably) not seen before; always inserts."""
        if self.mode == "exact":
            first_seen = key not in self._seen
            self._seen.add(key)
        else:
            first_seen = False
            for bit in self._probes(key):
                byte, mask = bit >> 3, 1 << (bit & 7)
                if not self._bitset[byte] & mask:
                    first_seen = True
                self._bitset[byte] |= mask
        if first_seen:
            self.inserted_count += 1
        return first_seen


def dedup_check(state: DedupState, key: bytes) -> bool:
    return state.check_and_insert(key)


class DedupStage(Stage):
    name = "dedup"
    serialized = True

    def __init__(self, state: DedupState):
        self.state = state

    def __call__(self, sample):
        key = payload_digest(sample.envelope)
        return sample if self.state.check_and_insert(key) else Drop(self.name)


# ---------------------------------------------------------------------------
# Stage construction and composition
# ---------------------------------------------------------------------------

_CUSTOM_STAGES: dict[str, object] = {}


def register_custom_stage(name: str):
    """Register factory(params) -> Stage under a custom stage name."""
    def deco(factory):
        _CUSTOM_STAGES[name] = factory
        return factory
    return deco


@register_custom_stage("strip_tags")
def _strip_tags(params: dict[str, str]) -> Stage:
    return StripTagsStage()


def _int_param(params, key, default=None):
    raw = params.get(key)
    if raw is None:
        if default is None:
            raise BadParams(f"missing required param {key!r}")
        return default
    try:
        return int(raw)
    except (TypeError, ValueError):
        raise BadParams(f"param {key!r} must be an integer, got {raw!r}") from None


def build_stage(spec: FilterSpec) -> Stage:
    kind, params = spec.kind, spec.params
    if kind == "mime":
        accept = params.get("accept")
        if not accept:
            raise BadParams("mime filter requires an 'accept' param")
        return MimeFilter(accept)
    if kind == "url_pattern":
        raw = params.get("regex")
        if raw is None:
            raise BadParams("url_pattern filter requires a 'regex' param")
        try:
            return UrlPatternFilter(re.compile(raw))
        except re.error as exc:
            raise BadParams(f"bad regex: {exc}") from None
    if kind == "size":
        min_bytes = _int_param(params, "min_bytes", 0)
        max_bytes = _int_param(params, "max_bytes", -1)
        return SizeFilter(min_bytes, None if max_bytes < 0 else max_bytes)
    if kind == "warc_type":
        accept = params.get("accept")
        if not accept:
            raise BadParams("warc_type filter requires an 'accept' param")
        return WarcTypeFilter(accept)
    if kind == "dedup":
        mode = params.get("mode", "exact")
        if mode == "exact":
            return DedupStage(DedupState("exact"))
        if mode == "bloom":
            capacity = _int_param(params, "capacity")
            try:
                fpr = float(params.get("fpr", ""))
            except ValueError:
                raise BadParams("bloom dedup requires a numeric 'fpr' param") from None
            try:
                return DedupStage(DedupState("bloom", capacity, fpr))
            except InvalidParams as exc:
                raise BadParams(str(exc)) from None
        raise BadParams(f"unknown dedup mode {mode!r}")
    if kind == "custom":
        name = params.get("name")
        factory = _CUSTOM_STAGES.get(name or "")
        if factory is None:
            raise BadParams(f"unknown custom stage {name!r}")
        return factory(params)
    raise UnknownKind(kind)


def apply_stage(stage: Stage, sample: Sample):
    """Run one stage; an exception inside it becomes Drop("error:<stage>")."""
    try:
        return stage(sample)
    except Exception as exc:
        logger.warning("stage %s failed: %s", stage.name, exc)
        return Drop(f"error:{stage.name}")


class FilterPipeline(Stage):
    """Ordered stage chain; first Drop short-circuits. Keeps exact accounting:
    input_count == kept_count + sum(drop_counts.values()) at all times."""

    name = "pipeline"

    def __init__(self, stages: list[Stage]):
        self.stages = list(stages)
        self.serialized = any(s.serialized for s in self.stages)
        self.input_count = 0
        self.kept_count = 0
        self.drop_counts: Counter[str] = Counter()

    def apply(self, sample: Sample):
        self.input_count += 1
        for stage in self.stages:
            result = apply_stage(stage, sample)
            if isinstance(result, Drop):
                self.drop_counts[result.reason] += 1
                return result
            sample = result
        self.kept_count += 1
        return sample

    __call__ = apply


def compose(stages: list[Stage]) -> FilterPipeline:
    """Stages applied in order; the empty list is the identity pipeline."""
    return FilterPipeline(stages)
