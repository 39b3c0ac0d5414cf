"""Pipeline configuration: a JSON file validated into a PipelineConfig.

Precedence is CLI flags over config file over built-in defaults; the
WARCFLOW_CONSUMER environment variable outranks the configured endpoint.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from . import WarcflowError
from .filters import FilterError, FilterSpec, build_stage, compose, FilterPipeline
from .wire import DEFAULT_PORT, DEFAULT_WINDOW

ENDPOINT_ENV = "WARCFLOW_CONSUMER"
MODES = ("infer", "train")

_KEYS = {
    "endpoint", "window", "batch_size", "flush_timeout_ms", "mode",
    "threshold", "stages", "out_dir", "parallelism",
}


class ConfigError(WarcflowError):
    pass


class ParseError(ConfigError):
    def __init__(self, line: int, detail: str):
        self.line = line
        super().__init__(f"config parse error at line {line}: {detail}")


class UnknownKey(ConfigError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unknown config key {name!r}")


class InvalidValue(ConfigError):
    def __init__(self, key: str, detail: str):
        self.key = key
        super().__init__(f"config key {key!r}: {detail}")


def _default_parallelism() -> int:
    return os.cpu_count() or 1


@dataclass(frozen=True)
class PipelineConfig:
    endpoint: str = f"127.0.0.1:{DEFAULT_PORT}"
    window: int = DEFAULT_WINDOW
    batch_size: int = 32
    flush_timeout_ms: int = 1000
    mode: str = "infer"
    threshold: float = 0.5
    stages: tuple[FilterSpec, ...] = ()
    out_dir: str = "out"
    parallelism: int = field(default_factory=_default_parallelism)

    def host_port(self) -> tuple[str, int]:
        return split_endpoint(self.endpoint)

    def build_pipeline(self) -> FilterPipeline:
        """Fresh stage instances; dedup state must not leak between runs."""
        return compose([build_stage(spec) for spec in self.stages])

    def to_dict(self) -> dict:
        return {
            "endpoint": self.endpoint,
            "window": self.window,
            "batch_size": self.batch_size,
            "flush_timeout_ms": self.flush_timeout_ms,
            "mode": self.mode,
            "threshold": self.threshold,
            "stages": [{"kind": s.kind, "params": dict(s.params)} for s in self.stages],
            "out_dir": self.out_dir,
            "parallelism": self.parallelism,
        }


def split_endpoint(value: str) -> tuple[str, int]:
    host, sep, port = value.rpartition(":")
    if not sep or not host:
        raise InvalidValue("endpoint", f"expected host:port, got {value!r}")
    try:
        port_num = int(port)
    except ValueError:
        raise InvalidValue("endpoint", f"bad port {port!r}") from None
    if not 1 <= port_num <= 65535:
        raise InvalidValue("endpoint", f"port {port_num} outside 1..65535")
    return host, port_num


def _require_int(obj: dict, key: str, default: int, minimum: int) -> int:
    value = obj.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int):
        raise InvalidValue(key, f"expected an integer, got {value!r}")
    if value < minimum:
        raise InvalidValue(key, f"must be >= {minimum}, got {value}")
    return value


def _parse_stages(raw) -> tuple[FilterSpec, ...]:
    if not isinstance(raw, list):
        raise InvalidValue("stages", "expected a list of stage objects")
    specs = []
    for i, entry in enumerate(raw):
        where = f"stages[{i}]"
        if not isinstance(entry, dict):
            raise InvalidValue(where, "expected an object")
        extra = set(entry) - {"kind", "params"}
        if extra:
            raise InvalidValue(where, f"unknown keys {sorted(extra)}")
        kind = entry.get("kind")
        if not isinstance(kind, str):
            raise InvalidValue(where, "missing string 'kind'")
        params_raw = entry.get("params", {})
        if not isinstance(params_raw, dict):
            raise InvalidValue(where, "'params' must be an object")
        params: dict[str, str] = {}
        for k, v in params_raw.items():
            if isinstance(v, str):
                params[k] = v
            elif isinstance(v, bool):
                params[k] = "true" if v else "false"
            elif isinstance(v, (int, float)):
                params[k] = repr(v)
            else:
                raise InvalidValue(where, f"param {k!r} must be a scalar")
        spec = FilterSpec(kind, params)
        try:
            build_stage(spec)  # eager validation; the instance is discarded
        except FilterError as exc:
            raise InvalidValue(where, str(exc)) from None
        specs.append(spec)
    return tuple(specs)


def config_from_dict(obj: dict) -> PipelineConfig:
    if not isinstance(obj, dict):
        raise ParseError(1, "top level must be a JSON object")
    for key in obj:
        if key not in _KEYS:
            raise UnknownKey(key)

    endpoint = obj.get("endpoint", f"127.0.0.1:{DEFAULT_PORT}")
    if not isinstance(endpoint, str):
        raise InvalidValue("endpoint", "expected a string")
    split_endpoint(endpoint)

    window = _require_int(obj, "window", DEFAULT_WINDOW, 1)
    batch_size = _require_int(obj, "batch_size", 32, 1)
    flush_timeout_ms = _require_int(obj, "flush_timeout_ms", 1000, 1)
    parallelism = _require_int(obj, "parallelism", _default_parallelism(), 1)

    mode = obj.get("mode", "infer")
    if mode not in MODES:
        raise InvalidValue("mode", f"expected one of {MODES}, got {mode!r}")

    threshold = obj.get("threshold", 0.5)
    if isinstance(threshold, bool) or not isinstance(threshold, (int, float)):
        raise InvalidValue("threshold", f"expected a number, got {threshold!r}")
    if not 0 <= threshold <= 1:
        raise InvalidValue("threshold", f"must be within [0, 1], got {threshold}")

    out_dir = obj.get("out_dir", "out")
    if not isinstance(out_dir, str) or not out_dir:
        raise InvalidValue("out_dir", "expected a nonempty string")

    stages = _parse_stages(obj.get("stages", []))

    return PipelineConfig(
        endpoint=endpoint,
        window=window,
        batch_size=batch_size,
        flush_timeout_ms=flush_timeout_ms,
        mode=mode,
        threshold=float(threshold),
        stages=stages,
        out_dir=out_dir,
        parallelism=parallelism,
    )


def parse_config(path: str) -> PipelineConfig:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.lineno, exc.msg) from None
    return config_from_dict(obj)


def dump_config(config: PipelineConfig) -> str:
    return json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n"


def apply_overrides(config: PipelineConfig, **overrides) -> PipelineConfig:
    """Replace fields with any non-None override, then re-validate."""
    changes = {k: v for k, v in overrides.items() if v is not None}
    if not changes:
        return config
    merged = dataclasses.replace(config, **changes)
    if merged.endpoint != config.endpoint:
        split_endpoint(merged.endpoint)
    if merged.mode not in MODES:
        raise InvalidValue("mode", f"expected one of {MODES}, got {merged.mode!r}")
    return merged


def effective_endpoint(config: PipelineConfig, env: dict | None = None) -> str:
    env = os.environ if env is None else env
    override = env.get(ENDPOINT_ENV)
    if override:
        split_endpoint(override)
        return override
    return config.endpoint
