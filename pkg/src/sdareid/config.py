"""Benchmark configuration: defaults, YAML parsing, validation with line numbers."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from sdareid.data import DomainSpec

METHODS = ("sda", "sft", "dt")
ADAPT_ORDERS = ("pfa-then-encoder", "encoder-then-pfa", "alternating")
OUTER_SCOPES = ("all", "encoder-only")
SPLIT_MODES = ("by-camera", "by-domain")


@dataclass(frozen=True)
class Hyper:
    # identity learning
    batch_size: int = 90
    instances_per_id: int = 5
    margin: float = 0.3
    label_smoothing: float = 0.1
    # architecture
    hidden_dim: int = 64
    feature_dim: int = 32
    latent_dim: int = 16
    coder_hidden: int = 32
    # optimisation
    lr: float = 0.01
    lr_inner: float = 0.01
    lr_outer: float = 0.01
    lr_proto: float = 0.1
    lr_feat: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_epochs: int = 10
    pretrain_epochs: int = 30
    proto_epochs: int = 200
    proto_tol: float = 1e-5
    feat_epochs: int = 10
    encoder_steps: int = 50
    tau: float = 15.0
    # meta learning
    meta_split: str = "by-camera"
    outer_scope: str = "all"
    w2_weight: float = 1.0
    rec_weight: float = 1.0
    ref_weight: float = 1.0
    # adaptation schedule and retrieval
    adapt_order: str = "pfa-then-encoder"
    normalize_features: bool = True

    @property
    def p_ids(self) -> int:
        return max(1, self.batch_size // self.instances_per_id)


def default_stream() -> list[DomainSpec]:
    """One large source domain and four few-shot pools with growing shift."""
    specs = [
        DomainSpec(id_count=128, cameras=4, samples_per_id_per_camera=3, domain_shift_scale=0.0, seed=101, domain=1)
    ]
    for t, (cams, shift) in enumerate([(3, 0.6), (4, 0.7), (2, 0.8), (3, 0.9)], start=2):
        specs.append(
            DomainSpec(id_count=100, cameras=cams, samples_per_id_per_camera=3, domain_shift_scale=shift, seed=100 + t, domain=t)
        )
    return specs


@dataclass(frozen=True)
class BenchmarkConfig:
    stream: tuple[DomainSpec, ...] = field(default_factory=lambda: tuple(default_stream()))
    test_ids: int = 50
    k_ids: int = 32
    method: str = "sda"
    seed: int = 0
    hyper: Hyper = field(default_factory=Hyper)

    def digest(self) -> str:
        blob = json.dumps(config_to_dict(self), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes) -> "BenchmarkConfig":
        return dataclasses.replace(self, **changes)

    def with_hyper(self, **changes) -> "BenchmarkConfig":
        return dataclasses.replace(self, hyper=dataclasses.replace(self.hyper, **changes))


class ConfigError(ValueError):
    def __init__(self, diagnostics: list[str]) -> None:
        super().__init__("\n".join(diagnostics))
        self.diagnostics = diagnostics


def config_to_dict(cfg: BenchmarkConfig) -> dict[str, Any]:
    return {
        "seed": cfg.seed,
        "method": cfg.method,
        "k_ids": cfg.k_ids,
        "test_ids": cfg.test_ids,
        "hyper": dataclasses.asdict(cfg.hyper),
        "stream": [dataclasses.asdict(s) for s in cfg.stream],
    }


def emit_defaults() -> str:
    return yaml.safe_dump(config_to_dict(BenchmarkConfig()), sort_keys=False)


def _field_types(cls) -> dict[str, type]:
    return {f.name: type(f.default) for f in dataclasses.fields(cls) if f.default is not dataclasses.MISSING}


def _coerce(value: Any, kind: type, where: str, errors: list[str]) -> Any:
    if kind is bool:
        if isinstance(value, bool):
            return value
    elif kind is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif kind is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif kind is str:
        if isinstance(value, str):
            return value
    errors.append(f"{where}: expected {kind.__name__}, got {value!r}")
    return None


def _line_map(node, prefix: str = "") -> dict[str, int]:
    """Map dotted key paths to 1-based source lines from a composed YAML node."""
    lines: dict[str, int] = {}
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = f"{prefix}{key_node.value}"
            lines[path] = key_node.start_mark.line + 1
            lines.update(_line_map(value_node, path + "."))
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            path = f"{prefix}{i}"
            lines[path] = item.start_mark.line + 1
            lines.update(_line_map(item, path + "."))
    return lines


def parse_config(text: str, source: str = "<config>") -> BenchmarkConfig:
    """Parse YAML text, fill defaults for absent fields, validate.

    Raises :class:`ConfigError` carrying one ``source:line: message`` per problem.
    """
    try:
        node = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f"{mark.line + 1}" if mark is not None else "?"
        raise ConfigError([f"{source}:{line}: malformed YAML ({getattr(exc, 'problem', exc)})"]) from None
    raw = raw or {}
    lines = _line_map(node) if node is not None else {}
    errors: list[str] = []

    def at(path: str) -> str:
        return f"{source}:{lines.get(path, '?')}: {path}"

    if not isinstance(raw, dict):
        raise ConfigError([f"{source}:1: top level must be a mapping"])

    defaults = BenchmarkConfig()
    top_types = {"seed": int, "method": str, "k_ids": int, "test_ids": int}
    top: dict[str, Any] = {}
    for key, value in raw.items():
        if key in top_types:
            top[key] = _coerce(value, top_types[key], at(key), errors)
        elif key not in ("hyper", "stream"):
            errors.append(f"{at(key)}: unknown field")

    hyper_raw = raw.get("hyper") or {}
    hyper_kw: dict[str, Any] = {}
    if not isinstance(hyper_raw, dict):
        errors.append(f"{at('hyper')}: must be a mapping")
        hyper_raw = {}
    htypes = _field_types(Hyper)
    for key, value in hyper_raw.items():
        if key not in htypes:
            errors.append(f"{at('hyper.' + key)}: unknown field")
            continue
        hyper_kw[key] = _coerce(value, htypes[key], at("hyper." + key), errors)

    stream = list(defaults.stream)
    if "stream" in raw:
        stream_raw = raw["stream"]
        if not isinstance(stream_raw, list):
            errors.append(f"{at('stream')}: must be a list of domain specs")
        else:
            stypes = _field_types(DomainSpec)
            stream = []
            for i, item in enumerate(stream_raw):
                if not isinstance(item, dict):
                    errors.append(f"{at(f'stream.{i}')}: must be a mapping")
                    continue
                kw: dict[str, Any] = {"domain": i + 1, "seed": 101 + i}
                for key, value in item.items():
                    if key not in stypes:
                        errors.append(f"{at(f'stream.{i}.{key}')}: unknown field")
                        continue
                    kw[key] = _coerce(value, stypes[key], at(f"stream.{i}.{key}"), errors)
                if any(v is None for v in kw.values()):
                    continue
                try:
                    stream.append(DomainSpec(**kw))
                except ValueError as exc:
                    errors.append(f"{at(f'stream.{i}')}: {exc}")

    if errors:
        raise ConfigError(errors)

    hyper = dataclasses.replace(defaults.hyper, **hyper_kw)
    cfg = dataclasses.replace(defaults, hyper=hyper, stream=tuple(stream), **top)
    problems = validate(cfg)
    if problems:
        located = []
        for path, message in problems:
            located.append(f"{at(path)}: {message}")
        raise ConfigError(located)
    return cfg


def validate(cfg: BenchmarkConfig) -> list[tuple[str, str]]:
    """Invariant violations as ``(field path, message)`` pairs."""
    out: list[tuple[str, str]] = []
    h = cfg.hyper
    for f in dataclasses.fields(Hyper):
        value = getattr(h, f.name)
        if isinstance(value, (int, float)) and not isinstance(value, bool) and value < 0:
            out.append((f"hyper.{f.name}", f"must be >= 0, got {value}"))
    for name in ("batch_size", "instances_per_id", "hidden_dim", "feature_dim", "latent_dim", "coder_hidden"):
        if getattr(h, name) < 1:
            out.append((f"hyper.{name}", "must be >= 1"))
    if h.tau <= 0:
        out.append(("hyper.tau", f"must be > 0, got {h.tau}"))
    if not 0 <= h.label_smoothing < 1:
        out.append(("hyper.label_smoothing", "must lie in [0, 1)"))
    for name, allowed in (("meta_split", SPLIT_MODES), ("outer_scope", OUTER_SCOPES), ("adapt_order", ADAPT_ORDERS)):
        if getattr(h, name) not in allowed:
            out.append((f"hyper.{name}", f"must be one of {allowed}"))
    if cfg.method not in METHODS:
        out.append(("method", f"must be one of {METHODS}, got {cfg.method!r}"))
    if cfg.k_ids < 1:
        out.append(("k_ids", f"must be >= 1, got {cfg.k_ids}"))
    if cfg.test_ids < 1:
        out.append(("test_ids", f"must be >= 1, got {cfg.test_ids}"))
    if len(cfg.stream) < 2:
        out.append(("stream", f"needs at least 2 domains, got {len(cfg.stream)}"))
    dims = {s.input_dim for s in cfg.stream}
    if len(dims) > 1:
        out.append(("stream", f"all domains must share input_dim, got {sorted(dims)}"))
    for i, spec in enumerate(cfg.stream):
        if spec.cameras < 2:
            out.append((f"stream.{i}.cameras", "cross-camera retrieval needs >= 2 cameras"))
        if i > 0 and spec.id_count < cfg.k_ids:
            out.append((f"stream.{i}.id_count", f"training pool of {spec.id_count} ids is smaller than k_ids"))
    return out


def load_config(path: str | Path) -> BenchmarkConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path))
