"""Networks: backbone, classifier head, distribution encoder, decoder, refine gate.

All forward functions are functional: they read parameters from the bundle
unless an override mapping ``{group: {name: Tensor}}`` is passed, which is
how fast weights for the meta-learning inner loop are evaluated.
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sdareid.checkpoint import read_tensors, write_tensors
from sdareid.params import ParamSet
from sdareid.tensor import Tensor, as_tensor, relu, sigmoid, softplus

GROUPS = ("backbone", "classifier", "dist_encoder", "decoder", "refine")
SIGMA_FLOOR = 1e-6
# softplus(SIGMA_BIAS) == 1, so fresh encoders start at unit standard deviation
SIGMA_BIAS = float(np.log(np.expm1(1.0)))

Overrides = Mapping[str, Mapping[str, Tensor]]


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 32
    hidden_dim: int = 64
    feature_dim: int = 32
    latent_dim: int = 16
    coder_hidden: int = 32

    def __post_init__(self) -> None:
        for name, value in self.__dict__.items():
            if value < 1:
                raise ValueError(f"ModelConfig.{name} must be positive, got {value}")


@dataclass(frozen=True)
class GaussianLatent:
    """Per-row diagonal Gaussian; ``sigma`` holds standard deviations."""

    mu: Tensor
    sigma: Tensor


@dataclass
class ModelBundle:
    config: ModelConfig
    groups: dict[str, ParamSet]
    class_ids: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        missing = [g for g in GROUPS if g not in self.groups]
        if missing:
            raise ValueError(f"bundle lacks parameter groups {missing}")
        expected = _expected_shapes(self.config, len(self.class_ids))
        for (group, key), shape in expected.items():
            got = self.groups[group][key].shape if key in self.groups[group] else None
            if got != shape:
                raise ValueError(f"{group}.{key}: expected shape {shape}, got {got}")

    def __getitem__(self, name: str) -> ParamSet:
        try:
            return self.groups[name]
        except KeyError:
            raise KeyError(f"unknown parameter group {name!r}; expected one of {GROUPS}") from None

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def zero_grad(self) -> None:
        for g in self.groups.values():
            g.zero_grad()


def _expected_shapes(c: ModelConfig, n_classes: int) -> dict[tuple[str, str], tuple[int, ...]]:
    widths = {
        "backbone": [c.input_dim, c.hidden_dim, c.hidden_dim, c.feature_dim],
        "dist_encoder": [c.feature_dim, c.coder_hidden, c.coder_hidden, 2 * c.latent_dim],
        "decoder": [c.latent_dim, c.coder_hidden, c.coder_hidden, c.feature_dim],
    }
    out: dict[tuple[str, str], tuple[int, ...]] = {}
    for group, w in widths.items():
        for i, (a, b) in enumerate(zip(w[:-1], w[1:])):
            out[(group, f"w{i}")] = (a, b)
            out[(group, f"b{i}")] = (b,)
    out[("classifier", "w")] = (c.feature_dim, n_classes)
    out[("classifier", "b")] = (n_classes,)
    out[("refine", "w")] = (c.feature_dim, c.feature_dim)
    out[("refine", "b")] = (c.feature_dim,)
    return out


def _dense(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float) -> np.ndarray:
    return rng.standard_normal((fan_in, fan_out)) * (gain / np.sqrt(fan_in))


def _mlp_params(rng, widths: list[int]) -> dict[str, np.ndarray]:
    out = {}
    last = len(widths) - 2
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        out[f"w{i}"] = _dense(rng, a, b, 1.0 if i == last else np.sqrt(2.0))
        out[f"b{i}"] = np.zeros(b)
    return out


def init_bundle(config: ModelConfig, class_ids: Iterable[int] = (), seed=0) -> ModelBundle:
    rng = np.random.default_rng(seed)
    c = config
    class_ids = [int(i) for i in class_ids]
    enc = _mlp_params(rng, [c.feature_dim, c.coder_hidden, c.coder_hidden, 2 * c.latent_dim])
    enc["w2"][:, c.latent_dim :] *= 0.1
    enc["b2"][c.latent_dim :] = SIGMA_BIAS
    groups = {
        "backbone": ParamSet("backbone", _mlp_params(rng, [c.input_dim, c.hidden_dim, c.hidden_dim, c.feature_dim])),
        "classifier": ParamSet(
            "classifier",
            {"w": _dense(rng, c.feature_dim, len(class_ids), 1.0), "b": np.zeros(len(class_ids))},
        ),
        "dist_encoder": ParamSet("dist_encoder", enc),
        "decoder": ParamSet("decoder", _mlp_params(rng, [c.latent_dim, c.coder_hidden, c.coder_hidden, c.feature_dim])),
        "refine": ParamSet("refine", {"w": _dense(rng, c.feature_dim, c.feature_dim, 1.0), "b": np.zeros(c.feature_dim)}),
    }
    return ModelBundle(config, groups, class_ids)


def add_classes(bundle: ModelBundle, new_ids: Iterable[int], seed=0) -> None:
    """Append classifier columns for ``new_ids``; existing columns are kept."""
    new_ids = [int(i) for i in new_ids]
    clash = set(new_ids) & set(bundle.class_ids)
    if clash:
        raise ValueError(f"identities already in the classifier: {sorted(clash)[:5]}")
    rng = np.random.default_rng(seed)
    head = bundle["classifier"]
    w, b = head["w"], head["b"]
    w.data = np.concatenate([w.data, _dense(rng, bundle.feature_dim, len(new_ids), 1.0)], axis=1)
    b.data = np.concatenate([b.data, np.zeros(len(new_ids))])
    for p in (w, b):
        p.grad = np.zeros_like(p.data)
        p.momentum = np.zeros_like(p.data)
    bundle.class_ids.extend(new_ids)


def label_index(bundle: ModelBundle, identities: np.ndarray) -> np.ndarray:
    """Map global identities to classifier column indices."""
    lookup = {pid: i for i, pid in enumerate(bundle.class_ids)}
    try:
        return np.array([lookup[int(pid)] for pid in identities], dtype=np.int64)
    except KeyError as exc:
        raise KeyError(f"identity {exc.args[0]} has no classifier column") from None


def _group(bundle: ModelBundle, params: Overrides | None, name: str) -> Mapping[str, Tensor]:
    if params is not None and name in params:
        return params[name]
    return bundle[name]


def _mlp(p: Mapping[str, Tensor], x: Tensor, layers: int) -> Tensor:
    h = x
    for i in range(layers):
        w = p[f"w{i}"]
        if h.shape[1] != w.shape[0]:
            raise ValueError(f"layer {i}: input width {h.shape[1]} != expected {w.shape[0]}")
        h = h @ w + p[f"b{i}"]
        if i < layers - 1:
            h = relu(h)
    return h


def backbone_forward(bundle: ModelBundle, x, params: Overrides | None = None) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != bundle.config.input_dim:
        raise ValueError(f"backbone expects (m, {bundle.config.input_dim}) inputs, got {x.shape}")
    return _mlp(_group(bundle, params, "backbone"), x, 3)


def classify(bundle: ModelBundle, features: Tensor, params: Overrides | None = None) -> Tensor:
    p = _group(bundle, params, "classifier")
    return features @ p["w"] + p["b"]


def encode_distribution(bundle: ModelBundle, features, params: Overrides | None = None) -> GaussianLatent:
    features = as_tensor(features)
    out = _mlp(_group(bundle, params, "dist_encoder"), features, 3)
    n = bundle.latent_dim
    return GaussianLatent(out[:, :n], softplus(out[:, n:]) + SIGMA_FLOOR)


def sample_latent(latent: GaussianLatent, rng: np.random.Generator) -> Tensor:
    """Reparameterized draw ``mu + sigma * u`` with ``u ~ N(0, I)``."""
    u = rng.standard_normal(latent.mu.shape)
    return latent.mu + latent.sigma * u


def decode(bundle: ModelBundle, z, params: Overrides | None = None) -> Tensor:
    z = as_tensor(z)
    if z.ndim != 2 or z.shape[1] != bundle.latent_dim:
        raise ValueError(f"decoder expects (m, {bundle.latent_dim}) latents, got {z.shape}")
    return _mlp(_group(bundle, params, "decoder"), z, 3)


def refine(bundle: ModelBundle, x_s, x_gen, params: Overrides | None = None) -> tuple[Tensor, Tensor]:
    """Gate ``v = sigmoid((x_s - x_gen) W + b)`` and blend ``(1 - v) x_s + v x_gen``."""
    x_s, x_gen = as_tensor(x_s), as_tensor(x_gen)
    if x_s.shape != x_gen.shape:
        raise ValueError(f"refine inputs differ in shape: {x_s.shape} vs {x_gen.shape}")
    p = _group(bundle, params, "refine")
    v = sigmoid((x_s - x_gen) @ p["w"] + p["b"])
    return v, x_s + v * (x_gen - x_s)


# -- state management ------------------------------------------------------------

Snapshot = dict[str, dict[str, np.ndarray]]


def snapshot(bundle: ModelBundle) -> Snapshot:
    return {name: group.state() for name, group in bundle.groups.items()}


def restore(bundle: ModelBundle, snap: Snapshot) -> ModelBundle:
    for name, state in snap.items():
        bundle[name].load_state(state)
    return bundle


def same_bits(a: Snapshot, b: Snapshot, groups: Iterable[str] | None = None) -> bool:
    names = list(groups) if groups is not None else sorted(set(a) | set(b))
    for name in names:
        if set(a[name]) != set(b[name]):
            return False
        for key in a[name]:
            x, y = a[name][key], b[name][key]
            if x.shape != y.shape or x.tobytes() != y.tobytes():
                return False
    return True


def freeze(bundle: ModelBundle, names: Iterable[str], frozen: bool = True) -> None:
    names = [names] if isinstance(names, str) else list(names)
    for name in names:
        bundle[name].frozen = frozen


def clone_bundle(bundle: ModelBundle) -> ModelBundle:
    """Independent copy with fresh optimizer buffers."""
    groups = {}
    for name, group in bundle.groups.items():
        groups[name] = ParamSet(name, group.state())
        groups[name].frozen = group.frozen
    return ModelBundle(bundle.config, groups, list(bundle.class_ids))


def save_bundle(bundle: ModelBundle, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in GROUPS:
        write_tensors(directory / name, bundle[name].state())
    meta = {"config": bundle.config.__dict__, "class_ids": bundle.class_ids}
    (directory / "bundle.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_bundle(directory: str | Path) -> ModelBundle:
    directory = Path(directory)
    meta = json.loads((directory / "bundle.json").read_text(encoding="utf-8"))
    groups = {name: ParamSet(name, read_tensors(directory / name)) for name in GROUPS}
    return ModelBundle(ModelConfig(**meta["config"]), groups, [int(i) for i in meta["class_ids"]])
