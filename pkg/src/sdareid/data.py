"""Synthetic multi-domain identity data.

Each domain holds identities seen under several cameras.  A sample is

    x = A_t (c_id + o_cam + spread * noise) + b_t

with ``c_id`` an isotropic Gaussian identity center on the first
``identity_dim`` coordinates, ``o_cam`` a per-camera offset on the remaining
coordinates (all coordinates when ``identity_dim == input_dim``), and
``(A_t, b_t)`` a domain-specific affine map ``A_t = I + shift * G / sqrt(d)``,
``b_t = shift * g``.  Because every domain shares the identity coordinates
before mixing, ``domain_shift_scale`` controls how far a model trained on one
domain transfers to another.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np


class Sample(NamedTuple):
    x: np.ndarray
    identity: int
    camera: int
    domain: int


@dataclass(frozen=True)
class DomainSpec:
    id_count: int = 100
    cameras: int = 3
    samples_per_id_per_camera: int = 3
    input_dim: int = 32
    identity_dim: int = 16
    identity_cluster_spread: float = 0.5
    camera_shift_scale: float = 1.0
    domain_shift_scale: float = 0.5
    seed: int = 0
    domain: int = 1
    id_offset: int = 0

    def __post_init__(self) -> None:
        for name in ("id_count", "cameras", "samples_per_id_per_camera", "input_dim", "identity_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"DomainSpec.{name} must be positive, got {getattr(self, name)}")
        if self.identity_dim > self.input_dim:
            raise ValueError(f"DomainSpec.identity_dim ({self.identity_dim}) exceeds input_dim ({self.input_dim})")
        for name in ("identity_cluster_spread", "camera_shift_scale", "domain_shift_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"DomainSpec.{name} must be >= 0, got {getattr(self, name)}")
        if self.id_offset < 0:
            raise ValueError("DomainSpec.id_offset must be >= 0")


@dataclass(frozen=True, eq=False)
class DomainDataset:
    """Samples of one domain, stored column-wise."""

    domain: int
    x: np.ndarray
    identity: np.ndarray
    camera: np.ndarray
    camera_count: int
    sample_domain: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError(f"x must be 2-D, got shape {x.shape}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "identity", np.asarray(self.identity, dtype=np.int64))
        object.__setattr__(self, "camera", np.asarray(self.camera, dtype=np.int64))
        dom = self.sample_domain
        dom = np.full(len(x), self.domain, dtype=np.int64) if dom is None else np.asarray(dom, dtype=np.int64)
        object.__setattr__(self, "sample_domain", dom)
        if not (len(self.identity) == len(self.camera) == len(dom) == len(x)):
            raise ValueError("x, identity, camera and domain columns differ in length")
        for arr in (self.x, self.identity, self.camera, self.sample_domain):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.x)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.x[i], int(self.identity[i]), int(self.camera[i]), int(self.sample_domain[i]))

    @property
    def id_set(self) -> set[int]:
        return set(self.identity.tolist())

    @property
    def ids(self) -> np.ndarray:
        """Sorted distinct identities."""
        return np.unique(self.identity)

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]

    def subset(self, indices) -> "DomainDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return DomainDataset(
            self.domain, self.x[idx], self.identity[idx], self.camera[idx], self.camera_count, self.sample_domain[idx]
        )

    def equals(self, other: "DomainDataset") -> bool:
        """Bitwise equality of every column."""
        return (
            self.domain == other.domain
            and self.camera_count == other.camera_count
            and self.x.shape == other.x.shape
            and self.x.tobytes() == other.x.tobytes()
            and np.array_equal(self.identity, other.identity)
            and np.array_equal(self.camera, other.camera)
            and np.array_equal(self.sample_domain, other.sample_domain)
        )


def concat_datasets(parts: list[DomainDataset]) -> DomainDataset:
    if not parts:
        raise ValueError("nothing to concatenate")
    return DomainDataset(
        parts[0].domain,
        np.concatenate([p.x for p in parts]),
        np.concatenate([p.identity for p in parts]),
        np.concatenate([p.camera for p in parts]),
        max(p.camera_count for p in parts),
        np.concatenate([p.sample_domain for p in parts]),
    )


def generate_domain(spec: DomainSpec) -> DomainDataset:
    rng = np.random.default_rng(spec.seed)
    d, r = spec.input_dim, spec.identity_dim
    centers = np.zeros((spec.id_count, d))
    centers[:, :r] = rng.standard_normal((spec.id_count, r))
    offsets = np.zeros((spec.cameras, d))
    nuisance = slice(r, d) if r < d else slice(0, d)
    offsets[:, nuisance] = spec.camera_shift_scale * rng.standard_normal((spec.cameras, d - r if r < d else d))
    mixing = np.eye(d) + spec.domain_shift_scale * rng.standard_normal((d, d)) / np.sqrt(d)
    mean_shift = spec.domain_shift_scale * rng.standard_normal(d)

    ids = np.repeat(np.arange(spec.id_count), spec.cameras * spec.samples_per_id_per_camera)
    cams = np.tile(np.repeat(np.arange(spec.cameras), spec.samples_per_id_per_camera), spec.id_count)
    noise = rng.standard_normal((len(ids), d))
    latent = centers[ids] + offsets[cams] + spec.identity_cluster_spread * noise
    x = latent @ mixing.T + mean_shift
    return DomainDataset(spec.domain, x, ids + spec.id_offset, cams, spec.cameras)


def split_identities(dataset: DomainDataset, test_count: int, seed) -> tuple[DomainDataset, DomainDataset]:
    """Partition by identity into (train, test) with ``test_count`` test identities."""
    ids = dataset.ids
    if not 0 <= test_count <= len(ids):
        raise ValueError(f"cannot hold out {test_count} of {len(ids)} identities")
    rng = np.random.default_rng(seed)
    test_ids = rng.choice(ids, size=test_count, replace=False)
    is_test = np.isin(dataset.identity, test_ids)
    return dataset.subset(np.flatnonzero(~is_test)), dataset.subset(np.flatnonzero(is_test))


def sample_few_shot(dataset: DomainDataset, k_ids: int, seed) -> DomainDataset:
    """Keep every sample of ``k_ids`` identities drawn uniformly without replacement."""
    ids = dataset.ids
    if k_ids > len(ids):
        raise ValueError(f"requested {k_ids} identities but the dataset has only {len(ids)}")
    if k_ids < 1:
        raise ValueError("k_ids must be at least 1")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(ids, size=k_ids, replace=False)
    return dataset.subset(np.flatnonzero(np.isin(dataset.identity, chosen)))


def pk_batch(dataset: DomainDataset, p_ids: int, k_instances: int, seed) -> DomainDataset:
    """``p_ids`` identities times ``k_instances`` samples each.

    Identities with fewer than ``k_instances`` samples are drawn with replacement.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ids = dataset.ids
    if p_ids > len(ids):
        raise ValueError(f"batch needs {p_ids} identities, dataset has {len(ids)}")
    chosen = rng.choice(ids, size=p_ids, replace=False)
    picks = []
    for pid in chosen:
        members = np.flatnonzero(dataset.identity == pid)
        picks.append(rng.choice(members, size=k_instances, replace=len(members) < k_instances))
    return dataset.subset(np.concatenate(picks))


@dataclass(frozen=True)
class MetaSplit:
    meta_train: DomainDataset
    meta_test: DomainDataset
    train_labels: tuple[int, ...]
    test_labels: tuple[int, ...]


def split_meta(batch: DomainDataset, mode: str = "by-domain", seed=0) -> MetaSplit:
    """Partition a batch by its domain (or camera) labels into two non-empty halves.

    With an odd label count the meta-train side receives the extra label.
    """
    if mode == "by-domain":
        labels = batch.sample_domain
    elif mode == "by-camera":
        labels = batch.camera
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    distinct = np.unique(labels)
    if len(distinct) < 2:
        other = "by-camera" if mode == "by-domain" else "by-domain"
        raise ValueError(f"batch has a single {mode[3:]} label; use mode={other!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    order = rng.permutation(distinct)
    n_train = (len(order) + 1) // 2
    train_labels = np.sort(order[:n_train])
    in_train = np.isin(labels, train_labels)
    return MetaSplit(
        batch.subset(np.flatnonzero(in_train)),
        batch.subset(np.flatnonzero(~in_train)),
        tuple(int(v) for v in train_labels),
        tuple(int(v) for v in np.sort(order[n_train:])),
    )


def make_query_gallery(dataset: DomainDataset, seed) -> tuple[DomainDataset, DomainDataset]:
    """One query per identity, taken from a random camera; everything else is gallery.

    Identities seen by a single camera contribute no query.
    """
    rng = np.random.default_rng(seed)
    query_idx = []
    single = []
    for pid in dataset.ids:
        members = np.flatnonzero(dataset.identity == pid)
        cams = np.unique(dataset.camera[members])
        if len(cams) < 2:
            single.append(int(pid))
            continue
        cam = rng.choice(cams)
        candidates = members[dataset.camera[members] == cam]
        query_idx.append(int(rng.choice(candidates)))
    if single:
        warnings.warn(f"{len(single)} identities seen by one camera only; excluded from queries", stacklevel=2)
    is_query = np.zeros(len(dataset), dtype=bool)
    is_query[query_idx] = True
    return dataset.subset(np.flatnonzero(is_query)), dataset.subset(np.flatnonzero(~is_query))


def dump_dataset(dataset: DomainDataset, path: str | Path) -> None:
    """Tab-separated text: a ``#`` metadata line, a header row, one sample per line."""
    d = dataset.input_dim
    lines = [
        f"# domain={dataset.domain}\tcameras={dataset.camera_count}\tsamples={len(dataset)}\tinput_dim={d}",
        "\t".join(["domain", "identity", "camera"] + [f"x{i}" for i in range(d)]),
    ]
    for i in range(len(dataset)):
        vals = "\t".join(repr(float(v)) for v in dataset.x[i])
        lines.append(f"{dataset.sample_domain[i]}\t{dataset.identity[i]}\t{dataset.camera[i]}\t{vals}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path: str | Path) -> DomainDataset:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith("#"):
        raise ValueError(f"{path}: missing metadata line")
    meta = dict(item.split("=", 1) for item in text[0][1:].strip().split("\t"))
    d = int(meta["input_dim"])
    rows = [line.split("\t") for line in text[2:] if line]
    if len(rows) != int(meta["samples"]):
        raise ValueError(f"{path}: expected {meta['samples']} samples, found {len(rows)}")
    for lineno, row in enumerate(rows, start=3):
        if len(row) != d + 3:
            raise ValueError(f"{path}:{lineno}: expected {d + 3} fields, found {len(row)}")
    x = np.array([[float(v) for v in r[3:]] for r in rows]).reshape(len(rows), d)
    return DomainDataset(
        int(meta["domain"]),
        x,
        [int(r[1]) for r in rows],
        [int(r[2]) for r in rows],
        int(meta["cameras"]),
        [int(r[0]) for r in rows],
    )
