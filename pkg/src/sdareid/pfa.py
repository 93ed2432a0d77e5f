"""Prototype-based few-shot adaptation.

Prototypes are rows of ``(count, feature_dim)`` matrices.  ``past`` holds
anchors of every earlier domain (source-domain class centroids to begin
with); ``current`` holds the learnable prototypes of the domain being
adapted to.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from sdareid.config import Hyper
from sdareid.data import DomainDataset
from sdareid.losses import prototype_anchor_loss
from sdareid.mda import EncoderTrace, FreezeViolation, few_shot_update_encoder
from sdareid.model import ModelBundle, backbone_forward, same_bits, snapshot
from sdareid.params import Parameter, sgd_step


@dataclass(frozen=True, eq=False)
class PrototypeBank:
    past: np.ndarray
    past_tags: tuple[tuple[int, int], ...]
    current: np.ndarray
    current_ids: tuple[int, ...] = ()
    current_domain: int | None = None

    def __post_init__(self) -> None:
        past = np.asarray(self.past, dtype=np.float64)
        current = np.asarray(self.current, dtype=np.float64)
        if len(past) != len(self.past_tags):
            raise ValueError(f"{len(past)} past prototypes but {len(self.past_tags)} tags")
        if len(current) != len(self.current_ids):
            raise ValueError(f"{len(current)} current prototypes but {len(self.current_ids)} ids")
        ids = [pid for _, pid in self.past_tags] + list(self.current_ids)
        if len(set(ids)) != len(ids):
            raise ValueError("prototype identities must be distinct")
        for arr in (past, current):
            arr.setflags(write=False)
        object.__setattr__(self, "past", past)
        object.__setattr__(self, "current", current)

    @property
    def n_past(self) -> int:
        return len(self.past)

    @property
    def n_current(self) -> int:
        return len(self.current)

    def current_columns(self, identities) -> np.ndarray:
        lookup = {pid: i for i, pid in enumerate(self.current_ids)}
        try:
            return np.array([lookup[int(pid)] for pid in np.asarray(identities)], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"identity {exc.args[0]} has no current-domain prototype") from None

    def with_current(self, current: np.ndarray, ids, domain: int) -> "PrototypeBank":
        return dataclasses.replace(self, current=current, current_ids=tuple(int(i) for i in ids), current_domain=domain)

    def same_bits(self, other: "PrototypeBank") -> bool:
        return (
            self.past.tobytes() == other.past.tobytes()
            and self.current.tobytes() == other.current.tobytes()
            and self.past_tags == other.past_tags
            and self.current_ids == other.current_ids
        )


def class_centroids(features: np.ndarray, identities: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-identity mean rows, ordered by sorted identity."""
    ids, inverse = np.unique(identities, return_inverse=True)
    sums = np.zeros((len(ids), features.shape[1]))
    np.add.at(sums, inverse, features)
    counts = np.bincount(inverse, minlength=len(ids)).astype(np.float64)
    return ids, sums / counts[:, None]


def init_prototypes(bundle: ModelBundle, source: DomainDataset) -> PrototypeBank:
    """Past prototypes = source-domain class centroids of backbone features."""
    if len(source) == 0:
        raise ValueError("source dataset is empty")
    feats = backbone_forward(bundle, source.x).data
    ids, centroids = class_centroids(feats, source.identity)
    tags = tuple((int(source.domain), int(pid)) for pid in ids)
    return PrototypeBank(centroids, tags, np.zeros((0, bundle.feature_dim)))


def extend_bank(bank: PrototypeBank) -> PrototypeBank:
    """Append the current prototypes (with their tags) to the past ones."""
    if bank.n_current == 0:
        raise ValueError("no current-domain prototypes to append; learn a new domain first")
    domain = -1 if bank.current_domain is None else bank.current_domain
    return PrototypeBank(
        np.concatenate([bank.past, bank.current]),
        bank.past_tags + tuple((domain, pid) for pid in bank.current_ids),
        np.zeros((0, bank.past.shape[1] if bank.past.size else bank.current.shape[1])),
    )


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


@dataclass
class StageTrace:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_start_loss: list[float] = field(default_factory=list)
    steps: int = 0
    epochs: int = 0


def learn_prototypes(
    bundle: ModelBundle,
    few_shot: DomainDataset,
    bank: PrototypeBank,
    lr: float,
    budget: int,
    rng: np.random.Generator,
    tau: float = 1.0,
    batch_size: int = 90,
    tol: float = 1e-5,
) -> tuple[PrototypeBank, StageTrace]:
    """Stage 1: fit the current-domain prototypes with the backbone fixed.

    Prototypes start at the few-shot class centroids and follow SGD on the
    anchor loss until an epoch improves it by less than ``tol`` or ``budget``
    epochs have run.
    """
    if len(few_shot) == 0:
        raise ValueError("few-shot set is empty")
    before = snapshot(bundle)
    feats = backbone_forward(bundle, few_shot.x).data
    ids, centroids = class_centroids(feats, few_shot.identity)
    bank = bank.with_current(centroids, ids, few_shot.domain)
    protos = Parameter(centroids)
    labels = few_shot.identity
    trace = StageTrace()

    def full_loss() -> float:
        return prototype_anchor_loss(feats, labels, bank, tau, current=protos.data).item()

    previous = full_loss()
    trace.epoch_loss.append(previous)
    for _ in range(budget):
        for idx in _batches(len(feats), batch_size, rng):
            loss = prototype_anchor_loss(feats[idx], labels[idx], bank, tau, current=protos)
            protos.zero_grad()
            loss.backward()
            if not np.all(np.isfinite(protos.grad)):
                raise FloatingPointError("non-finite prototype gradient")
            protos.data = protos.data - lr * protos.grad
            trace.steps += 1
        trace.epochs += 1
        current = full_loss()
        trace.epoch_loss.append(current)
        if previous - current < tol:
            break
        previous = current
    if not same_bits(before, snapshot(bundle), ["backbone"]):
        raise FreezeViolation("prototype learning modified the backbone")
    return bank.with_current(protos.data.copy(), ids, few_shot.domain), trace


def learn_features(
    bundle: ModelBundle,
    few_shot: DomainDataset,
    bank: PrototypeBank,
    lr: float,
    epochs: int,
    rng: np.random.Generator,
    tau: float = 1.0,
    batch_size: int = 90,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
) -> tuple[ModelBundle, StageTrace]:
    """Stage 2: fine-tune the backbone against the fixed prototypes."""
    if bank.n_current == 0:
        raise ValueError("learn_prototypes must run before learn_features")
    frozen_bank = PrototypeBank(bank.past.copy(), bank.past_tags, bank.current.copy(), bank.current_ids, bank.current_domain)
    backbone = bundle["backbone"]
    labels = few_shot.identity
    trace = StageTrace()

    def full_loss() -> float:
        return prototype_anchor_loss(backbone_forward(bundle, few_shot.x).data, labels, bank, tau).item()

    for _ in range(epochs):
        trace.epoch_start_loss.append(full_loss())
        for idx in _batches(len(few_shot), batch_size, rng):
            feats = backbone_forward(bundle, few_shot.x[idx])
            loss = prototype_anchor_loss(feats, labels[idx], bank, tau)
            bundle.zero_grad()
            loss.backward()
            sgd_step(backbone, lr, momentum, weight_decay)
            bundle.zero_grad()
            trace.steps += 1
        trace.epochs += 1
        trace.epoch_loss.append(full_loss())
    if not bank.same_bits(frozen_bank):
        raise FreezeViolation("feature learning modified the prototypes")
    return bundle, trace


@dataclass
class AdaptInfo:
    prototype: StageTrace
    features: StageTrace
    encoder: EncoderTrace
    backbone_steps: int
    freeze_checks: dict[str, bool]


def adapt_domain(
    bundle: ModelBundle,
    bank: PrototypeBank,
    few_shot: DomainDataset,
    hp: Hyper,
    rng: np.random.Generator,
) -> tuple[ModelBundle, PrototypeBank, AdaptInfo]:
    """Prototype learning, prototype-guided feature learning and encoder updating
    on one new domain, then the bank absorbs the new prototypes.

    The classifier head is never touched here.
    """
    checks: dict[str, bool] = {}
    start = snapshot(bundle)

    def stage_prototypes(b):
        new_bank, trace = learn_prototypes(
            bundle, few_shot, b, hp.lr_proto, hp.proto_epochs, rng, hp.tau, hp.batch_size, hp.proto_tol
        )
        checks["prototypes_keep_backbone"] = True
        return new_bank, trace

    def stage_features(b, epochs):
        _, trace = learn_features(
            bundle, few_shot, b, hp.lr_feat, epochs, rng, hp.tau, hp.batch_size, hp.momentum, hp.weight_decay
        )
        checks["features_keep_prototypes"] = True
        return trace

    def stage_encoder(steps):
        _, trace = few_shot_update_encoder(bundle, few_shot, hp.lr_outer, steps, rng)
        checks["encoder_keeps_others"] = True
        return trace

    if hp.adapt_order == "pfa-then-encoder":
        bank, p_trace = stage_prototypes(bank)
        f_trace = stage_features(bank, hp.feat_epochs)
        e_trace = stage_encoder(hp.encoder_steps)
    elif hp.adapt_order == "encoder-then-pfa":
        e_trace = stage_encoder(hp.encoder_steps)
        bank, p_trace = stage_prototypes(bank)
        f_trace = stage_features(bank, hp.feat_epochs)
    elif hp.adapt_order == "alternating":
        bank, p_trace = stage_prototypes(bank)
        f_trace, e_trace = StageTrace(), EncoderTrace()
        per_epoch = hp.encoder_steps // max(1, hp.feat_epochs)
        extra = hp.encoder_steps - per_epoch * max(1, hp.feat_epochs)
        for epoch in range(max(1, hp.feat_epochs)):
            t = stage_features(bank, 1 if hp.feat_epochs else 0)
            f_trace.epoch_start_loss += t.epoch_start_loss
            f_trace.epoch_loss += t.epoch_loss
            f_trace.steps += t.steps
            f_trace.epochs += t.epochs
            e = stage_encoder(per_epoch + (extra if epoch == 0 else 0))
            e_trace.loss += e.loss
            e_trace.w2 += e.w2
            e_trace.steps += e.steps
    else:
        raise ValueError(f"unknown adapt_order {hp.adapt_order!r}")

    classifier_kept = same_bits(start, snapshot(bundle), ["classifier"])
    checks["classifier_untouched"] = classifier_kept
    if not classifier_kept:
        raise FreezeViolation("adaptation modified the classifier head")
    bank = extend_bank(bank)
    return bundle, bank, AdaptInfo(p_trace, f_trace, e_trace, f_trace.steps, checks)
