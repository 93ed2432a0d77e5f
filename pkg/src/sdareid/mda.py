"""Meta distribution alignment: source pretraining with a first-order
bilevel update of the encoder/decoder/refine stack, and label-free encoder
updating on few-shot target samples."""

from __future__ import annotations

from collections.abc import Callable, Mapping
from dataclasses import dataclass, field

import numpy as np

from sdareid.config import Hyper
from sdareid.data import DomainDataset, pk_batch, split_meta
from sdareid.losses import LossWeights, id_loss, meta_loss, reconstruction_loss, w2_squared_to_prior, w2_to_prior
from sdareid.model import (
    ModelBundle,
    Overrides,
    backbone_forward,
    classify,
    decode,
    encode_distribution,
    label_index,
    same_bits,
    sample_latent,
    snapshot,
)
from sdareid.params import Parameter, sgd_step, warmup_lr
from sdareid.tensor import Tensor

META_GROUPS = ("dist_encoder", "decoder", "refine")

FastWeights = dict[str, dict[str, Parameter]]
MetaObjective = Callable[[ModelBundle, DomainDataset, Overrides, np.random.Generator], Tensor]


class FreezeViolation(AssertionError):
    """A parameter group that must stay fixed was modified."""


def _weights(hp: Hyper) -> LossWeights:
    return LossWeights(hp.w2_weight, hp.rec_weight, hp.ref_weight)


def default_objective(hp: Hyper) -> MetaObjective:
    """The meta objective on a batch, with the backbone treated as fixed."""

    def objective(bundle, batch, params, rng):
        feats = backbone_forward(bundle, batch.x).data
        labels = label_index(bundle, batch.identity)
        return meta_loss(feats, labels, bundle, rng, params, hp.margin, hp.label_smoothing, _weights(hp)).total

    return objective


def _constant_overrides(bundle: ModelBundle, names) -> dict[str, dict[str, Tensor]]:
    return {name: {k: Tensor(p.data) for k, p in bundle[name].items()} for name in names}


def inner_update(
    bundle: ModelBundle,
    batch: DomainDataset,
    lr_inner: float,
    objective: MetaObjective,
    rng: np.random.Generator,
) -> FastWeights:
    """Fast weights ``theta' = theta - lr_inner * grad`` for the meta groups.

    Gradients are taken on private copies; the bundle is not touched.
    """
    if len(batch) == 0:
        raise ValueError("meta-train batch is empty")
    leaves = {name: {k: Parameter(p.data) for k, p in bundle[name].items()} for name in META_GROUPS}
    overrides: dict[str, Mapping[str, Tensor]] = dict(leaves)
    overrides["classifier"] = _constant_overrides(bundle, ["classifier"])["classifier"]
    loss = objective(bundle, batch, overrides, rng)
    if loss.requires_grad:
        loss.backward()
    fast: FastWeights = {}
    for name, group in leaves.items():
        fast[name] = {k: Parameter(p.data - lr_inner * p.grad) for k, p in group.items()}
    return fast


def outer_update(
    bundle: ModelBundle,
    fast: FastWeights,
    batch: DomainDataset,
    lr_outer: float,
    objective: MetaObjective,
    rng: np.random.Generator,
    scope: str = "all",
    momentum: float = 0.0,
) -> ModelBundle:
    """First-order meta step: the meta-test gradient at the fast weights is
    applied to the original parameters.  ``scope="encoder-only"`` restricts the
    update to the distribution encoder."""
    if scope not in ("all", "encoder-only"):
        raise ValueError(f"unknown outer scope {scope!r}")
    if len(batch) == 0:
        raise ValueError("meta-test batch is empty")
    for group in fast.values():
        for p in group.values():
            p.zero_grad()
    overrides: dict[str, Mapping[str, Tensor]] = dict(fast)
    overrides["classifier"] = _constant_overrides(bundle, ["classifier"])["classifier"]
    loss = objective(bundle, batch, overrides, rng)
    if loss.requires_grad:
        loss.backward()
    targets = META_GROUPS if scope == "all" else ("dist_encoder",)
    for name in targets:
        group = bundle[name]
        for k, p in group.items():
            p.grad = fast[name][k].grad.copy()
        sgd_step(group, lr_outer, momentum)
        group.zero_grad()
    return bundle


def id_step(bundle: ModelBundle, batch: DomainDataset, lr: float, hp: Hyper) -> float:
    """One identity-loss step on the backbone and classifier."""
    feats = backbone_forward(bundle, batch.x)
    logits = classify(bundle, feats)
    loss = id_loss(logits, feats, label_index(bundle, batch.identity), hp.margin, hp.label_smoothing)
    bundle.zero_grad()
    loss.backward()
    sgd_step(bundle["backbone"], lr, hp.momentum, hp.weight_decay)
    sgd_step(bundle["classifier"], lr, hp.momentum, hp.weight_decay)
    bundle.zero_grad()
    return loss.item()


@dataclass
class PretrainTrace:
    id_loss: list[float] = field(default_factory=list)
    meta_train: list[float] = field(default_factory=list)
    meta_test: list[float] = field(default_factory=list)
    steps: int = 0


def pretrain_base(
    source: DomainDataset,
    bundle: ModelBundle,
    hp: Hyper,
    rng: np.random.Generator,
    epochs: int | None = None,
) -> tuple[ModelBundle, PretrainTrace]:
    """Identity learning on the source domain interleaved with meta alignment.

    Per batch: an identity-loss step on backbone + classifier, then a
    meta-train/meta-test split of the batch, an inner update and a
    first-order outer update of the encoder, decoder and refine net.
    """
    epochs = hp.pretrain_epochs if epochs is None else epochs
    base_objective = default_objective(hp)
    trace = PretrainTrace()
    record: list[float] = []

    def objective(b, batch, params, r):
        loss = base_objective(b, batch, params, r)
        record.append(loss.item())
        return loss

    p_ids = min(hp.p_ids, len(source.ids))
    batches = max(1, len(source) // hp.batch_size)
    for epoch in range(epochs):
        lr = warmup_lr(epoch, hp.lr, hp.warmup_epochs)
        scale = lr / hp.lr if hp.lr > 0 else 0.0
        for _ in range(batches):
            batch = pk_batch(source, p_ids, hp.instances_per_id, rng)
            trace.id_loss.append(id_step(bundle, batch, lr, hp))
            try:
                split = split_meta(batch, hp.meta_split, rng)
            except ValueError:
                trace.steps += 1
                continue
            fast = inner_update(bundle, split.meta_train, hp.lr_inner * scale, objective, rng)
            outer_update(bundle, fast, split.meta_test, hp.lr_outer * scale, objective, rng, hp.outer_scope, hp.momentum)
            trace.meta_train.append(record[-2])
            trace.meta_test.append(record[-1])
            trace.steps += 1
    for name in ("id_loss", "meta_train", "meta_test"):
        if not np.all(np.isfinite(getattr(trace, name))):
            raise FloatingPointError(f"non-finite {name} during pretraining")
    return bundle, trace


def latent_alignment(bundle: ModelBundle, x: np.ndarray) -> float:
    """Mean W2 distance of the encoded latents of ``x`` to the prior."""
    latent = encode_distribution(bundle, backbone_forward(bundle, x).data)
    return w2_to_prior(latent).item()


@dataclass
class EncoderTrace:
    loss: list[float] = field(default_factory=list)
    w2: list[float] = field(default_factory=list)
    steps: int = 0


def few_shot_update_encoder(
    bundle: ModelBundle,
    samples: DomainDataset,
    lr: float,
    steps: int,
    rng: np.random.Generator,
    momentum: float = 0.0,
) -> tuple[ModelBundle, EncoderTrace]:
    """Minimise reconstruction + squared W2-to-prior on unlabeled target samples
    with respect to the distribution encoder only."""
    if len(samples) == 0:
        raise ValueError("few-shot updating needs at least one sample")
    before = snapshot(bundle)
    feats = backbone_forward(bundle, samples.x).data
    decoder = _constant_overrides(bundle, ["decoder"])
    enc = bundle["dist_encoder"]
    trace = EncoderTrace()
    for _ in range(steps + 1):
        latent = encode_distribution(bundle, feats)
        z = sample_latent(latent, rng)
        x_gen = decode(bundle, z, decoder)
        w2sq = w2_squared_to_prior(latent)
        loss = reconstruction_loss(feats, x_gen) + w2sq
        trace.loss.append(loss.item())
        trace.w2.append(w2_to_prior(latent).item())
        if trace.steps == steps:
            break
        enc.zero_grad()
        loss.backward()
        sgd_step(enc, lr, momentum)
        enc.zero_grad()
        trace.steps += 1
    after = snapshot(bundle)
    fixed = [g for g in bundle.groups if g != "dist_encoder"]
    if not same_bits(before, after, fixed):
        raise FreezeViolation("few-shot encoder updating modified a group other than dist_encoder")
    return bundle, trace
