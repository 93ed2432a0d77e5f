"""Scalar objectives: identity losses, Wasserstein alignment, reconstruction,
the meta-learning objective and the prototype anchor loss."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from sdareid.model import GaussianLatent, ModelBundle, Overrides, classify, decode, encode_distribution, refine, sample_latent
from sdareid.tensor import Tensor, as_tensor, concat, logsumexp, relu, safe_sqrt, sqdist

if TYPE_CHECKING:
    from sdareid.pfa import PrototypeBank


class DegenerateBatchWarning(UserWarning):
    """A triplet batch had no anchor with both a positive and a negative."""


def cross_entropy_smoothed(logits: Tensor, labels, epsilon: float = 0.1) -> Tensor:
    """Mean cross entropy against ``(1 - eps) * onehot + eps / C``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    m, c = logits.shape
    if len(labels) != m:
        raise ValueError(f"{len(labels)} labels for {m} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")
    target = np.full((m, c), epsilon / c)
    target[np.arange(m), labels] += 1.0 - epsilon
    log_probs = logits - logsumexp(logits, axis=1, keepdims=True)
    return -(log_probs * target).sum() * (1.0 / m)


def triplet_batch_hard(features: Tensor, labels, margin: float = 0.3) -> Tensor:
    """Batch-hard triplet loss, averaged over anchors that have both a positive
    and a negative.  Returns zero (and warns) when no anchor qualifies."""
    features = as_tensor(features)
    labels = np.asarray(labels)
    m = features.shape[0]
    if m < 2:
        raise ValueError("triplet loss needs at least two samples")
    dist = safe_sqrt(sqdist(features, features))
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(m, dtype=bool)
    neg_mask = ~same
    valid = pos_mask.any(axis=1) & neg_mask.any(axis=1)
    if not valid.any():
        warnings.warn("no anchor has both a positive and a negative; triplet loss is 0", DegenerateBatchWarning, stacklevel=2)
        return (features * 0.0).sum()
    anchors = np.flatnonzero(valid)
    d = dist.data
    hardest_pos = np.where(pos_mask, d, -np.inf).argmax(axis=1)[anchors]
    hardest_neg = np.where(neg_mask, d, np.inf).argmin(axis=1)[anchors]
    d_p = dist[anchors, hardest_pos]
    d_n = dist[anchors, hardest_neg]
    return relu(d_p - d_n + margin).mean()


def id_loss(logits: Tensor, features: Tensor, labels, margin: float = 0.3, epsilon: float = 0.1) -> Tensor:
    return cross_entropy_smoothed(logits, labels, epsilon) + triplet_batch_hard(features, labels, margin)


def _w2_squared_rows(mu: Tensor, sigma: Tensor, mu0, sigma0) -> Tensor:
    if np.any(sigma.data <= 0):
        raise ValueError("latent standard deviations must be strictly positive")
    return (mu - mu0).square().sum(axis=1) + (sigma - sigma0).square().sum(axis=1)


def w2_squared_to_prior(latent: GaussianLatent) -> Tensor:
    """Batch mean of the squared 2-Wasserstein distance to N(0, I)."""
    return _w2_squared_rows(latent.mu, latent.sigma, 0.0, 1.0).mean()


def w2_to_prior(latent: GaussianLatent) -> Tensor:
    """Batch mean of the 2-Wasserstein distance from each row's N(mu, diag(sigma^2)) to N(0, I).

    Between diagonal Gaussians the distance is
    ``sqrt(||mu_a - mu_b||^2 + ||sigma_a - sigma_b||^2)`` with sigma the standard
    deviations, i.e. the square roots of the diagonal variances.
    """
    return safe_sqrt(_w2_squared_rows(latent.mu, latent.sigma, 0.0, 1.0)).mean()


def w2_between(a: GaussianLatent, b: GaussianLatent) -> Tensor:
    if a.mu.shape != b.mu.shape:
        raise ValueError(f"latent shapes differ: {a.mu.shape} vs {b.mu.shape}")
    if np.any(b.sigma.data <= 0):
        raise ValueError("latent standard deviations must be strictly positive")
    return safe_sqrt(_w2_squared_rows(a.mu, a.sigma, b.mu, b.sigma)).mean()


def reconstruction_loss(x_s: Tensor, x_prime: Tensor) -> Tensor:
    """Mean over rows of the Euclidean norm of ``x_s - x_prime``."""
    x_s, x_prime = as_tensor(x_s), as_tensor(x_prime)
    if x_s.shape != x_prime.shape:
        raise ValueError(f"shape mismatch: {x_s.shape} vs {x_prime.shape}")
    return safe_sqrt((x_s - x_prime).square().sum(axis=1)).mean()


def refined_id_loss(refined_logits: Tensor, x_r: Tensor, labels, margin: float = 0.3, epsilon: float = 0.1) -> Tensor:
    return id_loss(refined_logits, x_r, labels, margin, epsilon)


@dataclass(frozen=True)
class LossWeights:
    w2: float = 1.0
    rec: float = 1.0
    ref: float = 1.0


@dataclass
class MetaLoss:
    total: Tensor
    w2_squared: Tensor
    reconstruction: Tensor
    refined: Tensor

    def parts(self) -> dict[str, float]:
        return {
            "total": self.total.item(),
            "w2_squared": self.w2_squared.item(),
            "reconstruction": self.reconstruction.item(),
            "refined": self.refined.item(),
        }


def meta_loss(
    features,
    labels,
    bundle: ModelBundle,
    rng: np.random.Generator,
    params: Overrides | None = None,
    margin: float = 0.3,
    epsilon: float = 0.1,
    weights: LossWeights = LossWeights(),
) -> MetaLoss:
    """Squared W2-to-prior + reconstruction + refined identity loss.

    ``features`` are backbone outputs; they are treated as constants, so only
    the encoder, decoder and refine groups (and the classifier, if it requires
    grad) receive gradients.  ``labels`` are classifier column indices.
    """
    x_s = Tensor(as_tensor(features).data)
    if x_s.shape[0] == 0:
        raise ValueError("meta_loss needs a non-empty batch")
    latent = encode_distribution(bundle, x_s, params)
    z = sample_latent(latent, rng)
    x_gen = decode(bundle, z, params)
    _, x_r = refine(bundle, x_s, x_gen, params)
    w2sq = w2_squared_to_prior(latent)
    rec = reconstruction_loss(x_s, x_gen)
    ref = refined_id_loss(classify(bundle, x_r, params), x_r, labels, margin, epsilon)
    total = w2sq * weights.w2 + rec * weights.rec + ref * weights.ref
    return MetaLoss(total, w2sq, rec, ref)


def prototype_logits(features: Tensor, prototypes: Tensor, tau: float) -> Tensor:
    return sqdist(as_tensor(features), as_tensor(prototypes), exact=False) * (-1.0 / tau)


def prototype_anchor_loss(
    features,
    labels,
    bank: "PrototypeBank",
    tau: float = 1.0,
    current: Tensor | None = None,
) -> Tensor:
    """Mean negative log-probability of each sample's own current-domain prototype.

    The softmax runs over ``exp(-||x - M_k||^2 / tau)`` for all current
    prototypes ``M`` and all past prototypes ``P``.  ``current`` overrides the
    bank's current prototypes (pass a Parameter to learn them).
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    features = as_tensor(features)
    current = as_tensor(bank.current) if current is None else current
    cols = bank.current_columns(labels)
    allp = concat([current, Tensor(bank.past)], axis=0) if len(bank.past) else current
    logits = prototype_logits(features, allp, tau)
    m = features.shape[0]
    own = logits[np.arange(m), cols]
    return (logsumexp(logits, axis=1) - own).mean()


def prototype_probabilities(features, prototypes: np.ndarray, tau: float) -> np.ndarray:
    """Softmax over prototypes, rows sum to one (no gradient)."""
    logits = prototype_logits(Tensor(np.asarray(features)), Tensor(prototypes), tau).data
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)
