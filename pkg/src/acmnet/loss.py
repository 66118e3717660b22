"""Contrastive (NT-Xent) and rotation cross-entropy losses with gradients.

Descriptor batches for the contrastive loss are ordered view-major per
image: ``(z_{1,0}, z_{1,1}, z_{2,0}, z_{2,1}, ...)``, so rows ``2i`` and
``2i + 1`` are the two views of image ``i``.
"""

import enum
import math
from dataclasses import dataclass

import numpy as np

from acmnet.errors import DegenerateBatchError, DomainError, ParameterError


class DenominatorMode(str, enum.Enum):
    # Every view of the anchor's own image is left out of the denominator,
    # the positive included. Losses can therefore be negative.
    PAPER_EXCLUDES_SELF_IMAGE = "paper_excludes_self_image"
    # Only the anchor itself is left out; the positive stays in.
    SIMCLR_STANDARD = "simclr_standard"


@dataclass
class ContrastiveConfig:
    temperature: float = 0.01
    denominator_mode: DenominatorMode = DenominatorMode.PAPER_EXCLUDES_SELF_IMAGE

    def __post_init__(self):
        self.denominator_mode = DenominatorMode(self.denominator_mode)
        if not self.temperature > 0:
            raise ParameterError(f"temperature must be > 0, got {self.temperature}")


@dataclass
class LossBreakdown:
    contrastive: float
    predictive: float
    weight: float
    total: float


def cosine_similarity(z1, z2):
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    n1 = np.linalg.norm(z1)
    n2 = np.linalg.norm(z2)
    if n1 == 0 or n2 == 0:
        raise DomainError("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(z1, z2) / (n1 * n2), -1.0, 1.0))


def _logsumexp_masked(x, mask):
    x = np.where(mask, x, -np.inf)
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True)
    return (m + np.log(s))[:, 0], e / s


def ntxent_loss(descriptors, config=None, return_grad=False):
    """Mean over all ``2N`` anchors of ``-log(exp(s_pos/t) / sum_neg exp(s/t))``.

    With ``return_grad`` the gradient with respect to the raw (unnormalized)
    descriptors is returned as well.
    """
    config = config or ContrastiveConfig()
    z = np.asarray(descriptors)
    if z.ndim != 2 or z.shape[0] % 2:
        raise ParameterError(f"expected an even number of descriptor rows, got {z.shape}")
    two_n = z.shape[0]
    n = two_n // 2
    if n < 2:
        raise DegenerateBatchError(
            "NT-Xent needs N >= 2 images: with N = 1 the negative set is empty"
        )
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DomainError("zero descriptor in contrastive batch")
    u = z / norms
    tau = config.temperature
    logits = (u @ u.T) / tau

    idx = np.arange(two_n)
    pos = idx ^ 1
    image = idx // 2
    if config.denominator_mode is DenominatorMode.PAPER_EXCLUDES_SELF_IMAGE:
        mask = image[:, None] != image[None, :]
    else:
        mask = idx[:, None] != idx[None, :]
    lse, soft = _logsumexp_masked(logits, mask)
    per_anchor = lse - logits[idx, pos]
    loss = float(per_anchor.sum() / two_n)
    if not return_grad:
        return loss

    dlogits = soft / two_n
    dlogits[idx, pos] -= 1.0 / two_n
    du = (dlogits + dlogits.T) @ u / tau
    dz = (du - u * (u * du).sum(axis=1, keepdims=True)) / norms
    return loss, dz


def rotation_ce_loss(logits, labels, reduction="sum", return_grad=False):
    """Cross-entropy over all samples; ``reduction="sum"`` has no 1/(4N) factor."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ParameterError(f"logits {logits.shape} and labels {labels.shape} disagree")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ParameterError(f"labels must lie in [0, {k})")
    if reduction not in ("sum", "mean"):
        raise ParameterError(f"unknown reduction {reduction!r}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(logits.shape[0])
    nll = -log_p[rows, labels]
    scale = 1.0 if reduction == "sum" else 1.0 / max(len(labels), 1)
    loss = float(nll.sum() * scale)
    if not return_grad:
        return loss
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    return loss, grad * scale


def total_loss(contrastive, predictive, weight):
    for name, v in (("L_C", contrastive), ("L_P", predictive), ("lambda", weight)):
        if not math.isfinite(v):
            raise DomainError(f"{name} is not finite: {v}")
    return contrastive + weight * predictive
