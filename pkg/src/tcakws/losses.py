"""Training objectives: classification CE, teacher-matching MSE, and the
local/global contrastive pair, plus the staged weighted combinations.

All loss functions build on the autodiff ops in `tensor`, so they are
differentiable end to end. The local contrastive denominator includes the
positive pair alongside all negatives, which keeps the loss non-negative.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractViolation
from .tensor import Tensor


@dataclass
class LossWeights:
    lambda1: float = 0.1    # pretrain: contrastive weight
    lambda2: float = 0.9    # pretrain: teacher-matching weight
    gamma1: float = 0.9     # fine-tune: CE weight
    gamma2: float = 0.05    # fine-tune: contrastive weight
    gamma3: float = 0.05    # fine-tune: teacher-matching weight
    tau: float = 0.5        # local contrastive temperature


def cross_entropy(p: Tensor, y: np.ndarray) -> Tensor:
    """-(1/B) sum y*log(p), probabilities clamped at 1e-12. y must be one-hot."""
    y = np.asarray(y)
    if y.shape != tuple(p.shape):
        raise ContractViolation(f"labels shape {y.shape} != probs shape {p.shape}")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise ContractViolation("labels must be one-hot rows")
    B = p.shape[0]
    picked = T.mul(T.log(T.clamp_min(p, 1e-12)), Tensor(y.astype(p.data.dtype)))
    return T.mul(picked.sum(), -1.0 / B)


def wvc_loss(student: Tensor, teacher: Tensor) -> Tensor:
    """Mean squared difference over every element of the aligned frames."""
    if tuple(student.shape) != tuple(teacher.shape):
        raise ContractViolation(
            f"student/teacher shapes differ after alignment: {student.shape} vs {teacher.shape}")
    return T.square(T.sub(student, teacher)).mean()


def global_loss(d1p: Tensor, d2p: Tensor) -> Tensor:
    """Squared L2 distance between time-averaged vectors, summed over feature
    dims, averaged over the batch."""
    if tuple(d1p.shape) != tuple(d2p.shape):
        raise ContractViolation(f"branch shapes differ: {d1p.shape} vs {d2p.shape}")
    diff = T.sub(d1p.mean(axis=1), d2p.mean(axis=1))
    return T.square(diff).sum(axis=1).mean()


def _row_normalize(x: Tensor, eps: float = 1e-8) -> Tensor:
    # eps**2 inside the sqrt keeps the backward finite for all-zero rows
    norms = T.sqrt(T.square(x).sum(axis=1, keepdims=True) + eps * eps) + eps
    return T.div(x, norms)


def _anchor_loss(n1: Tensor, n2: Tensor, tau: float) -> Tensor:
    # rows of n1 are anchors; candidates are all rows of n2
    sim = T.matmul(n1, T.transpose(n2, (1, 0))) * (1.0 / tau)
    eye = Tensor(np.eye(sim.shape[0], dtype=sim.data.dtype))
    pos = T.mul(sim, eye).sum(axis=1)
    denom = T.log(T.exp(sim).sum(axis=1))
    return T.sub(denom, pos).mean()


def local_loss(d1p: Tensor, d2p: Tensor, tau: float = 0.5,
               symmetric: bool = False) -> Tensor:
    """Frame-wise contrastive loss.

    Anchors are branch-1 frames; for each anchor (b,t) the positive is the
    same-position branch-2 frame and the denominator runs over every branch-2
    frame (positive included), with cosine similarity at temperature tau.
    """
    if tuple(d1p.shape) != tuple(d2p.shape):
        raise ContractViolation(f"branch shapes differ: {d1p.shape} vs {d2p.shape}")
    B, F, D = d1p.shape
    n1 = _row_normalize(T.reshape(d1p, (B * F, D)))
    n2 = _row_normalize(T.reshape(d2p, (B * F, D)))
    loss = _anchor_loss(n1, n2, tau)
    if symmetric:
        loss = T.mul(T.add(loss, _anchor_loss(n2, n1, tau)), 0.5)
    return loss


def lgcsiam_loss(d1p: Tensor, d2p: Tensor, tau: float = 0.5,
                 symmetric: bool = False) -> Tensor:
    return T.add(global_loss(d1p, d2p), local_loss(d1p, d2p, tau, symmetric))


def pretrain_loss(lgcsiam, wvc, w: LossWeights):
    return lgcsiam * w.lambda1 + wvc * w.lambda2


def finetune_loss(ce, lgcsiam, wvc, w: LossWeights):
    return ce * w.gamma1 + lgcsiam * w.gamma2 + wvc * w.gamma3
