"""Attention regularizers: expansion penalty, global size constraint with
L2 or extended log-barrier handling, and the pixel-softmax entropy proxy.

Every term is written with torch ops so it can sit inside a training graph,
and each has a closed-form gradient (``*_grad``) with respect to the
attention values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import DomainError, UsageError

KINDS = ("none", "l2_pixel", "l2_image", "logbarrier", "entropy")
SIZE_KINDS = ("l2_pixel", "l2_image", "logbarrier")
T_SCHEDULES = ("fixed", "geometric_1p01")


@dataclass
class ConstraintSpec:
    kind: str = "none"
    lambda_s: float = 0.0
    lambda_h: float = 0.0
    t: float = 10.0
    t_schedule: str = "fixed"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UsageError(f"unknown constraint kind {self.kind!r}; expected one of {KINDS}")
        if self.t_schedule not in T_SCHEDULES:
            raise UsageError(f"unknown t schedule {self.t_schedule!r}")
        if self.lambda_s < 0 or self.lambda_h < 0:
            raise UsageError("constraint weights must be nonnegative")
        if self.kind == "logbarrier" and not self.t > 0:
            raise UsageError("log-barrier needs t > 0")

    def t_eff(self, epoch: int) -> float:
        if self.t_schedule == "geometric_1p01":
            return 1.0 * 1.01 ** epoch
        return float(self.t)


def _as_tensor(a):
    if isinstance(a, torch.Tensor):
        return a
    return torch.as_tensor(a, dtype=torch.float64)


def _check_unit(a):
    if torch.any(a < 0) or torch.any(a > 1):
        raise DomainError("attention values must lie in [0, 1]")


def _domain(a, mask):
    if mask is None:
        return torch.ones_like(a, dtype=torch.bool)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if mask.shape != a.shape:
        mask = mask.expand_as(a)
    return mask


def size_constraint(a, mask=None):
    """f_c(a) = 1 - mean(a) over the domain (all pixels, or ``mask`` pixels).

    Works on a single map or a batch; for a batch (leading dim), returns one
    value per map.
    """
    a = _as_tensor(a)
    _check_unit(a)
    m = _domain(a, mask).to(a.dtype)
    dims = tuple(range(a.dim() - 2, a.dim())) if a.dim() >= 2 else tuple(range(a.dim()))
    n = m.sum(dim=dims)
    if torch.any(n == 0):
        raise DomainError("empty constraint domain")
    return 1.0 - (a * m).sum(dim=dims) / n


def size_constraint_grad(a, mask=None):
    a = _as_tensor(a)
    m = _domain(a, mask).to(a.dtype)
    dims = tuple(range(a.dim() - 2, a.dim()))
    n = m.sum(dim=dims, keepdim=True)
    return -m / n


def expansion_loss_pixel(a):
    """Per-pixel expansion loss (1/|a|) * sum(1 - a_l).

    Numerically identical to :func:`size_constraint`; kept separate because
    the pixel mode squares nothing and pushes every pixel independently.
    """
    return size_constraint(a)


def expansion_loss_pixel_grad(a):
    return size_constraint_grad(a)


def _check_t(t):
    if not t > 0:
        raise DomainError(f"log-barrier parameter must be positive, got {t}")


def log_barrier_ext(z, t: float):
    """Extended log-barrier: -log(-z)/t below z = -1/t**2, linear above."""
    _check_t(t)
    z = _as_tensor(z)
    thr = -1.0 / t ** 2
    inner = -torch.log(torch.clamp(-z, min=1.0 / t ** 2)) / t
    outer = t * z - math.log(1.0 / t ** 2) / t + 1.0 / t
    return torch.where(z <= thr, inner, outer)


def log_barrier_ext_grad(z, t: float):
    _check_t(t)
    z = _as_tensor(z)
    thr = -1.0 / t ** 2
    inner = -1.0 / (t * torch.clamp(z, max=thr))
    return torch.where(z <= thr, inner, torch.full_like(z, float(t)))


def _check_kind(spec, allowed):
    if spec.kind not in allowed:
        raise UsageError(f"constraint kind {spec.kind!r} not valid here; expected one of {allowed}")


def _stack(batch):
    if isinstance(batch, torch.Tensor):
        return batch
    return torch.stack([_as_tensor(a) for a in batch])


def size_term(a_batch, spec: ConstraintSpec, epoch: int = 0):
    """Size regularizer averaged over the batch, weighted by ``lambda_s``."""
    _check_kind(spec, SIZE_KINDS)
    a = _stack(a_batch)
    fc = size_constraint(a)
    if spec.kind == "l2_pixel":
        per = fc
    elif spec.kind == "l2_image":
        per = torch.clamp(fc, min=0.0) ** 2
    else:
        per = log_barrier_ext(fc, spec.t_eff(epoch))
    return spec.lambda_s * per.mean()


def size_term_grad(a_batch, spec: ConstraintSpec, epoch: int = 0):
    _check_kind(spec, SIZE_KINDS)
    a = _stack(a_batch)
    n = a.shape[0]
    fc = size_constraint(a)
    if spec.kind == "l2_pixel":
        outer = torch.ones_like(fc)
    elif spec.kind == "l2_image":
        outer = 2.0 * torch.clamp(fc, min=0.0)
    else:
        outer = log_barrier_ext_grad(fc, spec.t_eff(epoch))
    inner = size_constraint_grad(a)
    return spec.lambda_s / n * outer[:, None, None] * inner


def _brain(brain, like):
    b = torch.as_tensor(brain, dtype=torch.bool)
    if b.shape != like.shape:
        b = b.expand_as(like)
    dims = (-2, -1)
    if torch.any(b.sum(dim=dims) == 0):
        raise DomainError("brain mask is empty")
    return b


def log_pixel_softmax(a_raw, brain):
    """Log of the softmax over brain pixels; -inf outside the brain."""
    a = _as_tensor(a_raw)
    b = _brain(brain, a)
    shape = a.shape
    flat = a.reshape(*shape[:-2], -1)
    bflat = b.reshape(*shape[:-2], -1)
    masked = flat.masked_fill(~bflat, float("-inf"))
    return torch.log_softmax(masked, dim=-1).reshape(shape)


def pixel_softmax(a_raw, brain):
    """Softmax of ``a_raw`` over brain pixels, zero elsewhere."""
    return torch.exp(log_pixel_softmax(a_raw, brain))


def shannon_entropy(p, brain):
    """H(p) = -(1/I) sum p log p over the I brain pixels, with 0 log 0 = 0."""
    p = _as_tensor(p)
    if torch.any(p < 0):
        raise DomainError("probabilities must be nonnegative")
    b = _brain(brain, p)
    plogp = torch.where(p > 0, p * torch.log(torch.where(p > 0, p, torch.ones_like(p))), torch.zeros_like(p))
    plogp = plogp * b.to(p.dtype)
    i = b.sum(dim=(-2, -1)).to(p.dtype)
    return -plogp.sum(dim=(-2, -1)) / i


def entropy_from_logits(a_raw, brain):
    """Scaled entropy of ``pixel_softmax(a_raw)`` computed from log-probabilities."""
    a = _as_tensor(a_raw)
    b = _brain(brain, a)
    logp = log_pixel_softmax(a, b)
    p = torch.exp(logp)
    plogp = torch.where(b, p * torch.where(b, logp, torch.zeros_like(logp)), torch.zeros_like(logp))
    i = b.sum(dim=(-2, -1)).to(a.dtype)
    return -plogp.sum(dim=(-2, -1)) / i


def entropy_term(a_raw_batch, brain_batch, spec: ConstraintSpec):
    """-lambda_h * mean_n H(softmax_brain(a_n)); minimizing it maximizes entropy."""
    _check_kind(spec, ("entropy",))
    a = _stack(a_raw_batch)
    if spec.lambda_h == 0:
        return torch.zeros((), dtype=a.dtype)
    h = entropy_from_logits(a, brain_batch)
    return -spec.lambda_h * h.mean()


def entropy_term_grad(a_raw_batch, brain_batch, spec: ConstraintSpec):
    _check_kind(spec, ("entropy",))
    a = _stack(a_raw_batch)
    b = _brain(brain_batch, a)
    n = a.shape[0]
    logp = log_pixel_softmax(a, b)
    p = torch.exp(logp)
    i = b.sum(dim=(-2, -1), keepdim=True).to(a.dtype)
    safe_logp = torch.where(b, logp, torch.zeros_like(logp))
    h_raw = -(p * safe_logp).sum(dim=(-2, -1), keepdim=True)
    g = p * (safe_logp + h_raw) / i
    return spec.lambda_h / n * torch.where(b, g, torch.zeros_like(g))
