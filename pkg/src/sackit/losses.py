"""Binary cross-entropy, Dice and their hybrid combinations.

Loss functions take probabilities ``p`` and a binary target ``g``. Given
torch tensors they return a differentiable 0-d tensor; given arrays they
return a Python float.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .errors import ConfigurationError, DegenerateInputError, ShapeError

LOSS_KINDS = ("bce", "dice", "convex_hybrid", "weighted_hybrid")
REDUCTIONS = ("sum", "mean")
CLAMP_EPS = 1e-7
DICE_SMOOTH = 1e-6


def _pair(p, g):
    as_float = not (isinstance(p, torch.Tensor) or isinstance(g, torch.Tensor))
    if not isinstance(p, torch.Tensor):
        p = torch.as_tensor(np.asarray(p, dtype=np.float64))
    if not isinstance(g, torch.Tensor):
        g = torch.as_tensor(np.asarray(g, dtype=np.float64))
    if p.shape != g.shape:
        raise ShapeError(f"prediction {tuple(p.shape)} and target {tuple(g.shape)} differ")
    return p, g.to(p.dtype), as_float


def _out(value, as_float):
    return float(value) if as_float else value


def bce_loss(p, g, reduction: str = "mean", eps: float = CLAMP_EPS):
    """``-sum(g log p + (1 - g) log(1 - p))``, divided by N for ``mean``.

    ``p`` is clamped to ``[eps, 1 - eps]`` before the logarithms.
    """
    if reduction not in REDUCTIONS:
        raise ConfigurationError(f"reduction must be one of {REDUCTIONS}")
    p, g, as_float = _pair(p, g)
    p = p.clamp(eps, 1 - eps)
    total = -(g * torch.log(p) + (1 - g) * torch.log(1 - p)).sum()
    if reduction == "mean":
        total = total / max(p.numel(), 1)
    return _out(total, as_float)


def dice_loss(p, g, smooth: float = DICE_SMOOTH):
    """``1 - (2 sum(p g) + smooth) / (sum(p^2) + sum(g^2) + smooth)``.

    Sums run over every element given, so a batch is scored as one volume.
    """
    if smooth < 0:
        raise ConfigurationError("smooth must be non-negative")
    p, g, as_float = _pair(p, g)
    inter = (p * g).sum()
    denom = (p * p).sum() + (g * g).sum()
    if smooth == 0 and float(denom) == 0.0:
        raise DegenerateInputError("Dice is undefined when prediction and target are both empty")
    return _out(1 - (2 * inter + smooth) / (denom + smooth), as_float)


@dataclass(frozen=True)
class LossForm:
    kind: str
    lam: Optional[float] = None
    reduction: str = "mean"
    smooth: float = DICE_SMOOTH

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigurationError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if self.reduction not in REDUCTIONS:
            raise ConfigurationError(f"reduction must be one of {REDUCTIONS}")
        if self.smooth < 0:
            raise ConfigurationError("smooth must be non-negative")
        if self.kind == "convex_hybrid":
            if self.lam is None or not 0.0 <= self.lam <= 1.0:
                raise ConfigurationError(f"convex_hybrid needs lambda in [0, 1], got {self.lam}")
        elif self.kind == "weighted_hybrid":
            if self.lam is None or not (0.0 < self.lam < math.inf):
                raise ConfigurationError(f"weighted_hybrid needs lambda > 0, got {self.lam}")
        elif self.lam is not None:
            raise ConfigurationError(f"{self.kind} takes no lambda")

    def label(self) -> str:
        if self.kind == "convex_hybrid":
            return f"{self.lam:g}*BCE+{1 - self.lam:g}*Dice"
        if self.kind == "weighted_hybrid":
            return f"BCE+{self.lam:g}*Dice"
        return self.kind

    def to_dict(self) -> dict:
        return {"kind": self.kind, "lambda": self.lam, "reduction": self.reduction, "smooth": self.smooth}

    @classmethod
    def from_dict(cls, d: dict) -> "LossForm":
        return cls(
            d["kind"],
            d.get("lambda", d.get("lam")),
            d.get("reduction", "mean"),
            d.get("smooth", DICE_SMOOTH),
        )


def hybrid_loss(form: LossForm, p, g):
    if form.kind == "bce":
        return bce_loss(p, g, form.reduction)
    if form.kind == "dice":
        return dice_loss(p, g, form.smooth)
    bce = bce_loss(p, g, form.reduction)
    dice = dice_loss(p, g, form.smooth)
    if form.kind == "convex_hybrid":
        return form.lam * bce + (1 - form.lam) * dice
    return bce + form.lam * dice


# Closed-form gradients with respect to p; used to cross-check autograd and
# finite differences. Inputs must lie inside the clamp range.


def bce_grad(p, g, reduction: str = "mean") -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    grad = -(g / p - (1 - g) / (1 - p))
    return grad / p.size if reduction == "mean" else grad


def dice_grad(p, g, smooth: float = DICE_SMOOTH) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    num = 2 * (p * g).sum() + smooth
    den = (p * p).sum() + (g * g).sum() + smooth
    return -(2 * g * den - num * 2 * p) / den**2
