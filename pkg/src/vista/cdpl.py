"""Disagreement-gated pseudo-labeling and consistency losses.

All functions take torch tensors (numpy arrays are converted) shaped
``(C, H, W, D)`` or with a leading batch axis. Teacher quantities are always
detached before they enter a loss.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .config import VistaConfig
from .errors import ShapeError

PROB_EPS = 1e-7


@dataclass(frozen=True)
class GateReport:
    variance_open_fraction: float
    confidence_open_fraction: float
    joint_open_fraction: float
    positive_label_fraction: float

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


def _tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x)


def disagreement_variance(probs: Sequence) -> torch.Tensor:
    """Population variance across views, per voxel and channel."""
    tensors = [_tensor(p) for p in probs]
    if len(tensors) < 2:
        raise ShapeError("need at least two views")
    shape = tensors[0].shape
    if any(t.shape != shape for t in tensors):
        raise ShapeError(f"view shapes differ: {[tuple(t.shape) for t in tensors]}")
    stacked = torch.stack([t.detach() for t in tensors])
    return stacked.var(dim=0, unbiased=False)


def gates(teacher_prob0, V, cfg: VistaConfig) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Return boolean (variance gate, confidence gate, hard pseudo-label)."""
    p = _tensor(teacher_prob0).detach()
    V = _tensor(V).detach()
    if cfg.use_var_gate:
        var_gate = V <= cfg.tau_var
    else:
        var_gate = torch.ones_like(p, dtype=torch.bool)
    positive = p >= cfg.tau_pos
    conf_gate = positive | (p <= cfg.tau_neg)
    return var_gate, conf_gate, positive


def pseudo_label_loss(student_logits0: torch.Tensor, teacher_prob0, V, cfg: VistaConfig) -> tuple[torch.Tensor, GateReport]:
    """Hard-label BCE on entries that pass both the variance and the confidence gate.

    With ``cfg.pl_reduction == "mean"`` the sum is divided by the number of open
    entries (at least 1), otherwise the raw sum is returned.
    """
    z = _tensor(student_logits0)
    p = _tensor(teacher_prob0)
    V = _tensor(V)
    if z.shape != p.shape or V.shape != p.shape:
        raise ShapeError(f"shape mismatch: logits {tuple(z.shape)}, teacher {tuple(p.shape)}, variance {tuple(V.shape)}")
    var_gate, conf_gate, positive = gates(p, V, cfg)
    joint = var_gate & conf_gate
    target = positive.to(z.dtype)
    bce = F.binary_cross_entropy_with_logits(z, target, reduction="none")
    gated = torch.where(joint, bce, torch.zeros_like(bce)).sum()
    n_open = int(joint.sum())
    loss = gated / max(n_open, 1) if cfg.pl_reduction == "mean" else gated
    report = GateReport(
        variance_open_fraction=var_gate.float().mean().item(),
        confidence_open_fraction=conf_gate.float().mean().item(),
        joint_open_fraction=joint.float().mean().item(),
        positive_label_fraction=(positive & joint).sum().item() / n_open if n_open else 0.0,
    )
    return loss, report


def soft_bce(student_logits: torch.Tensor, target_prob: torch.Tensor, eps: float = PROB_EPS) -> torch.Tensor:
    """Element-wise BCE of sigmoid(logits) against a soft target, probabilities clamped to [eps, 1-eps]."""
    q = torch.sigmoid(student_logits).clamp(eps, 1.0 - eps)
    return -(target_prob * torch.log(q) + (1.0 - target_prob) * torch.log(1.0 - q))


def consistency_loss(student_logits: Sequence[torch.Tensor], teacher_prob0) -> torch.Tensor:
    """Mean soft BCE of each perturbed-view prediction against the detached anchor, averaged over views."""
    p = _tensor(teacher_prob0).detach()
    if len(student_logits) == 0:
        raise ShapeError("need at least one perturbed view")
    terms = []
    for z in student_logits:
        z = _tensor(z)
        if z.shape != p.shape:
            raise ShapeError(f"logits shape {tuple(z.shape)} != teacher shape {tuple(p.shape)}")
        terms.append(soft_bce(z, p.to(z.dtype)).mean())
    return torch.stack(terms).mean()


def total_loss(l_pl, l_cons, lam: float):
    return l_pl + lam * l_cons


def binary_entropy_loss(logits: torch.Tensor, eps: float = PROB_EPS) -> torch.Tensor:
    """Mean channel-wise binary entropy of sigmoid(logits); the Tent-style objective."""
    q = torch.sigmoid(logits).clamp(eps, 1.0 - eps)
    return -(q * torch.log(q) + (1.0 - q) * torch.log(1.0 - q)).mean()
