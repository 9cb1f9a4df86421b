"""Comment quality scoring: pooled representations, cosine, circle loss."""

from __future__ import annotations

import torch

from . import nncore as F
from .transformer import EvaluatorHead


def pool_and_project(hidden: torch.Tensor, mask: torch.Tensor, head: EvaluatorHead) -> torch.Tensor:
    """Mean over non-pad rows of ``hidden`` [..., L, d], then the FFN head."""
    counts = mask.sum(dim=-1)
    if bool((counts == 0).any()):
        raise ValueError("pool_and_project: input has no non-pad positions")
    return head(F.masked_mean(hidden, mask, axis=-2))


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity along the last axis; zero vectors are rejected."""
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ValueError("cosine similarity of a zero vector is undefined")
    return (a * b).sum(dim=-1) / (na * nb)


def quality_score(v_code: torch.Tensor, v_comment: torch.Tensor) -> float:
    return float(cosine(v_code.detach(), v_comment.detach()))


def softplus(x: torch.Tensor) -> torch.Tensor:
    # log(1 + e^x) without overflow for large x
    return torch.clamp(x, min=0.0) + torch.log1p(torch.exp(-torch.abs(x)))


def circle_loss(
    v_code: torch.Tensor, v_generated: torch.Tensor, v_ground_truth: torch.Tensor, lam: float
) -> torch.Tensor:
    """log(1 + exp(lam * (cos(code, generated) - cos(code, truth)))).

    Batched inputs [B, d] give one loss per row.
    """
    if lam <= 0:
        raise ValueError("lambda must be > 0")
    gap = cosine(v_code, v_generated) - cosine(v_code, v_ground_truth)
    return softplus(lam * gap)
