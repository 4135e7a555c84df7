"""Stage-1 (pairwise hinge + supervised contrastive regression) and stage-2 (MSE) losses.

MOS tensors use NaN for dimensions that do not apply to a sample; such entries are
dropped from every term.
"""

from __future__ import annotations

from typing import Sequence

import torch


def _pair_index(pairs, device=None) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(pairs, torch.Tensor):
        return pairs[:, 0], pairs[:, 1]
    idx = torch.as_tensor(list(pairs), dtype=torch.long, device=device).reshape(-1, 2)
    return idx[:, 0], idx[:, 1]


def all_pairs(n: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


def rank_loss(pred: torch.Tensor, mos: torch.Tensor, pairs: Sequence[tuple[int, int]] | None = None,
              theta: float = 0.5) -> torch.Tensor:
    """Pairwise ranking hinge loss averaged over the given unordered pairs.

    Per pair: ``sum_d max(0, -sign(S_i - S_j) * (P_i - P_j) + theta) / n_dims`` where
    dimensions with tied MOS are left out of the sum (they would only add the constant
    ``theta``) but still count in ``n_dims``. The printed two-sided normalisation
    2/(N_b(N_b-1)) over ordered pairs equals this mean over unordered pairs times 2.
    """
    if theta < 0:
        raise ValueError("theta must be >= 0")
    if pairs is None:
        pairs = all_pairs(pred.shape[0])
    if len(pairs) == 0:
        return pred.sum() * 0.0
    i, j = _pair_index(pairs, pred.device)
    diff_true = mos[i] - mos[j]
    valid = ~torch.isnan(diff_true)
    sign = torch.sign(torch.nan_to_num(diff_true))
    hinge = torch.relu(-sign * (pred[i] - pred[j]) + theta)
    hinge = torch.where(valid & (sign != 0), hinge, torch.zeros_like(hinge))
    n_dims = valid.sum(dim=1)
    per_pair = hinge.sum(dim=1) / n_dims.clamp_min(1)
    return per_pair.mean()


def cons_loss(fused: torch.Tensor, mos: torch.Tensor, tau: float = 2.0, strict: bool = False) -> torch.Tensor:
    """Supervised contrastive regression loss over the whole mini-batch.

    fused: (B, N_d, f); mos: (B, N_d). For anchor ``i``, positive ``p`` and dimension
    ``d`` the denominator runs over every ``n != i`` whose label distance to the anchor
    is at least that of the positive (``p`` itself included). ``strict=True`` keeps
    only strictly farther samples besides ``p``. Similarity is the negative L2 distance.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    b = fused.shape[0]
    if b < 2:
        raise ValueError("contrastive loss needs >= 2 samples")
    f = fused.transpose(0, 1)  # (N_d, B, f)
    sq = (f[:, :, None, :] - f[:, None, :, :]).pow(2).sum(-1)
    logits = -sq.clamp_min(1e-30).sqrt() / tau  # (N_d, B, B)
    s = mos.T  # (N_d, B)
    present = ~torch.isnan(s)
    label = (s[:, :, None] - s[:, None, :]).abs()  # (N_d, anchor, other)
    eye = torch.eye(b, dtype=torch.bool, device=fused.device)
    # mask[d, i, p, n]: n belongs to the denominator of (anchor i, positive p)
    lab_p = label[:, :, :, None]
    lab_n = label[:, :, None, :]
    farther = lab_n > lab_p if strict else lab_n >= lab_p
    is_pos = eye[None, None, :, :]  # n == p
    # the positive is always in its own denominator, which also keeps masked rows finite
    mask = (farther & ~eye[None, :, None, :] & present[:, None, None, :]) | is_pos
    denom = torch.logsumexp(logits[:, :, None, :].masked_fill(~mask, float("-inf")), dim=-1)
    terms = denom - logits  # -log(exp(l_ip) / sum_n exp(l_in))
    valid = ~eye[None] & present[:, :, None] & present[:, None, :]
    terms = torch.where(valid, terms, torch.zeros_like(terms))
    return terms.sum() / valid.sum().clamp_min(1)


def stage1_loss(pred: torch.Tensor, fused: torch.Tensor, mos: torch.Tensor,
                pairs: Sequence[tuple[int, int]] | None = None, theta: float = 0.5,
                lam: float = 1.0, tau: float = 2.0, strict: bool = False):
    """Returns ``(total, rank_term, cons_term)``."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    r = rank_loss(pred, mos, pairs, theta)
    c = cons_loss(fused, mos, tau, strict)
    return r + lam * c, r, c


def mse_loss(pred: torch.Tensor, mos: torch.Tensor) -> torch.Tensor:
    if pred.shape != mos.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(mos.shape)}")
    if pred.numel() == 0:
        raise ValueError("empty batch")
    valid = ~torch.isnan(mos)
    resid = torch.where(valid, mos - pred, torch.zeros_like(pred))
    return resid.pow(2).sum() / valid.sum().clamp_min(1)
