"""Easy-to-hard batch construction for stage-1 training.

Three independent schedules, all updated once per epoch:

* prompt count ``n_p``: batches start with a single prompt; whenever the mean
  training SRCC stalls (|s_t - s_{t-1}| < epsilon) one more prompt is admitted.
* score gap ``eta``: only pairs whose overall-quality MOS gap exceeds ``eta`` are
  ranked; when the restricted KRCC stalls, ``eta`` drops by one (floor 0).
* dimension consistency ``rho``: only pairs whose per-dimension orderings agree at
  least ``rho`` are ranked; ``rho`` follows a linear schedule over the epochs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .metrics import pair_krcc, srcc

log = logging.getLogger(__name__)

RHO_MODES = ("mirrored", "verbatim")


class NoEligiblePairs(ValueError):
    pass


@dataclass(frozen=True)
class CurriculumState:
    epoch: int = 0
    horizon: int = 1
    n_p: int = 1
    eta: float = 2.5
    rho: float = 1.0
    srcc_history: tuple[float, ...] = ()
    krcc_history: tuple[float, ...] = ()
    epsilon: float = 1e-2
    prompt_count: bool = True
    score_gap: bool = True
    dim_consistency: bool = True
    rho_mode: str = "mirrored"

    def trace_record(self) -> dict:
        return {"t": self.epoch, "n_p": self.n_p, "eta": self.eta, "rho": self.rho,
                "s_t": self.srcc_history[-1] if self.srcc_history else None,
                "k_t": self.krcc_history[-1] if self.krcc_history else None}


def initial_state(horizon: int, score_max: float = 5.0, epsilon: float = 1e-2, prompt_count: bool = True,
                  score_gap: bool = True, dim_consistency: bool = True,
                  rho_mode: str = "mirrored") -> CurriculumState:
    """Start of a run: one prompt per batch, eta at half the maximum MOS, rho at its easy end."""
    if rho_mode not in RHO_MODES:
        raise ValueError(f"rho_mode must be one of {RHO_MODES}")
    return CurriculumState(epoch=0, horizon=horizon, n_p=1, eta=score_max / 2.0,
                           rho=consistency_threshold(0, horizon, rho_mode), epsilon=epsilon,
                           prompt_count=prompt_count, score_gap=score_gap,
                           dim_consistency=dim_consistency, rho_mode=rho_mode)


def monitor_srcc(pred: np.ndarray, mos: np.ndarray) -> float:
    """Mean over dimensions of SRCC(prediction, MOS); undefined dimensions count as 0."""
    pred, mos = np.atleast_2d(pred), np.atleast_2d(mos)
    if pred.shape[0] < 3:
        raise ValueError("monitoring needs at least 3 samples")
    values = []
    for d in range(pred.shape[1]):
        ok = ~np.isnan(mos[:, d])
        r = srcc(pred[ok, d], mos[ok, d]) if ok.sum() >= 2 else float("nan")
        if np.isnan(r):
            log.info("SRCC undefined for dimension %d (constant input); counted as 0", d)
            r = 0.0
        values.append(r)
    return float(np.mean(values))


def overall_gap(mos: np.ndarray, gap_column: int | None) -> np.ndarray:
    """Pairwise |S_i - S_j| of the overall score (one column, or the row mean)."""
    if gap_column is not None:
        v = mos[:, gap_column]
    else:
        v = np.nanmean(mos, axis=1)
    return np.abs(v[:, None] - v[None, :])


def monitor_krcc(pred: np.ndarray, mos: np.ndarray, eta: float, gap_column: int | None = None) -> float:
    """Mean over dimensions of Kendall tau-b restricted to pairs with overall gap > eta."""
    pred, mos = np.atleast_2d(pred), np.atleast_2d(mos)
    eligible = overall_gap(mos, gap_column) > eta
    if not np.triu(eligible, k=1).any():
        raise NoEligiblePairs(f"no pair has an overall MOS gap above {eta}")
    values = []
    for d in range(pred.shape[1]):
        ok = ~np.isnan(mos[:, d])
        k = pair_krcc(pred[ok, d], mos[ok, d], eligible[np.ix_(ok, ok)])
        values.append(0.0 if np.isnan(k) else k)
    return float(np.mean(values))


def _stalled(history: Sequence[float], value: float, epsilon: float) -> bool:
    return bool(history) and abs(value - history[-1]) < epsilon


def update_prompt_count(state: CurriculumState, s_t: float, batch_size: int) -> CurriculumState:
    n_p = state.n_p
    if _stalled(state.srcc_history, s_t, state.epsilon):
        n_p = min(n_p + 1, batch_size)
    return replace(state, n_p=n_p, srcc_history=state.srcc_history + (s_t,))


def update_score_threshold(state: CurriculumState, k_t: float | None) -> CurriculumState:
    """``k_t=None`` means the current threshold admits no pair: lower it unconditionally."""
    if k_t is None:
        return replace(state, eta=max(state.eta - 1.0, 0.0))
    eta = state.eta
    if _stalled(state.krcc_history, k_t, state.epsilon):
        eta = max(eta - 1.0, 0.0)
    return replace(state, eta=eta, krcc_history=state.krcc_history + (k_t,))


def prompt_quota(batch_size: int, n_p: int) -> list[int]:
    """Samples per prompt: the first ``batch_size mod n_p`` prompts get one extra."""
    if not 1 <= n_p <= batch_size:
        raise ValueError(f"need 1 <= n_p <= batch size, got n_p={n_p}, batch size={batch_size}")
    base, extra = divmod(batch_size, n_p)
    return [base + 1 if p < extra else base for p in range(n_p)]


def consistency(mos_i, mos_j) -> float:
    """|sum_d sign(S_i - S_j)| / sum_d |sign(S_i - S_j)|; identical vectors give 1."""
    diff = np.asarray(mos_i, dtype=np.float64) - np.asarray(mos_j, dtype=np.float64)
    phi = np.sign(diff[~np.isnan(diff)])
    total = np.abs(phi).sum()
    if total == 0:
        return 1.0
    return float(abs(phi.sum()) / total)


def consistency_matrix(mos: np.ndarray) -> np.ndarray:
    diff = mos[:, None, :] - mos[None, :, :]
    phi = np.nan_to_num(np.sign(diff))
    total = np.abs(phi).sum(-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.abs(phi.sum(-1)) / total
    return np.where(total == 0, 1.0, c)


def consistency_threshold(t: int, horizon: int, mode: str = "mirrored") -> float:
    """Linear schedule between 0.5 and 1.0.

    ``verbatim`` rises 0.5 -> 1.0 over the run; ``mirrored`` (default) falls
    1.0 -> 0.5 so the admitted pool grows from fully consistent pairs outward.
    """
    if mode not in RHO_MODES:
        raise ValueError(f"rho_mode must be one of {RHO_MODES}")
    frac = 1.0 if horizon <= 0 else min(max(t / horizon, 0.0), 1.0)
    return 0.5 + 0.5 * frac if mode == "verbatim" else 1.0 - 0.5 * frac


@dataclass
class PairBatch:
    indices: list[int]
    mos: np.ndarray
    prompt_ids: list[str]
    eligible_pairs: list[tuple[int, int]]
    score_gap: dict[tuple[int, int], float] = field(default_factory=dict)
    consistency: dict[tuple[int, int], float] = field(default_factory=dict)
    same_prompt: dict[tuple[int, int], bool] = field(default_factory=dict)


def sample_batch(prompt_ids: Sequence[str], mos: np.ndarray, state: CurriculumState, batch_size: int,
                 rng: np.random.Generator, gap_column: int | None = None) -> PairBatch:
    """Draw one batch of sample indices and its eligible pair set.

    ``prompt_ids[i]`` and ``mos[i]`` describe sample ``i`` of the training pool.
    """
    groups: dict[str, list[int]] = {}
    for i, p in enumerate(prompt_ids):
        groups.setdefault(p, []).append(i)
    n_p = state.n_p if state.prompt_count else 1
    quotas = prompt_quota(batch_size, n_p)
    names = list(groups)
    order = rng.permutation(len(names))
    chosen: list[int] = []
    q_iter = iter(quotas)
    need = next(q_iter)
    for k in order:
        members = groups[names[k]]
        if len(members) < need:
            continue
        chosen.extend(int(m) for m in rng.choice(members, size=need, replace=False))
        need = next(q_iter, None)
        if need is None:
            break
    if need is not None:
        big = sum(1 for m in groups.values() if len(m) >= max(quotas))
        raise ValueError(f"cannot fill quotas {quotas}: only {big} prompt(s) have >= {max(quotas)} "
                         f"samples (batch size {batch_size}, n_p={n_p})")

    sub = mos[chosen]
    gaps = overall_gap(sub, gap_column)
    cons = consistency_matrix(sub)
    batch = PairBatch(indices=chosen, mos=sub, prompt_ids=[prompt_ids[i] for i in chosen], eligible_pairs=[])
    candidates = []
    for a in range(len(chosen)):
        for b in range(a + 1, len(chosen)):
            key = (a, b)
            batch.score_gap[key] = float(gaps[a, b])
            batch.consistency[key] = float(cons[a, b])
            batch.same_prompt[key] = batch.prompt_ids[a] == batch.prompt_ids[b]
            candidates.append(key)
    eligible = [k for k in candidates
                if (not state.score_gap or batch.score_gap[k] > state.eta)
                and (not state.dim_consistency or batch.consistency[k] >= state.rho)]
    if not eligible and candidates and (state.score_gap or state.dim_consistency):
        eligible = [max(candidates, key=lambda k: (batch.score_gap[k], batch.consistency[k]))]
    batch.eligible_pairs = eligible
    return batch
