"""Learnable quality-level prompts and the cosine/softmax score head."""

from __future__ import annotations

import hashlib
from typing import Sequence

import torch
from torch import nn

from .benchmark import QualityDimension
from .encoders import EncoderBackend, encode_pooled

DEFAULT_ADJECTIVES = ("excellent", "good", "fair", "poor", "bad")
DEFAULT_Q = (5.0, 4.0, 3.0, 2.0, 1.0)
INSERTIONS = ("begin", "middle", "end")
FIXED_TEMPLATE = "the quality of this image is"


class LevelBank(nn.Module):
    """Shared learnable context tokens plus the level adjectives and their values.

    With ``learnable=False`` the context is the fixed template sentence instead
    (kept for ablation comparisons only).
    """

    def __init__(self, embed_width: int, adjectives: Sequence[str] = DEFAULT_ADJECTIVES,
                 q: Sequence[float] = DEFAULT_Q, n_context: int = 12, insertion: str = "middle",
                 learnable: bool = True, init_std: float = 0.02, generator: torch.Generator | None = None,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        if len(adjectives) != len(q):
            raise ValueError("need one value per adjective")
        diffs = [b - a for a, b in zip(q, q[1:])]
        if not (all(d > 0 for d in diffs) or all(d < 0 for d in diffs)):
            raise ValueError("level values must be strictly monotone")
        if insertion not in INSERTIONS:
            raise ValueError(f"insertion must be one of {INSERTIONS}")
        if n_context < 1:
            raise ValueError("n_context must be >= 1")
        self.adjectives = tuple(adjectives)
        self.register_buffer("q", torch.tensor(list(q), dtype=dtype))
        self.insertion = insertion
        self.learnable = learnable
        self.n_context = n_context
        init = torch.randn(n_context, embed_width, generator=generator, dtype=torch.float64) * init_std
        self.context = nn.Parameter(init.to(dtype), requires_grad=learnable)
        self._cache: tuple[str, torch.Tensor] | None = None
        self._words: dict[tuple[int, str], torch.Tensor] = {}

    def fixed_words(self, backend: EncoderBackend, text: str) -> torch.Tensor:
        """Frozen word embeddings of ``text`` (memoised per backend)."""
        key = (id(backend), text)
        emb = self._words.get(key)
        if emb is None:
            emb = backend.embed_words(backend.tokenize(text)).to(self.context.dtype)
            self._words[key] = emb
        return emb

    @property
    def n_levels(self) -> int:
        return len(self.adjectives)

    def q_for_range(self, lo: float, hi: float) -> torch.Tensor:
        """Level values remapped linearly so that min(q) -> lo and max(q) -> hi."""
        qmin, qmax = self.q.min(), self.q.max()
        return lo + (self.q - qmin) / (qmax - qmin) * (hi - lo)

    def context_digest(self) -> str:
        return hashlib.sha1(self.context.detach().cpu().numpy().tobytes()).hexdigest()


def build_level_prompts(backend: EncoderBackend, bank: LevelBank,
                        dimension: QualityDimension | str) -> list[torch.Tensor]:
    """One token-embedding sequence per level: start, context/class tokens, end."""
    name = dimension if isinstance(dimension, str) else dimension.display_name
    sot, eot = backend.special_embeddings()
    if bank.learnable:
        ctx = bank.context
    else:
        ctx = bank.fixed_words(backend, FIXED_TEMPLATE)
    k = ctx.shape[0]
    if bank.insertion == "begin" or not bank.learnable:
        before, after = ctx, ctx[:0]
    elif bank.insertion == "end":
        before, after = ctx[:0], ctx
    else:
        split = (k + 1) // 2
        before, after = ctx[:split], ctx[split:]
    sot, eot = sot.to(ctx.dtype), eot.to(ctx.dtype)
    out = []
    for adj in bank.adjectives:
        cls_tokens = bank.fixed_words(backend, f"{adj} {name}")
        seq = [sot, before, cls_tokens, after, eot]
        full = torch.cat(seq, dim=0)
        if full.shape[0] > backend.token_limit:
            raise ValueError(f"level prompt for {name!r} has {full.shape[0]} tokens, "
                             f"backend limit is {backend.token_limit}")
        out.append(full)
    return out


def level_features(backend: EncoderBackend, bank: LevelBank,
                   dimensions: Sequence[QualityDimension | str]) -> torch.Tensor:
    """Level features ``(N_d, N_l, N_f)``.

    Recomputed with a graph while the context is being trained; otherwise served from
    a cache keyed on the context values and the dimension list.
    """
    names = tuple(d if isinstance(d, str) else d.display_name for d in dimensions)
    tracking = torch.is_grad_enabled() and bank.context.requires_grad
    key = None
    if not tracking:
        key = bank.context_digest() + "|" + "|".join(names)
        if bank._cache is not None and bank._cache[0] == key:
            return bank._cache[1]
    seqs = [s for name in names for s in build_level_prompts(backend, bank, name)]
    out = encode_pooled(backend, seqs).reshape(len(names), len(bank.adjectives), -1)
    if not tracking:
        out = out.detach()
        bank._cache = (key, out)
    return out


def score(F_M_d: torch.Tensor, F_L_d: torch.Tensor, q: torch.Tensor,
          inv_temp: float | torch.Tensor = 1.0) -> tuple[torch.Tensor, torch.Tensor]:
    """Score one dimension: softmax(inv_temp * cosine(F_M_d, level rows)) weighted sum of ``q``."""
    if float(inv_temp) <= 0:
        raise ValueError("inv_temp must be > 0")
    m_norm = F_M_d.norm()
    l_norm = F_L_d.norm(dim=-1)
    if m_norm == 0 or (l_norm == 0).any():
        raise ValueError("degenerate feature")
    cos = (F_L_d @ F_M_d) / (l_norm * m_norm)
    prob = torch.softmax(inv_temp * cos, dim=-1)
    return (prob * q).sum(), prob


def score_batch(F_M: torch.Tensor, F_L: torch.Tensor, q: torch.Tensor,
                inv_temp: float | torch.Tensor = 1.0) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched :func:`score`. F_M: (B, N_d, f), F_L: (N_d, N_l, f) -> scores (B, N_d), probs (B, N_d, N_l)."""
    m_norm = F_M.norm(dim=-1, keepdim=True)
    l_norm = F_L.norm(dim=-1)
    if (m_norm == 0).any() or (l_norm == 0).any():
        raise ValueError("degenerate feature")
    cos = torch.einsum("bdf,dlf->bdl", F_M / m_norm, F_L / l_norm[..., None])
    prob = torch.softmax(inv_temp * cos, dim=-1)
    return prob @ q, prob
