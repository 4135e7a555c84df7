"""Dimension-conditioned fusion of visual and prompt tokens.

For each quality dimension ``d`` with feature ``f_d``::

    W_I = softmax_over_patches( F_I @ F_P.T @ F_P @ f_d )
    W_P = softmax_over_prompt_tokens( F_P @ f_d )
    fused_d = MLP( (W_I @ F_I) (+) (W_P @ F_P) )

Single-sample helpers (:func:`attention_weights`, :func:`fuse`) mirror the batched
path in :meth:`FusionHead.forward`, which is what training uses.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
from torch import nn

from .encoders import EncoderBackend, encode_pooled

FUSION_MODES = ("concat", "add", "multiply")


class DimensionProjector(nn.Module):
    """Two-layer MLP applied to the token embeddings of each dimension name.

    Residual form ``x + W2 relu(W1 x)``; with ``identity_init`` the second layer
    starts at zero, so the initial output is the plain text encoding.
    """

    def __init__(self, width: int, hidden: int | None = None, identity_init: bool = True):
        super().__init__()
        hidden = hidden or width
        self.fc1 = nn.Linear(width, hidden)
        self.fc2 = nn.Linear(hidden, width)
        if identity_init:
            nn.init.zeros_(self.fc2.weight)
            nn.init.zeros_(self.fc2.bias)

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        return emb + self.fc2(torch.relu(self.fc1(emb)))


def project_dimensions(backend: EncoderBackend, dimension_texts: Sequence[str],
                       projector: DimensionProjector | None) -> torch.Tensor:
    """Dimension features ``(N_d, N_f)``: pooled text encoding of the projected embeddings."""
    seqs = []
    for text in dimension_texts:
        emb = backend.token_embedder(text)
        if projector is not None:
            emb = projector(emb.to(projector.fc1.weight.dtype))
        seqs.append(emb)
    return encode_pooled(backend, seqs)


def attention_weights(F_I: torch.Tensor, F_P: torch.Tensor, f_d: torch.Tensor,
                      scaled: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """Visual weights over ``F_I`` rows and prompt weights over ``F_P`` rows for one dimension."""
    if not F_I.shape[-1] == F_P.shape[-1] == f_d.shape[-1]:
        raise ValueError("feature widths differ")
    prompt_logits = F_P @ f_d
    visual_logits = F_I @ (F_P.T @ prompt_logits)
    if scaled:
        visual_logits = visual_logits / math.sqrt(F_I.shape[-1])
        prompt_logits = prompt_logits / math.sqrt(F_I.shape[-1])
    return torch.softmax(visual_logits, dim=0), torch.softmax(prompt_logits, dim=0)


def aggregate(a: torch.Tensor, b: torch.Tensor, mode: str) -> torch.Tensor:
    if mode == "concat":
        return torch.cat([a, b], dim=-1)
    assert a.shape == b.shape, "add/multiply need equal widths"
    if mode == "add":
        return a + b
    if mode == "multiply":
        return a * b
    raise ValueError(f"unknown fusion mode {mode!r}")


class FusionHead(nn.Module):
    """Attention pooling plus the fusion MLP (two layers, hidden width ``2 N_f``)."""

    def __init__(self, n_features: int, mode: str = "concat", scaled: bool = False):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ValueError(f"mode must be one of {FUSION_MODES}")
        self.mode = mode
        self.scaled = scaled
        in_width = 2 * n_features if mode == "concat" else n_features
        self.fc1 = nn.Linear(in_width, 2 * n_features)
        self.fc2 = nn.Linear(2 * n_features, n_features)

    def mlp(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.relu(self.fc1(x)))

    def forward(self, F_I: torch.Tensor, F_P: torch.Tensor, F_D: torch.Tensor,
                prompt_mask: torch.Tensor | None = None, return_weights: bool = False):
        """Batched fusion.

        F_I: (B, n_v, f) visual tokens; F_P: (B, n_p, f) prompt tokens, zero-padded;
        prompt_mask: (B, n_p) bool, True on real tokens; F_D: (N_d, f).
        Returns fused features (B, N_d, f).
        """
        prompt_logits = F_P @ F_D.T  # (B, n_p, N_d)
        visual_logits = F_I @ (F_P.transpose(1, 2) @ prompt_logits)  # (B, n_v, N_d)
        if self.scaled:
            s = math.sqrt(F_I.shape[-1])
            prompt_logits, visual_logits = prompt_logits / s, visual_logits / s
        if prompt_mask is not None:
            prompt_logits = prompt_logits.masked_fill(~prompt_mask[..., None], float("-inf"))
        W_I = torch.softmax(visual_logits, dim=1)
        W_P = torch.softmax(prompt_logits, dim=1)
        pooled_I = W_I.transpose(1, 2) @ F_I  # (B, N_d, f)
        pooled_P = W_P.transpose(1, 2) @ F_P
        fused = self.mlp(aggregate(pooled_I, pooled_P, self.mode))
        if return_weights:
            return fused, W_I, W_P
        return fused


def fuse(F_I: torch.Tensor, F_P: torch.Tensor, W_I: torch.Tensor, W_P: torch.Tensor,
         head: FusionHead) -> torch.Tensor:
    """Single-dimension fusion given precomputed weights: ``MLP(agg(W_I F_I, W_P F_P))``."""
    return head.mlp(aggregate(W_I @ F_I, W_P @ F_P, head.mode))
