"""The full scorer: encoders -> dimension-conditioned fusion -> level-similarity scores."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .benchmark import QualityDimension, Sample, load_view
from .encoders import EncoderBackend
from .fusion import DimensionProjector, FusionHead, project_dimensions
from .level_head import DEFAULT_ADJECTIVES, DEFAULT_Q, LevelBank, level_features, score_batch


@dataclass
class ModelOutput:
    scores: torch.Tensor  # (B, N_d)
    probs: torch.Tensor  # (B, N_d, N_l)
    fused: torch.Tensor  # (B, N_d, N_f)


class QualityModel(nn.Module):
    def __init__(self, backend: EncoderBackend, dimensions: Sequence[QualityDimension], *,
                 score_range: tuple[float, float] = (1.0, 5.0), n_context: int = 12,
                 insertion: str = "middle", learnable_levels: bool = True,
                 adjectives: Sequence[str] = DEFAULT_ADJECTIVES, q: Sequence[float] = DEFAULT_Q,
                 fusion_mode: str = "concat", attn_scaled: bool = False,
                 inv_temp: float | None = 10.0, learn_inv_temp: bool = True, seed: int = 0):
        super().__init__()
        self.backend = backend
        self.dimensions = tuple(dimensions)
        dtype = next(backend.parameters()).dtype
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.projector = DimensionProjector(backend.embed_width).to(dtype)
            self.fusion = FusionHead(backend.n_features, mode=fusion_mode, scaled=attn_scaled).to(dtype)
            self.levels = LevelBank(backend.embed_width, adjectives=adjectives, q=q, n_context=n_context,
                                    insertion=insertion, learnable=learnable_levels, dtype=dtype)
        # inv_temp=None reproduces the plain cosine softmax (temperature fixed at 1)
        self.use_inv_temp = inv_temp is not None
        self.log_inv_temp = nn.Parameter(torch.tensor(math.log(inv_temp or 1.0), dtype=dtype),
                                         requires_grad=self.use_inv_temp and learn_inv_temp)
        self.score_range = tuple(float(v) for v in score_range)
        self.register_buffer("q_values", self.levels.q_for_range(*self.score_range))

    @property
    def dim_ids(self) -> list[str]:
        return [d.id for d in self.dimensions]

    @property
    def inv_temp(self) -> torch.Tensor:
        return self.log_inv_temp.exp()

    def dimension_features(self) -> torch.Tensor:
        return project_dimensions(self.backend, [d.display_name for d in self.dimensions], self.projector)

    def level_features(self) -> torch.Tensor:
        return level_features(self.backend, self.levels, self.dimensions)

    def visual_tokens(self, visual_pre: torch.Tensor) -> torch.Tensor:
        b, v = visual_pre.shape[:2]
        tokens = self.backend.visual_encoder(visual_pre.flatten(0, 1))
        return tokens.reshape(b, v * tokens.shape[1], tokens.shape[-1])

    def forward(self, visual_pre: torch.Tensor, prompt_tokens: torch.Tensor,
                prompt_mask: torch.Tensor | None = None) -> ModelOutput:
        F_I = self.visual_tokens(visual_pre)
        fused = self.fusion(F_I, prompt_tokens, self.dimension_features(), prompt_mask)
        scores, probs = score_batch(fused, self.level_features(), self.q_values, self.inv_temp)
        return ModelOutput(scores, probs, fused)

    def level_parameters(self) -> list[nn.Parameter]:
        return [self.levels.context]


class FeatureStore:
    """Caches decoded/preprocessed views and (frozen) prompt token features per sample."""

    def __init__(self, backend: EncoderBackend):
        self.backend = backend
        self._visual: dict[str, torch.Tensor] = {}
        self._prompt: dict[str, torch.Tensor] = {}

    def visual(self, sample: Sample) -> torch.Tensor:
        t = self._visual.get(sample.sample_id)
        if t is None:
            size = self.backend.input_resolution
            views = np.stack([load_view(p, size) for p in sample.view_paths])
            with torch.no_grad():
                t = self.backend.preprocess(views)
            self._visual[sample.sample_id] = t
        return t

    def prompt(self, text: str) -> torch.Tensor:
        t = self._prompt.get(text)
        if t is None:
            with torch.no_grad():
                t = self.backend.text_encoder(self.backend.token_embedder(text))
            self._prompt[text] = t
        return t

    def batch(self, samples: Sequence[Sample]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        visual = torch.stack([self.visual(s) for s in samples])
        prompts = [self.prompt(s.prompt_text) for s in samples]
        n = max(p.shape[0] for p in prompts)
        width = prompts[0].shape[-1]
        padded = prompts[0].new_zeros(len(prompts), n, width)
        mask = torch.zeros(len(prompts), n, dtype=torch.bool)
        for i, p in enumerate(prompts):
            padded[i, : p.shape[0]] = p
            mask[i, : p.shape[0]] = True
        return visual, padded, mask


def predict(model: QualityModel, store: FeatureStore, samples: Sequence[Sample],
            batch_size: int = 64) -> np.ndarray:
    """Scores ``(n_samples, N_d)`` without gradient tracking."""
    out = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            out.append(model(*store.batch(chunk)).scores.cpu().numpy())
    if not out:
        return np.zeros((0, len(model.dimensions)))
    return np.concatenate(out).astype(np.float64)


def fused_features(model: QualityModel, store: FeatureStore, sample: Sample) -> torch.Tensor:
    """Fused per-dimension features ``(N_d, N_f)`` of one sample."""
    with torch.no_grad():
        return model(*store.batch([sample])).fused[0]
