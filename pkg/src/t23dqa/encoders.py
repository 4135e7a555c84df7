"""Visual / textual encoder backends.

Every backend exposes the same surface:

* ``tokenize(text)`` -> word pieces, and ``embed_words(words)`` -> token embeddings
  (no special tokens). ``token_embedder(text)`` wraps both and adds start/end tokens.
* ``text_encoder(emb)`` maps a token-embedding sequence ``(n, E)`` to per-token
  features ``(n, N_f)``. The pooled sentence feature is the last (end-of-text) row.
* ``preprocess(views)`` turns ``(V, H, W, 3)`` uint8 rasters into whatever the
  visual encoder consumes; it has no parameters, so its output can be cached.
* ``visual_encoder(pre)`` -> ``(V, rows * cols, N_f)`` patch tokens.

Two implementations ship: :class:`HashBackend`, a small deterministic backend used
for tests and desk-scale experiments, and :class:`ClipBackend`, an adapter around a
``transformers`` CLIP model.
"""

from __future__ import annotations

import hashlib
import logging
import re
import warnings
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

log = logging.getLogger(__name__)


class TokenTruncationWarning(UserWarning):
    pass


class EncoderBackend(nn.Module):
    """Base class fixing the backend contract; see module docstring."""

    n_features: int
    embed_width: int
    input_resolution: int
    patch_grid: tuple[int, int]
    token_limit: int

    @property
    def n_patches(self) -> int:
        return self.patch_grid[0] * self.patch_grid[1]

    def spec(self) -> dict:
        """Name and keyword arguments that rebuild this backend through :func:`make_backend`."""
        raise NotImplementedError

    def describe(self) -> dict:
        return {"N_f": self.n_features, "input_resolution": self.input_resolution,
                "patch_grid": list(self.patch_grid), "token_limit": self.token_limit}

    def tokenize(self, text: str) -> list:
        raise NotImplementedError

    def embed_words(self, pieces: Sequence) -> torch.Tensor:
        raise NotImplementedError

    def special_embeddings(self) -> tuple[torch.Tensor, torch.Tensor]:
        """(start, end) token embeddings, each of shape (1, E)."""
        raise NotImplementedError

    def text_encoder(self, emb: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def preprocess(self, views: np.ndarray) -> torch.Tensor:
        raise NotImplementedError

    def visual_encoder(self, pre: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def visual_parameters(self) -> list[nn.Parameter]:
        raise NotImplementedError

    def text_parameters(self) -> list[nn.Parameter]:
        raise NotImplementedError

    def token_embedder(self, text: str) -> torch.Tensor:
        """Start + word embeddings + end, truncated to ``token_limit`` with a warning."""
        pieces = self.tokenize(text)
        room = self.token_limit - 2
        if len(pieces) > room:
            msg = f"prompt has {len(pieces) + 2} tokens, truncated to backend limit {self.token_limit}"
            warnings.warn(msg, TokenTruncationWarning, stacklevel=2)
            log.warning(msg)
            pieces = pieces[:room]
        sot, eot = self.special_embeddings()
        parts = [sot]
        if pieces:
            parts.append(self.embed_words(pieces))
        parts.append(eot)
        return torch.cat(parts, dim=0)

    def freeze_text(self, frozen: bool = True) -> None:
        for p in self.text_parameters():
            p.requires_grad_(not frozen)


def _hash_seed(seed: int, key: str) -> int:
    h = hashlib.blake2b(f"{seed}\x00{key}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little")


# fixed centring/scaling for the patch statistics computed by HashBackend.preprocess
_STAT_CENTER = torch.tensor([0.6, 0.6, 0.6, 0.2, 0.15, 0.05, 0.05, 0.4, 0.03])
_STAT_SCALE = torch.tensor([0.3, 0.3, 0.3, 0.2, 0.1, 0.05, 0.05, 0.4, 0.03])
N_PATCH_STATS = 9


def patch_statistics(images: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
    """Per-patch image statistics for ``(V, 3, H, W)`` images in [0, 1].

    Returns ``(V, rows * cols, 9)``: mean R, G, B, foreground saturation, luminance std,
    mean absolute gradient, foreground absolute Laplacian, foreground fraction (dark and coloured pixels),
    mean absolute gradient of the 3x3 box-smoothed luminance (edge strength with
    pixel noise suppressed).
    """
    v, _, h, w = images.shape
    rows, cols = grid
    lum = (0.299 * images[:, 0] + 0.587 * images[:, 1] + 0.114 * images[:, 2]).unsqueeze(1)
    sat = images.amax(1, keepdim=True) - images.amin(1, keepdim=True)
    padded = F.pad(lum, (1, 1, 1, 1), mode="replicate")
    gx = padded[..., 1:-1, 2:] - padded[..., 1:-1, :-2]
    gy = padded[..., 2:, 1:-1] - padded[..., :-2, 1:-1]
    grad = 0.5 * (gx.abs() + gy.abs())
    lap = (padded[..., 1:-1, 2:] + padded[..., 1:-1, :-2] + padded[..., 2:, 1:-1]
           + padded[..., :-2, 1:-1] - 4 * lum).abs()
    fg = ((lum < 0.9) & (sat > 0.04)).to(images.dtype)
    smooth = F.avg_pool2d(F.pad(lum, (2, 2, 2, 2), mode="replicate"), 3, stride=1)
    sgrad = 0.5 * ((smooth[..., 1:-1, 2:] - smooth[..., 1:-1, :-2]).abs()
                   + (smooth[..., 2:, 1:-1] - smooth[..., :-2, 1:-1]).abs())
    maps = torch.cat([images, sat, grad, lap, fg, lum, sgrad], dim=1)  # (V, 9, H, W)
    ph, pw = h // rows, w // cols
    maps = maps[..., : ph * rows, : pw * cols]
    pooled = F.avg_pool2d(maps, (ph, pw))  # (V, 9, rows, cols)
    lum_sq = F.avg_pool2d(lum[..., : ph * rows, : pw * cols] ** 2, (ph, pw))
    lum_std = (lum_sq - pooled[:, 7:8] ** 2).clamp_min(0).sqrt()
    # saturation and Laplacian are averaged over foreground pixels only, so they do not
    # scale with how much of the patch the object covers
    fg_mass = pooled[:, 6:7]
    fg_mean = F.avg_pool2d(maps[:, [3, 5]] * maps[:, 6:7], (ph, pw)) / fg_mass.clamp_min(1e-6)
    fg_mean = torch.where(fg_mass > 0, fg_mean, torch.zeros_like(fg_mean))
    stats = torch.cat([pooled[:, 0:3], fg_mean[:, 0:1], lum_std, pooled[:, 4:5], fg_mean[:, 1:2],
                       pooled[:, 6:7], pooled[:, 8:9]], dim=1)
    return stats.flatten(2).transpose(1, 2)


class HashBackend(EncoderBackend):
    """Deterministic toy backend.

    Word embeddings are seeded hashes of the word bytes. The text encoder is a frozen
    causal-mean mixer followed by a fixed linear map and ``tanh``, so the last row
    depends on every token. Visual tokens are a trainable linear projection of fixed
    per-patch image statistics (:func:`patch_statistics`).
    """

    def __init__(self, n_features: int = 512, patch_grid: tuple[int, int] = (14, 14),
                 seed: int = 0, input_resolution: int = 224, token_limit: int = 77,
                 dtype: torch.dtype = torch.float32, visual_hidden: int = 0, text_gain: float | None = None):
        super().__init__()
        if n_features < 2:
            raise ValueError("n_features must be >= 2")
        self.n_features = n_features
        self.embed_width = n_features
        self.patch_grid = tuple(patch_grid)
        self.input_resolution = input_resolution
        self.token_limit = token_limit
        self.seed = seed
        self._dtype = dtype
        self._vocab: dict[str, torch.Tensor] = {}

        g = torch.Generator().manual_seed(_hash_seed(seed, "weights") % (2**63))
        e = self.embed_width
        w_text = torch.linalg.qr(torch.randn(e, n_features, generator=g, dtype=torch.float64))[0]
        self.text_proj = nn.Parameter((w_text * np.sqrt(e)).to(dtype), requires_grad=False)
        self.positional = nn.Parameter(
            (0.1 * torch.randn(token_limit, e, generator=g, dtype=torch.float64) / np.sqrt(e)).to(dtype),
            requires_grad=False)
        self.text_gain = float(1.0 / np.sqrt(n_features) if text_gain is None else text_gain)
        self._spec = {"n_features": n_features, "patch_grid": list(patch_grid), "seed": seed,
                      "input_resolution": input_resolution, "token_limit": token_limit,
                      "dtype": str(dtype).replace("torch.", ""), "visual_hidden": visual_hidden,
                      "text_gain": self.text_gain}
        # visual tokens: linear map of the patch statistics, or a one-hidden-layer ReLU MLP
        widths = [N_PATCH_STATS] + ([visual_hidden] if visual_hidden else []) + [n_features]
        layers: list[nn.Module] = []
        for k, (a, b) in enumerate(zip(widths, widths[1:])):
            lin = nn.Linear(a, b, dtype=dtype)
            with torch.no_grad():
                lin.weight.copy_(torch.randn(b, a, generator=g, dtype=torch.float64) / np.sqrt(max(a, b)))
                lin.bias.zero_()
            layers += [lin, nn.ReLU()] if k < len(widths) - 2 else [lin]
        self.visual_proj = nn.Sequential(*layers)

    def spec(self) -> dict:
        return {"name": "hash", "kwargs": dict(self._spec)}

    def tokenize(self, text: str) -> list[str]:
        return re.findall(r"[a-z0-9]+", text.lower())

    def _word(self, key: str) -> torch.Tensor:
        vec = self._vocab.get(key)
        if vec is None:
            rng = np.random.default_rng(_hash_seed(self.seed, key))
            vec = torch.from_numpy(rng.standard_normal(self.embed_width) / np.sqrt(self.embed_width))
            vec = vec.to(self._dtype)
            self._vocab[key] = vec
        return vec

    def embed_words(self, pieces: Sequence[str]) -> torch.Tensor:
        return torch.stack([self._word(p) for p in pieces])

    def special_embeddings(self) -> tuple[torch.Tensor, torch.Tensor]:
        return self._word("<|startoftext|>")[None], self._word("<|endoftext|>")[None]

    def text_encoder(self, emb: torch.Tensor) -> torch.Tensor:
        n = emb.shape[-2]
        if n > self.token_limit:
            raise ValueError(f"sequence of {n} tokens exceeds backend limit {self.token_limit}")
        x = emb + self.positional[:n]
        counts = torch.arange(1, n + 1, dtype=x.dtype).unsqueeze(-1)
        causal_mean = x.cumsum(dim=-2) / counts
        return torch.tanh(causal_mean @ self.text_proj) * self.text_gain

    def preprocess(self, views: np.ndarray) -> torch.Tensor:
        views = np.asarray(views)
        if views.ndim == 3:
            views = views[None]
        if views.shape[1:3] != (self.input_resolution, self.input_resolution):
            raise ValueError(f"views are {views.shape[1:3]}, backend expects "
                             f"{self.input_resolution}x{self.input_resolution}")
        img = torch.from_numpy(views).to(torch.float64).permute(0, 3, 1, 2) / 255.0
        stats = patch_statistics(img, self.patch_grid)
        return ((stats - _STAT_CENTER.to(stats)) / _STAT_SCALE.to(stats)).to(self._dtype)

    def visual_encoder(self, pre: torch.Tensor) -> torch.Tensor:
        return self.visual_proj(pre)

    def visual_parameters(self) -> list[nn.Parameter]:
        return list(self.visual_proj.parameters())

    def text_parameters(self) -> list[nn.Parameter]:
        return [self.text_proj, self.positional]

    def freeze_text(self, frozen: bool = True) -> None:
        # the hash table itself is not learnable; only the projection could be unfrozen
        for p in self.text_parameters():
            p.requires_grad_(not frozen)


def make_test_backend(n_features: int = 512, patch_grid: tuple[int, int] = (14, 14), seed: int = 0,
                      **kwargs) -> HashBackend:
    if isinstance(kwargs.get("dtype"), str):
        kwargs["dtype"] = getattr(torch, kwargs["dtype"])
    return HashBackend(n_features=n_features, patch_grid=patch_grid, seed=seed, **kwargs)


_CLIP_MEAN = torch.tensor([0.48145466, 0.4578275, 0.40821073])
_CLIP_STD = torch.tensor([0.26862954, 0.26130258, 0.27577711])


class ClipBackend(EncoderBackend):
    """Adapter exposing a ``transformers.CLIPModel`` through the backend contract.

    ``tokenizer`` maps text to a list of vocabulary ids *without* special tokens;
    ``bos_id``/``eos_id`` are the start/end ids. Visual tokens are the projected patch
    tokens (class token excluded) after the vision tower's final layer norm.
    """

    def __init__(self, clip_model, tokenizer: Callable[[str], list[int]], bos_id: int, eos_id: int):
        super().__init__()
        self.clip = clip_model
        self.tokenizer = tokenizer
        self.bos_id, self.eos_id = bos_id, eos_id
        vcfg = clip_model.config.vision_config
        tcfg = clip_model.config.text_config
        side = vcfg.image_size // vcfg.patch_size
        self.patch_grid = (side, side)
        self.input_resolution = vcfg.image_size
        self.n_features = clip_model.config.projection_dim
        self.embed_width = tcfg.hidden_size
        self.token_limit = tcfg.max_position_embeddings

    @classmethod
    def from_pretrained(cls, name: str = "openai/clip-vit-base-patch16") -> "ClipBackend":
        from transformers import CLIPModel, CLIPTokenizer

        model = CLIPModel.from_pretrained(name)
        tok = CLIPTokenizer.from_pretrained(name)
        backend = cls(model, lambda s: tok(s, add_special_tokens=False)["input_ids"],
                      tok.bos_token_id, tok.eos_token_id)
        backend._pretrained = name
        return backend

    def spec(self) -> dict:
        name = getattr(self, "_pretrained", None)
        if name is None:
            raise ValueError("only ClipBackend.from_pretrained backends can be rebuilt from a spec")
        return {"name": "clip", "kwargs": {"name": name}}

    def tokenize(self, text: str) -> list[int]:
        return list(self.tokenizer(text))

    def _embed_ids(self, ids: Sequence[int]) -> torch.Tensor:
        table = self.clip.text_model.embeddings.token_embedding
        return table(torch.as_tensor(list(ids), dtype=torch.long))

    def embed_words(self, pieces: Sequence) -> torch.Tensor:
        if pieces and isinstance(pieces[0], str):
            pieces = [i for p in pieces for i in self.tokenize(p)]
        return self._embed_ids(pieces)

    def special_embeddings(self) -> tuple[torch.Tensor, torch.Tensor]:
        both = self._embed_ids([self.bos_id, self.eos_id])
        return both[:1], both[1:]

    def text_encoder(self, emb: torch.Tensor) -> torch.Tensor:
        tm = self.clip.text_model
        squeeze = emb.dim() == 2
        if squeeze:
            emb = emb[None]
        n = emb.shape[1]
        hidden = tm.embeddings(inputs_embeds=emb)
        mask = torch.full((n, n), torch.finfo(hidden.dtype).min, dtype=hidden.dtype).triu(1)
        out = tm.encoder(inputs_embeds=hidden, attention_mask=mask[None, None]).last_hidden_state
        out = self.clip.text_projection(tm.final_layer_norm(out))
        return out[0] if squeeze else out

    def preprocess(self, views: np.ndarray) -> torch.Tensor:
        views = np.asarray(views)
        if views.ndim == 3:
            views = views[None]
        if views.shape[1:3] != (self.input_resolution, self.input_resolution):
            raise ValueError(f"views are {views.shape[1:3]}, backend expects "
                             f"{self.input_resolution}x{self.input_resolution}")
        img = torch.from_numpy(views).float().permute(0, 3, 1, 2) / 255.0
        return (img - _CLIP_MEAN[:, None, None]) / _CLIP_STD[:, None, None]

    def visual_encoder(self, pre: torch.Tensor) -> torch.Tensor:
        vm = self.clip.vision_model
        hidden = vm.pre_layrnorm(vm.embeddings(pre))
        hidden = vm.encoder(inputs_embeds=hidden).last_hidden_state
        patches = vm.post_layernorm(hidden[:, 1:, :])
        return self.clip.visual_projection(patches)

    def visual_parameters(self) -> list[nn.Parameter]:
        return list(self.clip.vision_model.parameters()) + list(self.clip.visual_projection.parameters())

    def text_parameters(self) -> list[nn.Parameter]:
        return list(self.clip.text_model.parameters()) + list(self.clip.text_projection.parameters())


BACKENDS: dict[str, Callable[..., EncoderBackend]] = {
    "hash": make_test_backend,
    "clip": ClipBackend.from_pretrained,
}


def make_backend(name: str, **kwargs) -> EncoderBackend:
    try:
        factory = BACKENDS[name]
    except KeyError:
        raise ValueError(f"unknown backend {name!r}; known: {sorted(BACKENDS)}") from None
    return factory(**kwargs)


def _check_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"backend produced non-finite {what}")
    return t


def encode_pooled(backend: EncoderBackend, seqs: Sequence[torch.Tensor]) -> torch.Tensor:
    """Pooled (last-row) text features for several embedding sequences, ``(len(seqs), N_f)``.

    Sequences of equal length share one batched encoder call.
    """
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(seqs):
        by_len.setdefault(s.shape[0], []).append(i)
    rows: list[torch.Tensor | None] = [None] * len(seqs)
    for idx in by_len.values():
        out = backend.text_encoder(torch.stack([seqs[i] for i in idx]))[:, -1]
        for k, i in enumerate(idx):
            rows[i] = out[k]
    return torch.stack(rows)


def encode_views(backend: EncoderBackend, views: np.ndarray) -> torch.Tensor:
    """Patch tokens of all views, concatenated in view order: ``(N_v * N_t^v, N_f)``."""
    tokens = backend.visual_encoder(backend.preprocess(views))
    return _check_finite(tokens.reshape(-1, tokens.shape[-1]), "visual tokens")


def encode_prompt(backend: EncoderBackend, prompt: str) -> torch.Tensor:
    """Per-token prompt features ``(N_t^p, N_f)``, specials included."""
    if not prompt or not prompt.strip():
        raise ValueError("prompt must be non-empty")
    return _check_finite(backend.text_encoder(backend.token_embedder(prompt)), "prompt tokens")
