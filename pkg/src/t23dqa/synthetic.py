"""Procedural benchmark with a planted, known MOS function.

Every sample has five latent quality factors in [0, 1] (1 is best):

=========  ===========================================================
sharp      Gaussian blur, sigma grows as the factor falls
complete   a half-plane of the object is cut away (missing geometry)
smooth     per-pixel noise on the object surface (roughness)
vivid      colour saturation
clean      small floating blobs around the object (redundancy)
=========  ===========================================================

Each dimension's MOS is ``1 + 4 * w_d . factors`` plus optional Gaussian noise, clipped
to [1, 5] and stored with two decimals. Factors mix a generator profile, a per-prompt
offset and per-sample jitter; the prompt also fixes nuisance content (shape, hue,
object size, object count) that changes the pixels but not the quality.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .benchmark import (VIEW_NAMES, BenchmarkManifest, Sample, all_component_combinations,
                        save_manifest, standard_dimensions)

FACTORS = ("sharp", "complete", "smooth", "vivid", "clean")

# rows follow the standard dimension order, columns follow FACTORS; rows sum to 1
PLANTED_WEIGHTS = {
    "OA": (0.30, 0.50, 0.00, 0.00, 0.20),
    "AA": (0.00, 0.00, 0.30, 0.70, 0.00),
    "IA": (0.00, 0.40, 0.00, 0.00, 0.60),
    "OVA": (0.10, 0.30, 0.10, 0.23, 0.27),
    "TC": (0.80, 0.00, 0.20, 0.00, 0.00),
    "TA": (0.20, 0.00, 0.00, 0.80, 0.00),
    "GL": (0.00, 1.00, 0.00, 0.00, 0.00),
    "GR": (0.00, 0.00, 0.00, 0.00, 1.00),
    "GRS": (0.00, 0.00, 1.00, 0.00, 0.00),
    "OV": (0.20, 0.20, 0.20, 0.20, 0.20),
    "3DA": (0.00, 0.40, 0.30, 0.00, 0.30),
    "OQ": (0.20, 0.25, 0.15, 0.20, 0.20),
}

# equal HSV saturation/value so that colour saturation tracks the ``vivid`` factor only
_HUES = {"red": 0.0, "orange": 0.08, "yellow": 0.15, "green": 0.33, "teal": 0.48,
         "blue": 0.62, "purple": 0.75, "pink": 0.9}
_COLORS = {k: colorsys.hsv_to_rgb(h, 0.8, 0.8) for k, h in _HUES.items()}

_SHAPES = ("sphere", "cube", "pyramid", "ring", "vase", "star")
# rough silhouette areas (unit radius); radii are rescaled so every shape covers a similar area
_SHAPE_AREA = {"sphere": 3.14, "cube": 2.56, "pyramid": 1.45, "ring": 2.36, "vase": 1.95, "star": 1.85}
_GEOMETRY_WORDS = ("round", "tall", "curved", "twisted", "flat")
_MATERIALS = ("bronze", "glass", "wooden", "marble", "clay")
_SPATIAL = ("on top of", "next to", "behind", "under")
_NONSPATIAL = ("looking at", "chasing", "talking to", "hugging")
_IMAGINATIVE = ("with wings", "made of clouds", "glowing with stars", "with tiny legs")
_REFINED = ("with a smooth surface", "with fine details")
_COMPLEX = ("with intricate carvings along its sides and a polished base",
            "with a long tail and a row of spines along its back")


@dataclass
class PlantedScores:
    """The planted MOS function: per-sample latent factors and the per-dimension weights."""

    factors: dict[str, np.ndarray]
    weights: dict[str, tuple[float, ...]]

    def raw(self, sample_id: str) -> dict[str, float]:
        f = self.factors[sample_id]
        return {d: 1.0 + 4.0 * float(np.dot(w, f)) for d, w in self.weights.items()}

    def __call__(self, sample: Sample | str) -> dict[str, float]:
        sid = sample if isinstance(sample, str) else sample.sample_id
        return {d: round(min(max(v, 1.0), 5.0), 2) for d, v in self.raw(sid).items()}


def _prompt_text(rng: np.random.Generator, comps, colors, shapes) -> str:
    if comps.object == "Single":
        color, shape = colors[0], shapes[0]
        if comps.attribute == "GeometryOnly":
            text = f"a {rng.choice(_GEOMETRY_WORDS)} {shape}"
        elif comps.attribute == "AppearanceOnly":
            text = f"a {color} {rng.choice(_MATERIALS)} {shape}"
        else:
            text = f"a {rng.choice(_GEOMETRY_WORDS)} {shape} of {color} color"
    else:
        rel = rng.choice(_SPATIAL if comps.relationship == "Spatial" else _NONSPATIAL)
        text = f"a {colors[0]} {shapes[0]} {rel} a {colors[1]} {shapes[1]}"
    if comps.style == "Imaginative":
        text += f" {rng.choice(_IMAGINATIVE)}"
    if comps.length == "Refined":
        text += f" {rng.choice(_REFINED)}"
    elif comps.length == "Complex":
        text += f" {rng.choice(_COMPLEX)}"
    return text


def _shape_mask(shape: str, x: np.ndarray, y: np.ndarray, r: float, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    u, v = (c * x + s * y) / r, (-s * x + c * y) / r
    rad = np.hypot(u, v)
    if shape == "sphere":
        return rad <= 1.0
    if shape == "cube":
        return np.maximum(abs(u), abs(v)) <= 0.8
    if shape == "pyramid":
        return (v <= 0.7) & (v >= -0.9 + 2.2 * abs(u))
    if shape == "ring":
        return (rad <= 1.0) & (rad >= 0.5)
    if shape == "vase":
        return (abs(u) <= 0.45 + 0.25 * np.cos(2.2 * v)) & (abs(v) <= 1.0)
    theta = np.arctan2(v, u)
    return rad <= 0.55 + 0.4 * np.cos(5 * theta) ** 2


def render_view(rng: np.random.Generator, size: int, shapes, colors, scale: float, n_objects: int,
                factors: np.ndarray, view: int, n_views: int) -> np.ndarray:
    sharp, complete, smooth, vivid, clean = factors
    ys, xs = np.mgrid[0:size, 0:size]
    x = (xs + 0.5) / size * 2 - 1
    y = (ys + 0.5) / size * 2 - 1
    img = np.full((size, size, 3), 0.96)
    angle = 2 * np.pi * view / n_views
    light = np.array([np.cos(angle), np.sin(angle)])
    r = 0.72 * scale * (0.92 + 0.08 * np.cos(angle)) / (1.0 if n_objects == 1 else 1.7)
    centres = [(0.0, 0.0)] if n_objects == 1 else [(-0.42, 0.1), (0.42, -0.1)]
    cut_dir = np.array([np.cos(angle + 1.0), np.sin(angle + 1.0)])
    cut = 1.0 - 1.6 * (1.0 - complete)  # offset of the removed half-plane, in radii
    rough = np.zeros((size, size), dtype=bool)
    for k, (cx, cy) in enumerate(centres):
        dx, dy = x - cx, y - cy
        rk = r * np.sqrt(2.2 / _SHAPE_AREA[shapes[k]])
        mask = _shape_mask(shapes[k], dx, dy, rk, angle)
        mask &= (dx * cut_dir[0] + dy * cut_dir[1]) / rk <= cut
        base = np.array(_COLORS[colors[k]])
        gray = base.mean()
        col = gray + (0.15 + 0.85 * vivid) * (base - gray)
        shade = 0.8 + 0.2 * np.clip((dx * light[0] + dy * light[1]) / rk, -1, 1)
        img = np.where(mask[..., None], col[None, None, :] * shade[..., None], img)
        rough |= mask
    # floaters live in the border region, away from the object
    for _ in range(int(np.ceil(6 * (1.0 - clean) - 1e-9))):
        phi, dist = rng.uniform(0, 2 * np.pi), rng.uniform(0.85, 1.2)
        fx = float(np.clip(dist * np.cos(phi), -0.9, 0.9))
        fy = float(np.clip(dist * np.sin(phi), -0.9, 0.9))
        blob = np.hypot(x - fx, y - fy) <= 0.04 + 0.06 * (1.0 - clean)
        img = np.where(blob[..., None], 0.35, img)
    sigma = 2.2 * (1.0 - sharp) * size / 64
    if sigma > 0.05:
        img = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="nearest")
    # surface roughness is applied after blurring so it stays visible as fine texture
    noise = rng.normal(0.0, 0.3 * (1.0 - smooth), size=(size, size, 1))
    img = np.where(rough[..., None], img + noise, img)
    return (np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8)


def generate_synthetic_benchmark(out_dir: str | Path, n_prompts: int = 40, n_generators: int = 5,
                                 n_views: int = 6, noise_sd: float = 0.1, seed: int = 0,
                                 image_size: int = 64, name: str = "synthetic"
                                 ) -> tuple[BenchmarkManifest, PlantedScores]:
    """Write renders plus ``manifest.json`` under ``out_dir``; return the manifest and planted function."""
    if min(n_prompts, n_generators, n_views) < 1:
        raise ValueError("counts must be >= 1")
    if noise_sd < 0:
        raise ValueError("noise_sd must be >= 0")
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    dims = standard_dimensions()
    weights = {d.id: PLANTED_WEIGHTS[d.id] for d in dims}
    combos = all_component_combinations()
    gen_profile = rng.uniform(0.05, 0.95, size=(n_generators, len(FACTORS)))
    view_names = VIEW_NAMES if n_views == len(VIEW_NAMES) else tuple(f"v{v:02d}" for v in range(n_views))
    color_names = list(_COLORS)

    samples, factors = [], {}
    for p in range(n_prompts):
        comps = combos[(p + seed) % len(combos)]
        n_obj = 1 if comps.object == "Single" else 2
        colors = [str(c) for c in rng.choice(color_names, size=2, replace=False)]
        shapes = [str(s) for s in rng.choice(_SHAPES, size=2, replace=False)]
        scale = rng.uniform(0.85, 1.0)
        prompt_offset = rng.normal(0.0, 0.1)
        text = _prompt_text(rng, comps, colors, shapes)
        pid = f"p{p:04d}"
        for g in range(n_generators):
            sid = f"{pid}_g{g:02d}"
            f = np.clip(gen_profile[g] + prompt_offset + rng.normal(0.0, 0.15, size=len(FACTORS)), 0.0, 1.0)
            f = np.round(f, 6)
            factors[sid] = f
            view_rng = np.random.default_rng([seed, p, g])
            rel_paths = []
            for v, vname in enumerate(view_names):
                arr = render_view(view_rng, image_size, shapes, colors, scale, n_obj, f, v, n_views)
                rel = Path("renders") / sid / f"{vname}.png"
                (out_dir / rel).parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(arr).save(out_dir / rel, optimize=False)
                rel_paths.append((out_dir / rel).resolve())
            samples.append(Sample(sample_id=sid, prompt_id=pid, prompt_text=text, generator_id=f"g{g:02d}",
                                  view_paths=tuple(rel_paths), mos={}, components=comps))

    planted = PlantedScores(factors, weights)
    noisy = []
    for s in samples:
        raw = planted.raw(s.sample_id)
        mos = {}
        for d in weights:
            v = raw[d] + (rng.normal(0.0, noise_sd) if noise_sd > 0 else 0.0)
            mos[d] = round(min(max(v, 1.0), 5.0), 2)
        noisy.append(Sample(s.sample_id, s.prompt_id, s.prompt_text, s.generator_id, s.view_paths, mos,
                            s.components))
    manifest = BenchmarkManifest(name=name, dimensions=tuple(dims), score_range=(1.0, 5.0),
                                 n_views=n_views, samples=tuple(noisy), root=out_dir.resolve())
    save_manifest(manifest, out_dir / "manifest.json")
    (out_dir / "planted.json").write_text(json.dumps(
        {"factors": FACTORS, "weights": weights,
         "samples": {k: [float(x) for x in v] for k, v in factors.items()}}, indent=1) + "\n")
    return manifest, planted
