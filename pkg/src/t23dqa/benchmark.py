"""Benchmark manifests: quality dimensions, samples, MOS tables and prompt-disjoint folds.

A manifest is a single JSON document next to a render directory::

    {
      "name": "...",
      "score_range": [1, 5],
      "n_views": 6,
      "dimensions": [{"id": "OA", "display_name": "object alignment", "keywords": [...]}, ...],
      "samples": [
        {"sample_id": "...", "prompt_id": "...", "prompt_text": "...",
         "components": {...} or null, "generator_id": "...",
         "views": ["renders/x/px.png", ...], "mos": {"OA": 3.33, "AA": null, ...}}
      ]
    }

View paths are relative to the manifest's directory. A ``null`` MOS entry marks a
dimension that does not apply to the sample (it is masked out of every loss).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

# canonical order of the six default viewpoints
VIEW_NAMES = ("px", "nx", "py", "ny", "pz", "nz")


class ManifestError(ValueError):
    """Raised when a manifest cannot be parsed or fails validation.

    ``errors`` holds one message per problem, each naming the offending sample.
    """

    def __init__(self, errors: Sequence[str] | str):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors) if len(self.errors) <= 3
                         else "; ".join(self.errors[:3]) + f" (+{len(self.errors) - 3} more)")


class ManifestParseError(ManifestError):
    """The manifest file is unreadable or structurally malformed."""


@dataclass(frozen=True)
class QualityDimension:
    id: str
    display_name: str
    keywords: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"id": self.id, "display_name": self.display_name, "keywords": list(self.keywords)}

    @classmethod
    def from_dict(cls, d: dict | str) -> "QualityDimension":
        if isinstance(d, str):
            if d in STANDARD_DIMENSIONS:
                return STANDARD_DIMENSIONS[d]
            return cls(d, d.lower())
        return cls(d["id"], d.get("display_name") or d["id"].lower(), tuple(d.get("keywords", ())))


_DIMENSION_TABLE = [
    ("OA", "object alignment", ("category", "quantity", "count", "type")),
    ("AA", "attribute alignment", ("material", "geometry", "appearance", "shape")),
    ("IA", "interaction alignment", ("action", "position", "location", "orientation")),
    ("OVA", "overall alignment", ("object", "number", "attribute", "interaction")),
    ("TC", "texture clarity", ("detail", "resolution", "visibility", "contrast")),
    ("TA", "texture aesthetics", ("lighting", "color", "style", "artistry")),
    ("GL", "geometry loss", ("incompleteness", "integrity", "fragmentation", "infidelity")),
    ("GR", "geometry redundancy", ("overlap", "floater", "excess", "duplication")),
    ("GRS", "geometry roughness", ("smoothness", "irregularity", "edge", "crudeness")),
    ("OV", "overall visual", ("clarity", "aesthetics", "integrity", "roughness")),
    ("3DA", "3d authentic", ("unrealism", "inconsistency", "overgeneration", "implausibility")),
    ("OQ", "overall quality", ("alignment", "geometry", "texture", "authenticity")),
]

STANDARD_DIMENSIONS: dict[str, QualityDimension] = {
    i: QualityDimension(i, name, kw) for i, name, kw in _DIMENSION_TABLE
}
DIMENSION_IDS: tuple[str, ...] = tuple(STANDARD_DIMENSIONS)


def standard_dimensions(ids: Iterable[str] | None = None) -> list[QualityDimension]:
    """The twelve sub-dimensions, or the listed subset in the given order."""
    if ids is None:
        ids = DIMENSION_IDS
    return [STANDARD_DIMENSIONS[i] for i in ids]


_COMPONENT_CHOICES = {
    "object": ("Single", "Multiple"),
    "relationship": ("Spatial", "NonSpatial"),
    "style": ("Realistic", "Imaginative"),
    "attribute": ("GeometryOnly", "AppearanceOnly", "Mixed"),
    "length": ("Basic", "Refined", "Complex"),
}


@dataclass(frozen=True)
class PromptComponents:
    object: str
    style: str
    length: str
    relationship: str | None = None
    attribute: str | None = None

    def __post_init__(self):
        for key, choices in _COMPONENT_CHOICES.items():
            value = getattr(self, key)
            if value is not None and value not in choices:
                raise ValueError(f"component {key}={value!r} not in {choices}")
        # Single prompts carry an attribute, Multiple prompts a relationship
        if self.object == "Single" and (self.attribute is None or self.relationship is not None):
            raise ValueError("Single-object prompts need an attribute and no relationship")
        if self.object == "Multiple" and (self.relationship is None or self.attribute is not None):
            raise ValueError("Multiple-object prompts need a relationship and no attribute")

    def sub_components(self) -> list[str]:
        """Sub-component labels this prompt belongs to (for per-component tables)."""
        out = [self.object, self.style, self.length]
        out.append(self.attribute if self.object == "Single" else self.relationship)
        return out

    def to_dict(self) -> dict:
        d = {"object": self.object, "style": self.style, "length": self.length}
        if self.relationship is not None:
            d["relationship"] = self.relationship
        if self.attribute is not None:
            d["attribute"] = self.attribute
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PromptComponents":
        return cls(object=d["object"], style=d["style"], length=d["length"],
                   relationship=d.get("relationship"), attribute=d.get("attribute"))


def all_component_combinations() -> list[PromptComponents]:
    """The 30 valid component combinations ((2 + 3) x 2 x 3)."""
    combos = []
    for style in _COMPONENT_CHOICES["style"]:
        for length in _COMPONENT_CHOICES["length"]:
            for attr in _COMPONENT_CHOICES["attribute"]:
                combos.append(PromptComponents("Single", style, length, attribute=attr))
            for rel in _COMPONENT_CHOICES["relationship"]:
                combos.append(PromptComponents("Multiple", style, length, relationship=rel))
    return combos


@dataclass(frozen=True)
class Sample:
    sample_id: str
    prompt_id: str
    prompt_text: str
    generator_id: str
    view_paths: tuple[Path, ...]
    mos: dict[str, float | None]
    components: PromptComponents | None = None

    def mos_array(self, dims: Sequence[str]) -> np.ndarray:
        """MOS as a float array in ``dims`` order, NaN where the dimension is absent."""
        return np.array([np.nan if self.mos.get(d) is None else float(self.mos[d]) for d in dims])


@dataclass(frozen=True)
class BenchmarkManifest:
    name: str
    dimensions: tuple[QualityDimension, ...]
    score_range: tuple[float, float]
    n_views: int
    samples: tuple[Sample, ...]
    root: Path = field(default=Path("."), compare=False)

    @property
    def dim_ids(self) -> list[str]:
        return [d.id for d in self.dimensions]

    @property
    def prompt_ids(self) -> list[str]:
        """Distinct prompt ids in first-appearance order."""
        return list(dict.fromkeys(s.prompt_id for s in self.samples))

    def prompt_groups(self) -> dict[str, list[Sample]]:
        groups: dict[str, list[Sample]] = {}
        for s in self.samples:
            groups.setdefault(s.prompt_id, []).append(s)
        return groups

    def mos_matrix(self) -> np.ndarray:
        """(n_samples, n_dims) MOS array, NaN for absent entries."""
        dims = self.dim_ids
        return np.stack([s.mos_array(dims) for s in self.samples]) if self.samples else np.zeros((0, len(dims)))

    def subset(self, sample_ids: Iterable[str], name: str | None = None) -> "BenchmarkManifest":
        keep = set(sample_ids)
        return replace(self, name=name or self.name,
                       samples=tuple(s for s in self.samples if s.sample_id in keep))

    def by_prompts(self, prompt_ids: Iterable[str]) -> "BenchmarkManifest":
        keep = set(prompt_ids)
        return replace(self, samples=tuple(s for s in self.samples if s.prompt_id in keep))


def validate_manifest(manifest: BenchmarkManifest, check_files: bool = True) -> list[str]:
    """Return every validation problem found (empty list means valid)."""
    errors = []
    if not manifest.samples:
        return ["empty benchmark"]
    lo, hi = manifest.score_range
    if not lo < hi:
        errors.append(f"bad score_range {manifest.score_range}")
    names = [d.display_name for d in manifest.dimensions]
    if not manifest.dimensions:
        errors.append("no dimensions declared")
    if any(not n for n in names) or len(set(names)) != len(names):
        errors.append("dimension display names must be non-empty and unique")
    if len({d.id for d in manifest.dimensions}) != len(manifest.dimensions):
        errors.append("duplicate dimension ids")
    seen = set()
    dims = manifest.dim_ids
    for s in manifest.samples:
        sid = s.sample_id
        if sid in seen:
            errors.append(f"{sid}: duplicate sample_id")
        seen.add(sid)
        if len(s.view_paths) != manifest.n_views:
            errors.append(f"{sid}: expected {manifest.n_views} views, got {len(s.view_paths)}")
        missing = [d for d in dims if d not in s.mos]
        if missing:
            errors.append(f"{sid}: missing score for dimension(s) {', '.join(missing)}")
        extra = [d for d in s.mos if d not in dims]
        if extra:
            errors.append(f"{sid}: score for undeclared dimension(s) {', '.join(extra)}")
        for d in dims:
            v = s.mos.get(d)
            if v is None:
                continue
            if not (isinstance(v, (int, float)) and math.isfinite(v)):
                errors.append(f"{sid}: non-numeric score {v!r} for {d}")
            elif not lo <= v <= hi:
                errors.append(f"{sid}: score {v} for {d} outside range [{lo}, {hi}]")
        if check_files:
            for p in s.view_paths:
                if not Path(p).is_file():
                    errors.append(f"{sid}: missing view file {p}")
    return errors


def _parse_manifest(doc: dict, root: Path) -> BenchmarkManifest:
    try:
        dims = tuple(QualityDimension.from_dict(d) for d in doc["dimensions"])
        lo, hi = doc.get("score_range", (1, 5))
        samples = []
        for rec in doc["samples"]:
            comps = rec.get("components")
            samples.append(Sample(
                sample_id=str(rec["sample_id"]),
                prompt_id=str(rec["prompt_id"]),
                prompt_text=rec["prompt_text"],
                generator_id=str(rec["generator_id"]),
                view_paths=tuple((root / v).resolve() for v in rec["views"]),
                mos=dict(rec["mos"]),
                components=PromptComponents.from_dict(comps) if comps else None,
            ))
        return BenchmarkManifest(name=doc["name"], dimensions=dims, score_range=(float(lo), float(hi)),
                                 n_views=int(doc.get("n_views", 6)), samples=tuple(samples), root=root)
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestParseError(f"malformed manifest: {exc!r}") from exc


def load_manifest(path: str | os.PathLike, check_files: bool = True) -> BenchmarkManifest:
    """Load and fully validate a manifest; raises :class:`ManifestError` on any problem."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestParseError(f"cannot parse manifest {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ManifestParseError(f"cannot parse manifest {path}: top level is not an object")
    manifest = _parse_manifest(doc, path.parent.resolve())
    errors = validate_manifest(manifest, check_files=check_files)
    if errors:
        raise ManifestError(errors)
    return manifest


def manifest_to_dict(manifest: BenchmarkManifest, root: Path) -> dict:
    samples = []
    for s in manifest.samples:
        samples.append({
            "sample_id": s.sample_id,
            "prompt_id": s.prompt_id,
            "prompt_text": s.prompt_text,
            "components": s.components.to_dict() if s.components else None,
            "generator_id": s.generator_id,
            "views": [Path(os.path.relpath(p, root)).as_posix() for p in s.view_paths],
            "mos": {d: s.mos.get(d) for d in manifest.dim_ids},
        })
    return {
        "name": manifest.name,
        "score_range": list(manifest.score_range),
        "n_views": manifest.n_views,
        "dimensions": [d.to_dict() for d in manifest.dimensions],
        "samples": samples,
    }


def save_manifest(manifest: BenchmarkManifest, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = manifest_to_dict(manifest, path.parent.resolve())
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


def load_view(path: str | os.PathLike, size: int = 224) -> np.ndarray:
    """Read one view as an 8-bit RGB array, resized to ``size`` x ``size``."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8)


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignments: dict[str, int]

    def test_prompts(self, fold: int) -> set[str]:
        return {p for p, f in self.assignments.items() if f == fold}

    def train_prompts(self, fold: int) -> set[str]:
        return {p for p, f in self.assignments.items() if f != fold}

    def split(self, manifest: BenchmarkManifest, fold: int) -> tuple[BenchmarkManifest, BenchmarkManifest]:
        """(train, test) manifests for ``fold``; asserts prompt disjointness."""
        train = manifest.by_prompts(self.train_prompts(fold))
        test = manifest.by_prompts(self.test_prompts(fold))
        overlap = {s.prompt_id for s in train.samples} & {s.prompt_id for s in test.samples}
        if overlap:
            raise AssertionError(f"fold {fold}: train/test share prompts {sorted(overlap)[:5]}")
        return train, test


def make_fold_plan(manifest: BenchmarkManifest, k: int = 5, seed: int = 0) -> FoldPlan:
    """Prompt-disjoint k-fold assignment, deterministic in (prompt set, k, seed)."""
    if k < 2:
        raise ValueError("k must be >= 2")
    prompts = sorted(manifest.prompt_ids)
    if len(prompts) < k:
        raise ValueError(f"fewer prompts ({len(prompts)}) than folds ({k})")
    order = np.random.default_rng(seed).permutation(len(prompts))
    return FoldPlan(k, {prompts[j]: pos % k for pos, j in enumerate(order)})
