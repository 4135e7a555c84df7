"""Evaluation protocol: per-dimension correlations, fold averaging, cross-benchmark
transfer and per-generator/component summaries."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .benchmark import BenchmarkManifest, make_fold_plan
from .encoders import EncoderBackend
from .metrics import fit_logistic5, krcc, plcc, srcc
from .model import FeatureStore, QualityModel, predict
from .trainer import Checkpoint, TrainConfig, load_model, train

log = logging.getLogger(__name__)

METRICS = ("srcc", "krcc", "plcc")

# target-benchmark dimension -> source dimension(s); several sources are averaged
DIMENSION_MAPPINGS: dict[str, dict[str, list[str]]] = {
    "3dgcqa": {"OVA": ["OVA"], "OQ": ["OQ"]},
    "mate3d": {"OVA": ["OVA"], "T": ["TC", "TA"], "G": ["GL", "GR", "GRS"], "OQ": ["OQ"]},
    "aigc-t23daqa": {"OVA": ["OVA"], "OQ": ["OQ"]},
}


class FoldError(RuntimeError):
    pass


def dimension_stats(pred: np.ndarray, mos: np.ndarray, fit: bool = True) -> dict[str, float]:
    """SRCC/KRCC on raw predictions; PLCC after a logistic-5 fit (raw if the fit fails)."""
    ok = ~np.isnan(mos)
    p, m = pred[ok], mos[ok]
    out = {"n": int(ok.sum()), "srcc": srcc(p, m) if p.size >= 2 else math.nan,
           "krcc": krcc(p, m) if p.size >= 2 else math.nan}
    converged = False
    mapped = p
    if fit and p.size >= 5 and np.ptp(p) > 0:
        f = fit_logistic5(p, m)
        converged = f.converged
        mapped = f(p)
    out["plcc"] = plcc(mapped, m) if p.size >= 2 else math.nan
    out["fit_converged"] = converged
    return out


@dataclass
class EvalReport:
    """Per-dimension statistics for one or more folds.

    ``folds[k][metric][dim]`` holds fold ``k``'s value; averages are plain means over folds.
    """

    benchmark: str
    checkpoint: str
    dims: list[str]
    folds: list[dict[str, dict[str, float]]] = field(default_factory=list)
    fit_converged: list[dict[str, bool]] = field(default_factory=list)

    def add_fold(self, pred: np.ndarray, mos: np.ndarray, fit: bool = True) -> dict[str, dict[str, float]]:
        row = {m: {} for m in METRICS}
        conv = {}
        for k, d in enumerate(self.dims):
            st = dimension_stats(pred[:, k], mos[:, k], fit)
            for m in METRICS:
                row[m][d] = st[m]
            conv[d] = st["fit_converged"]
        self.folds.append(row)
        self.fit_converged.append(conv)
        return row

    def mean(self, metric: str = "srcc") -> dict[str, float]:
        return {d: float(np.mean([f[metric][d] for f in self.folds])) for d in self.dims}

    def ap(self, metric: str = "srcc") -> float:
        """Average performance: unweighted mean over dimensions of the fold-averaged values."""
        return float(np.mean(list(self.mean(metric).values())))

    def fold_ap(self, k: int, metric: str = "srcc") -> float:
        return float(np.mean([self.folds[k][metric][d] for d in self.dims]))

    def to_dict(self) -> dict:
        return {"benchmark": self.benchmark, "checkpoint": self.checkpoint, "dims": self.dims,
                "folds": self.folds, "fit_converged": self.fit_converged,
                "mean": {m: self.mean(m) for m in METRICS}, "ap": {m: self.ap(m) for m in METRICS}}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["benchmark"], d["checkpoint"], list(d["dims"]), d["folds"], d.get("fit_converged", []))

    def table(self, metrics: Sequence[str] = ("srcc", "krcc")) -> str:
        head = ["", *self.dims, "AP"]
        lines = [f"benchmark: {self.benchmark}   checkpoint: {self.checkpoint}   folds: {len(self.folds)}"]
        rows = []
        for m in metrics:
            vals = self.mean(m)
            rows.append([m.upper(), *(f"{vals[d]:.3f}" for d in self.dims), f"{self.ap(m):.3f}"])
            if len(self.folds) > 1:
                for k in range(len(self.folds)):
                    f = self.folds[k][m]
                    rows.append([f"  fold {k}", *(f"{f[d]:.3f}" for d in self.dims), f"{self.fold_ap(k, m):.3f}"])
        widths = [max(len(str(r[i])) for r in [head, *rows]) for i in range(len(head))]
        for r in [head, *rows]:
            lines.append("  ".join(str(c).rjust(w) for c, w in zip(r, widths)))
        return "\n".join(lines)

    def save(self, out_dir: str | Path) -> dict[str, Path]:
        """Write ``report.json``, ``report.txt`` and one ``<metric>_by_fold.csv`` per metric."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"json": out / "report.json", "txt": out / "report.txt"}
        paths["json"].write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        paths["txt"].write_text(self.table(METRICS) + "\n")
        for m in METRICS:
            p = out / f"{m}_by_fold.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["fold", *self.dims, "AP"])
                for k in range(len(self.folds)):
                    w.writerow([k, *(self.folds[k][m][d] for d in self.dims), self.fold_ap(k, m)])
            paths[m] = p
        return paths


def evaluate_model(model: QualityModel, manifest: BenchmarkManifest, dims: Sequence[str] | None = None,
                   store: FeatureStore | None = None, checkpoint: str = "", fit: bool = True,
                   report: EvalReport | None = None) -> EvalReport:
    """Score ``manifest`` and add one fold row (restricted to ``dims``) to ``report``."""
    dims = list(dims) if dims is not None else [d for d in model.dim_ids if d in manifest.dim_ids]
    missing = [d for d in dims if d not in model.dim_ids or d not in manifest.dim_ids]
    if missing:
        raise ValueError(f"dimension(s) not available: {', '.join(missing)}")
    store = store or FeatureStore(model.backend)
    samples = list(manifest.samples)
    pred = predict(model, store, samples)
    cols = [model.dim_ids.index(d) for d in dims]
    mos = np.stack([s.mos_array(dims) for s in samples])
    report = report or EvalReport(manifest.name, checkpoint, dims)
    report.add_fold(pred[:, cols], mos, fit)
    return report


def _fresh_backend(backend: EncoderBackend | Callable[[], EncoderBackend]) -> EncoderBackend:
    return backend() if callable(backend) and not isinstance(backend, EncoderBackend) else copy.deepcopy(backend)


def cross_validate(manifest: BenchmarkManifest, config: TrainConfig,
                   backend: EncoderBackend | Callable[[], EncoderBackend], k: int = 5, seed: int = 0,
                   run_root: str | Path | None = None, folds: Sequence[int] | None = None,
                   fit: bool = True) -> EvalReport:
    """Prompt-disjoint k-fold protocol.

    Each fold trains from a fresh copy of ``backend`` on the train prompts and evaluates
    the checkpoint with minimal stage-2 training loss on the held-out prompts.
    """
    plan = make_fold_plan(manifest, k, seed)
    report = EvalReport(manifest.name, f"crossval(k={k}, seed={seed})", list(manifest.dim_ids))
    for fold in (range(k) if folds is None else folds):
        train_set, test_set = plan.split(manifest, fold)
        overlap = set(train_set.prompt_ids) & set(test_set.prompt_ids)
        if overlap:
            raise FoldError(f"fold {fold}: train and test share prompts {sorted(overlap)[:5]}")
        run_dir = Path(run_root) / f"fold_{fold}" if run_root is not None else None
        be = _fresh_backend(backend)
        try:
            _, s2 = train(train_set, config, be, run_dir=run_dir)
        except Exception as exc:
            raise FoldError(f"fold {fold}: training failed: {exc}") from exc
        model = load_model(s2.best, be)
        evaluate_model(model, test_set, report.dims, checkpoint=report.checkpoint, fit=fit, report=report)
        log.info("fold %d AP(SRCC) %.4f", fold, report.fold_ap(len(report.folds) - 1))
    return report


def cross_benchmark(model: QualityModel | Checkpoint, target: BenchmarkManifest,
                    mapping: Mapping[str, Sequence[str] | str] | str,
                    dims: Sequence[str] | None = None, fit: bool = True) -> EvalReport:
    """Evaluate a trained model on another benchmark over the mapped dimensions only.

    ``mapping`` sends each target dimension id to one or more source dimension ids
    (predictions of several sources are averaged) or names an entry of
    :data:`DIMENSION_MAPPINGS`.
    """
    name = ""
    if isinstance(model, Checkpoint):
        name = f"stage{model.stage}/epoch_{model.epoch:03d}"
        model = load_model(model)
    if isinstance(mapping, str):
        if mapping not in DIMENSION_MAPPINGS:
            raise KeyError(f"unknown mapping {mapping!r}; known: {', '.join(DIMENSION_MAPPINGS)}")
        mapping = DIMENSION_MAPPINGS[mapping]
    resolved = {t: [s] if isinstance(s, str) else list(s) for t, s in mapping.items()}
    usable = [t for t, srcs in resolved.items()
              if t in target.dim_ids and srcs and all(s in model.dim_ids for s in srcs)]
    if dims is not None:
        usable = [t for t in usable if t in set(dims)]
    if not usable:
        raise ValueError("no overlapping dimensions between the model and the target benchmark")
    samples = list(target.samples)
    pred = predict(model, FeatureStore(model.backend), samples)
    cols = np.stack([pred[:, [model.dim_ids.index(s) for s in resolved[t]]].mean(1) for t in usable], axis=1)
    mos = np.stack([s.mos_array(usable) for s in samples])
    report = EvalReport(target.name, name, usable)
    report.add_fold(cols, mos, fit)
    return report


@dataclass
class ComponentTable:
    """Mean overall score per generator and prompt sub-component."""

    generators: list[str]
    components: list[str]
    means: np.ndarray  # (n_generators, n_components), nan where a cell is empty
    counts: np.ndarray
    skipped: int
    dim: str

    def to_text(self) -> str:
        w = max(len(c) for c in self.components + ["generator"])
        cw = [max(len(g), 6) for g in self.generators]
        header = "  ".join(g.rjust(k) for g, k in zip(self.generators, cw))
        lines = [f"mean {self.dim} by generator and prompt component (skipped {self.skipped} sample(s) "
                 f"without components)", "generator".ljust(w) + "  " + header]
        for c, comp in enumerate(self.components):
            cells = [f"{self.means[g, c]:.3f}".rjust(cw[g]) for g in range(len(self.generators))]
            lines.append(comp.ljust(w) + "  " + "  ".join(cells))
        return "\n".join(lines)

    def to_records(self) -> list[dict]:
        return [{"generator": g, "component": c, "mean": float(self.means[i, j]), "count": int(self.counts[i, j])}
                for i, g in enumerate(self.generators) for j, c in enumerate(self.components)]


def component_report(manifest: BenchmarkManifest, predictions: np.ndarray | None = None,
                     dim: str = "OQ") -> ComponentTable:
    """Group-by of overall scores (predicted, or MOS when ``predictions`` is None).

    ``predictions`` is ``(n_samples, N_d)`` aligned with ``manifest.samples`` and the
    manifest's dimension order.
    """
    col = manifest.dim_ids.index(dim)
    values = manifest.mos_matrix()[:, col] if predictions is None else np.asarray(predictions)[:, col]
    generators = sorted({s.generator_id for s in manifest.samples})
    components: list[str] = []
    sums: dict[tuple[str, str], float] = {}
    counts: dict[tuple[str, str], int] = {}
    skipped = 0
    for s, v in zip(manifest.samples, values):
        if s.components is None or np.isnan(v):
            skipped += 1
            continue
        for c in s.components.sub_components():
            if c not in components:
                components.append(c)
            sums[s.generator_id, c] = sums.get((s.generator_id, c), 0.0) + float(v)
            counts[s.generator_id, c] = counts.get((s.generator_id, c), 0) + 1
    if skipped:
        log.warning("component report: skipped %d sample(s) without components or score", skipped)
    means = np.full((len(generators), len(components)), np.nan)
    cnt = np.zeros_like(means, dtype=int)
    for (g, c), total in sums.items():
        i, j = generators.index(g), components.index(c)
        cnt[i, j] = counts[g, c]
        means[i, j] = total / counts[g, c]
    return ComponentTable(generators, components, means, cnt, skipped, dim)


def radar_series(manifest: BenchmarkManifest, predictions: np.ndarray | None = None) -> dict[str, dict[str, float]]:
    """Per-generator mean score on every dimension (one closed polygon per generator)."""
    values = manifest.mos_matrix() if predictions is None else np.asarray(predictions, dtype=np.float64)
    out = {}
    gens = np.array([s.generator_id for s in manifest.samples])
    for g in sorted(set(gens)):
        rows = values[gens == g]
        out[g] = {d: float(np.nanmean(rows[:, k])) if (~np.isnan(rows[:, k])).any() else math.nan
                  for k, d in enumerate(manifest.dim_ids)}
    return out


def write_series(path: str | Path, series: Mapping[str, Mapping[str, float]]) -> Path:
    """Plain CSV: one row per series key, one column per inner key."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = list(next(iter(series.values())).keys()) if series else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["series", *keys])
        for name, row in series.items():
            w.writerow([name, *(row[k] for k in keys)])
    return path
