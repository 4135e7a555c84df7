"""Command-line entry points.

Exit status: 0 success, 1 domain or validation error, 2 usage or parse error.
Relative run directories are placed under ``$T23DQA_RUN_ROOT`` when it is set.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .benchmark import (ManifestError, ManifestParseError, load_manifest, load_view,
                        validate_manifest, _parse_manifest)
from .encoders import make_backend
from .evaluation import (DIMENSION_MAPPINGS, component_report, cross_benchmark, cross_validate,
                         evaluate_model, radar_series, write_series)
from .model import FeatureStore, predict
from .trainer import (Checkpoint, CheckpointError, TrainConfig, TrainingError, load_model, select_checkpoint,
                      train_stage1, train_stage2)

log = logging.getLogger("t23dqa")

RUN_ROOT_ENV = "T23DQA_RUN_ROOT"


class UsageError(Exception):
    pass


class DomainError(Exception):
    pass


@dataclass
class RunConfig:
    """Run configuration file (JSON).

    Top-level keys: ``manifest`` (path, relative to the config file), ``run_dir``
    (default ``"run"``), ``backend`` (``{"name": ..., "kwargs": {...}}``, default the hash
    test backend), ``eval`` (``{"k": 5, "seed": 0, "fit": true}``) and any
    :class:`TrainConfig` field. Unknown keys are rejected.
    """

    manifest: Path
    run_dir: Path = Path("run")
    backend: dict = field(default_factory=lambda: {"name": "hash", "kwargs": {}})
    eval: dict = field(default_factory=lambda: {"k": 5, "seed": 0, "fit": True})
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot parse config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise UsageError(f"config {path}: top level must be an object")
        return cls.from_dict(doc, path.parent)

    @classmethod
    def from_dict(cls, doc: dict, base: Path = Path(".")) -> "RunConfig":
        doc = dict(doc)
        if "manifest" not in doc:
            raise UsageError("config needs a 'manifest' entry")
        manifest = base / doc.pop("manifest")
        run_dir = Path(doc.pop("run_dir", "run"))
        backend = doc.pop("backend", {"name": "hash", "kwargs": {}})
        if isinstance(backend, str):
            backend = {"name": backend, "kwargs": {}}
        if set(backend) - {"name", "kwargs"}:
            raise UsageError(f"unknown backend key(s): {sorted(set(backend) - {'name', 'kwargs'})}")
        ev = {"k": 5, "seed": 0, "fit": True}
        given = doc.pop("eval", None) or {}
        if set(given) - set(ev):
            raise UsageError(f"unknown eval key(s): {sorted(set(given) - set(ev))}")
        ev.update(given)
        try:
            train = TrainConfig.from_dict(doc)
        except (TypeError, ValueError) as exc:
            raise UsageError(str(exc)) from exc
        return cls(manifest=manifest, run_dir=run_dir, backend=backend, eval=ev, train=train)


def _run_dir(path: Path) -> Path:
    root = os.environ.get(RUN_ROOT_ENV)
    return Path(root) / path if root and not path.is_absolute() else path


def _load_manifest(path: str | Path, check_files: bool = True):
    try:
        return load_manifest(path, check_files=check_files)
    except ManifestParseError as exc:
        raise UsageError(str(exc)) from exc
    except ManifestError as exc:
        raise DomainError("\n".join(exc.errors)) from exc


def _load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        return select_checkpoint(path) if path.is_dir() else Checkpoint.load(path)
    except FileNotFoundError as exc:
        raise DomainError(str(exc)) from exc
    except CheckpointError as exc:
        raise DomainError(str(exc)) from exc


def _backend(spec: dict):
    try:
        return make_backend(spec["name"], **spec.get("kwargs", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"bad backend spec {spec}: {exc}") from exc


def cmd_validate(args) -> int:
    path = Path(args.manifest)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot parse manifest {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"cannot parse manifest {path}: top level is not an object")
    try:
        manifest = _parse_manifest(doc, path.parent.resolve())
    except ManifestParseError as exc:
        raise UsageError(str(exc)) from exc
    errors = validate_manifest(manifest, check_files=not args.no_files)
    for e in errors:
        print(e)
    if errors:
        print(f"{len(errors)} problem(s) found")
        return 1
    print(f"{len(manifest.samples)} samples OK ({len(manifest.prompt_ids)} prompts, "
          f"{len(manifest.dimensions)} dimensions, {manifest.n_views} views)")
    return 0


def cmd_synth(args) -> int:
    from .synthetic import generate_synthetic_benchmark
    manifest, _ = generate_synthetic_benchmark(args.out, n_prompts=args.prompts, n_generators=args.generators,
                                               n_views=args.views, noise_sd=args.noise, seed=args.seed,
                                               image_size=args.size)
    print(f"wrote {len(manifest.samples)} samples to {Path(args.out) / 'manifest.json'}")
    return 0


def _apply_overrides(cfg: RunConfig, overrides: Sequence[str]) -> RunConfig:
    if not overrides:
        return cfg
    d = cfg.train.to_dict()
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or key not in d:
            raise UsageError(f"bad override {item!r} (expected <train option>=<json value>)")
        try:
            d[key] = json.loads(value)
        except json.JSONDecodeError:
            d[key] = value
    try:
        return dataclasses.replace(cfg, train=TrainConfig.from_dict(d))
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    cfg = _apply_overrides(RunConfig.from_file(args.config), args.set)
    train_cfg = cfg.train
    if args.stage2_only:
        train_cfg = dataclasses.replace(train_cfg, stage2_only=True)
    manifest = _load_manifest(cfg.manifest)
    run_dir = _run_dir(Path(args.run_dir) if args.run_dir else cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    backend = _backend(cfg.backend)
    store = FeatureStore(backend)
    try:
        if train_cfg.stage2_only:
            start = _load_checkpoint(args.start) if args.start else None
            if start is not None and start.stage != 1:
                raise DomainError("--start must be a stage-1 checkpoint")
            cfg2 = dataclasses.replace(train_cfg, stage2_only=start is None)
            (run_dir / "config.json").write_text(json.dumps(cfg2.to_dict(), indent=1) + "\n")
            result = train_stage2(manifest, cfg2, backend, start=start, run_dir=run_dir)
        else:
            resume = None
            if args.resume:
                done = sorted((run_dir / "stage1").glob("epoch_*.pt"))
                if done:
                    resume = Checkpoint.load(done[-1])
                    log.info("resuming after %s", done[-1].name)
            if resume is not None and resume.epoch + 1 >= train_cfg.stage1_epochs:
                s1_final = resume
                model = load_model(resume, backend)
            else:
                s1 = train_stage1(manifest, train_cfg, backend, run_dir=run_dir, store=store, resume=resume)
                s1_final, model = s1.final, s1.model
            result = train_stage2(manifest, train_cfg, run_dir=run_dir, model=model, store=store, start=s1_final)
    except (TrainingError, CheckpointError, ValueError) as exc:
        raise DomainError(str(exc)) from exc
    print(f"run directory: {run_dir}")
    print(f"selected: stage2/epoch_{result.best.epoch:03d}.pt (training MSE {result.best.loss:.4f})")
    return 0


def cmd_eval(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    manifest = _load_manifest(args.manifest)
    dims = args.dims.split(",") if args.dims else None
    tag = f"stage{ckpt.stage}/epoch_{ckpt.epoch:03d}"
    try:
        if args.cross_benchmark:
            mapping: dict | str = args.cross_benchmark
            if Path(args.cross_benchmark).is_file():
                mapping = json.loads(Path(args.cross_benchmark).read_text())
            elif args.cross_benchmark not in DIMENSION_MAPPINGS:
                raise DomainError(f"unknown mapping {args.cross_benchmark!r}; "
                                  f"known: {', '.join(DIMENSION_MAPPINGS)}")
            report = cross_benchmark(ckpt, manifest, mapping, dims=dims, fit=not args.no_fit)
            report.checkpoint = tag
        else:
            model = load_model(ckpt)
            report = evaluate_model(model, manifest, dims, checkpoint=tag, fit=not args.no_fit)
    except (KeyError, ValueError) as exc:
        raise DomainError(str(exc)) from exc
    print(report.table(("srcc", "krcc", "plcc")))
    if args.out:
        report.save(args.out)
    return 0


def cmd_score(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    model = load_model(ckpt)
    view_dir = Path(args.views)
    if not view_dir.is_dir():
        raise DomainError(f"{view_dir} is not a directory")
    files = sorted(p for p in view_dir.iterdir() if p.suffix.lower() in {".png", ".jpg", ".jpeg", ".bmp", ".webp"})
    n_views = args.n_views
    if len(files) != n_views:
        raise DomainError(f"expected {n_views} view images in {view_dir}, found {len(files)}")
    if not args.prompt.strip():
        raise DomainError("empty prompt")
    import torch
    size = model.backend.input_resolution
    views = np.stack([load_view(p, size) for p in files])
    with torch.no_grad():
        visual = model.backend.preprocess(views)[None]
        prompt = model.backend.text_encoder(model.backend.token_embedder(args.prompt))[None]
        scores = model(visual, prompt).scores[0].double().numpy()
    record = {"prompt": args.prompt, "views": str(view_dir),
              "scores": {d: round(float(v), 6) for d, v in zip(model.dim_ids, scores)}}
    if args.json:
        print(json.dumps(record))
    else:
        for d, v in record["scores"].items():
            print(f"{d:>4}  {v:.4f}")
    return 0


def cmd_crossval(args) -> int:
    cfg = _apply_overrides(RunConfig.from_file(args.config), args.set)
    manifest = _load_manifest(cfg.manifest)
    k = args.k or cfg.eval["k"]
    folds = [int(f) for f in args.folds.split(",")] if args.folds else None
    run_root = _run_dir(Path(args.run_dir) if args.run_dir else cfg.run_dir)
    try:
        report = cross_validate(manifest, cfg.train, lambda: _backend(cfg.backend), k=k, seed=cfg.eval["seed"],
                                run_root=run_root, folds=folds, fit=cfg.eval["fit"])
    except (RuntimeError, ValueError) as exc:
        raise DomainError(str(exc)) from exc
    print(report.table())
    report.save(args.out or run_root / "report")
    return 0


def cmd_report(args) -> int:
    manifest = _load_manifest(args.manifest)
    preds = None
    if args.checkpoint:
        model = load_model(_load_checkpoint(args.checkpoint))
        if model.dim_ids != manifest.dim_ids:
            raise DomainError("checkpoint and manifest declare different dimensions")
        preds = predict(model, FeatureStore(model.backend), list(manifest.samples))
    if args.dim not in manifest.dim_ids:
        raise DomainError(f"unknown dimension {args.dim!r}")
    table = component_report(manifest, preds, dim=args.dim)
    print(table.to_text())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "components.json").write_text(json.dumps(table.to_records(), indent=1) + "\n")
        write_series(out / "radar.csv", radar_series(manifest, preds))
        write_series(out / "components.csv",
                     {g: {c: table.means[i, j] for j, c in enumerate(table.components)}
                      for i, g in enumerate(table.generators)})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="t23dqa", description="Fine-grained quality scoring for text-to-3D assets.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate", help="check a benchmark manifest")
    s.add_argument("manifest")
    s.add_argument("--no-files", action="store_true", help="skip the view-file existence check")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("synth", help="write a procedural benchmark with planted scores")
    s.add_argument("out")
    s.add_argument("--prompts", type=int, default=40)
    s.add_argument("--generators", type=int, default=5)
    s.add_argument("--views", type=int, default=6)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=64, help="rendered view size in pixels")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="two-stage training from a run config")
    s.add_argument("config")
    s.add_argument("--run-dir")
    s.add_argument("--resume", action="store_true", help="continue after the last stage-1 checkpoint")
    s.add_argument("--stage2-only", action="store_true", help="regression fine-tuning alone")
    s.add_argument("--start", help="stage-1 checkpoint to start --stage2-only from")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a training option")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint (or run directory) on a manifest")
    s.add_argument("checkpoint")
    s.add_argument("manifest")
    s.add_argument("--dims", help="comma-separated dimension ids")
    s.add_argument("--cross-benchmark", metavar="MAPPING",
                   help=f"mapping name ({', '.join(DIMENSION_MAPPINGS)}) or JSON file")
    s.add_argument("--no-fit", action="store_true", help="skip the logistic-5 fit before PLCC")
    s.add_argument("--out", help="directory for report files")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("score", help="score one asset from its rendered views")
    s.add_argument("checkpoint")
    s.add_argument("--prompt", required=True)
    s.add_argument("--views", required=True, help="directory holding the view images")
    s.add_argument("--n-views", type=int, default=6)
    s.add_argument("--json", action="store_true", help="print one JSON record")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("crossval", help="prompt-disjoint k-fold cross-validation")
    s.add_argument("config")
    s.add_argument("--k", type=int)
    s.add_argument("--folds", help="comma-separated subset of folds to run")
    s.add_argument("--run-dir")
    s.add_argument("--out")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.set_defaults(func=cmd_crossval)

    s = sub.add_parser("report", help="per-generator / per-component tables and radar data")
    s.add_argument("manifest")
    s.add_argument("--checkpoint", help="use predictions instead of MOS")
    s.add_argument("--dim", default="OQ")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
