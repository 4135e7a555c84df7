"""Two-stage training: curriculum-scheduled ranking + contrastive regression, then MSE.

Run directory layout (all paths stable)::

    run_dir/config.json           training configuration snapshot
    run_dir/trace.jsonl           one curriculum record per stage-1 epoch
    run_dir/stage1/epoch_000.pt   per-epoch checkpoints
    run_dir/stage2/epoch_000.pt
    run_dir/selected.json         marker naming the checkpoint chosen for evaluation
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .benchmark import BenchmarkManifest, QualityDimension
from .curriculum import (NoEligiblePairs, consistency_threshold, initial_state, monitor_krcc, monitor_srcc,
                         sample_batch, update_prompt_count, update_score_threshold)
from .encoders import EncoderBackend, make_backend
from .losses import mse_loss, stage1_loss
from .model import FeatureStore, QualityModel, predict

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    stage1_epochs: int = 40
    stage2_epochs: int = 10
    batch_size: int = 8
    theta: float = 0.5
    tau: float = 2.0
    lam: float = 1.0
    epsilon: float = 1e-2
    lr_visual: float = 2e-6
    lr_other: float = 3e-4
    lr_decay: float = 0.9
    lr_decay_every: int = 5
    weight_decay: float = 1e-4
    seed: int = 0
    # curriculum switches; all False reproduces the single-prompt baseline
    prompt_count: bool = True
    score_gap: bool = True
    dim_consistency: bool = True
    rho_mode: str = "mirrored"
    strict_contrastive: bool = False
    monitor_size: int = 500
    stage2_only: bool = False
    # model
    n_context: int = 12
    insertion: str = "middle"
    learnable_levels: bool = True
    fusion_mode: str = "concat"
    attn_scaled: bool = False
    inv_temp: float | None = 10.0
    learn_inv_temp: bool = True

    def __post_init__(self):
        if min(self.lr_visual, self.lr_other) <= 0:
            raise ValueError("learning rates must be > 0")
        if self.stage1_epochs < 1 or self.stage2_epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training option(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    def model_kwargs(self) -> dict:
        return {"n_context": self.n_context, "insertion": self.insertion,
                "learnable_levels": self.learnable_levels, "fusion_mode": self.fusion_mode,
                "attn_scaled": self.attn_scaled, "inv_temp": self.inv_temp,
                "learn_inv_temp": self.learn_inv_temp, "seed": self.seed}


@dataclass
class Checkpoint:
    stage: int
    epoch: int
    loss: float
    model_state: dict
    model_config: dict
    backend_spec: dict
    dimensions: list[dict]
    config: dict
    trace: list[dict] = field(default_factory=list)
    train_state: dict | None = None
    format_version: int = FORMAT_VERSION

    def to_payload(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.to_payload(), path)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        try:
            payload = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:  # torch raises several unrelated types for garbage input
            raise CheckpointError(f"{path}: not a checkpoint file (expected format-version "
                                  f"{FORMAT_VERSION}): {exc.__class__.__name__}") from exc
        if not isinstance(payload, dict) or "format_version" not in payload:
            raise CheckpointError(f"{path}: missing format-version field")
        if payload["format_version"] != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format-version {payload['format_version']} "
                                  f"(expected {FORMAT_VERSION})")
        return cls(**payload)


def build_model(backend: EncoderBackend, dimensions: Sequence[QualityDimension], config: TrainConfig,
                score_range: tuple[float, float] = (1.0, 5.0)) -> QualityModel:
    return QualityModel(backend, dimensions, score_range=score_range, **config.model_kwargs())


def load_model(ckpt: Checkpoint, backend: EncoderBackend | None = None) -> QualityModel:
    """Rebuild the model stored in ``ckpt`` (the backend is rebuilt from its spec unless given)."""
    if backend is None:
        backend = make_backend(ckpt.backend_spec["name"], **ckpt.backend_spec["kwargs"])
    dims = [QualityDimension.from_dict(d) for d in ckpt.dimensions]
    model = QualityModel(backend, dims, **ckpt.model_config)
    model.load_state_dict(ckpt.model_state)
    return model


def parameter_digest(params: Iterable[torch.Tensor]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def frozen_digests(model: QualityModel) -> dict[str, str]:
    return {"text_encoder": parameter_digest(model.backend.text_parameters()),
            "level_bank": parameter_digest(model.level_parameters())}


def _make_checkpoint(model: QualityModel, config: TrainConfig, stage: int, epoch: int, loss: float,
                     trace: list[dict]) -> Checkpoint:
    model_config = dict(config.model_kwargs(), score_range=list(model.score_range),
                        adjectives=list(model.levels.adjectives), q=model.levels.q.tolist())
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return Checkpoint(stage=stage, epoch=epoch, loss=float(loss), model_state=state, model_config=model_config,
                      backend_spec=model.backend.spec(), dimensions=[d.to_dict() for d in model.dimensions],
                      config=config.to_dict(), trace=[dict(r) for r in trace])


def _optimizer(model: QualityModel, config: TrainConfig):
    visual = [p for p in model.backend.visual_parameters() if p.requires_grad]
    visual_ids = {id(p) for p in visual}
    other = [p for p in model.parameters() if p.requires_grad and id(p) not in visual_ids]
    groups = [g for g in ({"params": visual, "lr": config.lr_visual},
                          {"params": other, "lr": config.lr_other}) if g["params"]]
    opt = torch.optim.Adam(groups, weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=config.lr_decay_every, gamma=config.lr_decay)
    return opt, sched


def scheduled_lr(base: float, epoch: int, decay: float = 0.9, every: int = 5) -> float:
    return base * decay ** (epoch // every)


@dataclass
class StageResult:
    model: QualityModel
    final: Checkpoint
    best: Checkpoint
    trace: list[dict]
    digests_before: dict[str, str]
    digests_after: dict[str, str]
    losses: list[float]
    lr_history: list[list[float]] = field(default_factory=list)


def _write_trace(run_dir: Path, trace: list[dict]) -> None:
    with open(run_dir / "trace.jsonl", "w") as fh:
        for rec in trace:
            fh.write(json.dumps(rec) + "\n")


def train_stage1(manifest: BenchmarkManifest, config: TrainConfig, backend: EncoderBackend | None = None,
                 run_dir: str | Path | None = None, model: QualityModel | None = None,
                 store: FeatureStore | None = None, resume: Checkpoint | None = None) -> StageResult:
    """Stage 1: ranking hinge + contrastive regression under the curriculum schedules.

    The text encoder stays frozen throughout; the returned ``final`` checkpoint is the
    last epoch (it seeds stage 2). ``resume`` continues an interrupted run from one of
    its stage-1 checkpoints, reproducing the uninterrupted run exactly.
    """
    torch.manual_seed(config.seed)
    if resume is not None:
        if resume.stage != 1 or resume.train_state is None:
            raise CheckpointError("resuming needs a stage-1 checkpoint with optimizer state")
        model = load_model(resume, backend)
    elif model is None:
        model = build_model(backend, manifest.dimensions, config, manifest.score_range)
    backend = model.backend
    backend.freeze_text(True)
    if model.levels.learnable:
        model.levels.context.requires_grad_(True)
    store = store or FeatureStore(backend)
    samples = list(manifest.samples)
    mos = np.stack([s.mos_array(model.dim_ids) for s in samples])
    dtype = model.q_values.dtype
    mos_t = torch.tensor(mos, dtype=dtype)
    prompt_ids = [s.prompt_id for s in samples]
    gap_column = model.dim_ids.index("OQ") if "OQ" in model.dim_ids else None

    rng = np.random.default_rng([config.seed, 1])
    mon_rng = np.random.default_rng([config.seed, 2])
    mon_idx = np.sort(mon_rng.choice(len(samples), size=min(config.monitor_size, len(samples)), replace=False))
    mon_samples = [samples[i] for i in mon_idx]
    mon_mos = mos[mon_idx]

    opt, sched = _optimizer(model, config)
    horizon = config.stage1_epochs - 1
    state = initial_state(horizon, score_max=manifest.score_range[1], epsilon=config.epsilon,
                          prompt_count=config.prompt_count, score_gap=config.score_gap,
                          dim_consistency=config.dim_consistency, rho_mode=config.rho_mode)
    trace: list[dict] = []
    start_epoch = 0
    if resume is not None:
        trace = [dict(r) for r in resume.trace]
        last = trace[-1]
        state = dataclasses.replace(state, n_p=last["next_n_p"], eta=last["next_eta"], rho=last["next_rho"],
                                    srcc_history=tuple(r["s_t"] for r in trace),
                                    krcc_history=tuple(r["k_t"] for r in trace if r["k_t"] is not None))
        opt.load_state_dict(resume.train_state["optimizer"])
        sched.load_state_dict(resume.train_state["scheduler"])
        rng.bit_generator.state = json.loads(resume.train_state["rng"])
        start_epoch = resume.epoch + 1

    run_path = Path(run_dir) if run_dir is not None else None
    if run_path is not None:
        (run_path / "stage1").mkdir(parents=True, exist_ok=True)
        (run_path / "config.json").write_text(json.dumps(config.to_dict(), indent=1) + "\n")

    before = frozen_digests(model)
    n_batches = math.ceil(len(samples) / config.batch_size)
    losses, lr_history = [], []
    best = final = None
    for epoch in range(start_epoch, config.stage1_epochs):
        state = dataclasses.replace(state, epoch=epoch)
        lr_history.append([g["lr"] for g in opt.param_groups])
        epoch_loss, n_pairs = [], 0
        for _ in range(n_batches):
            pb = sample_batch(prompt_ids, mos, state, config.batch_size, rng, gap_column)
            out = model(*store.batch([samples[i] for i in pb.indices]))
            total, r, c = stage1_loss(out.scores, out.fused, mos_t[pb.indices], pb.eligible_pairs,
                                      config.theta, config.lam, config.tau, config.strict_contrastive)
            if not torch.isfinite(total):
                ids = [samples[i].sample_id for i in pb.indices]
                raise TrainingError(f"non-finite stage-1 loss at epoch {epoch}: rank={r.item()} "
                                    f"cons={c.item()} batch={ids}")
            opt.zero_grad()
            total.backward()
            opt.step()
            epoch_loss.append(total.item())
            n_pairs += len(pb.eligible_pairs)
        sched.step()

        pred = predict(model, store, mon_samples)
        s_t = monitor_srcc(pred, mon_mos)
        try:
            k_t = monitor_krcc(pred, mon_mos, state.eta, gap_column)
        except NoEligiblePairs:
            k_t = None
        mean_loss = float(np.mean(epoch_loss))
        record = {"t": epoch, "n_p": state.n_p if state.prompt_count else 1, "eta": state.eta,
                  "rho": state.rho, "s_t": s_t, "k_t": k_t, "loss": mean_loss, "pairs": n_pairs}
        if state.prompt_count:
            state = update_prompt_count(state, s_t, config.batch_size)
        else:
            state = dataclasses.replace(state, srcc_history=state.srcc_history + (s_t,))
        if state.score_gap:
            state = update_score_threshold(state, k_t)
        elif k_t is not None:
            state = dataclasses.replace(state, krcc_history=state.krcc_history + (k_t,))
        if state.dim_consistency:
            state = dataclasses.replace(state, rho=consistency_threshold(epoch + 1, horizon, state.rho_mode))
        record.update(next_n_p=state.n_p, next_eta=state.eta, next_rho=state.rho)
        trace.append(record)
        losses.append(mean_loss)
        log.info("stage1 epoch %d loss %.4f s_t %.4f n_p %d eta %.1f rho %.3f",
                 epoch, mean_loss, s_t, record["n_p"], record["eta"], record["rho"])

        final = _make_checkpoint(model, config, 1, epoch, mean_loss, trace)
        final.train_state = {"optimizer": copy.deepcopy(opt.state_dict()), "scheduler": sched.state_dict(),
                             "rng": json.dumps(rng.bit_generator.state)}
        if best is None or mean_loss < best.loss:
            best = final
        if run_path is not None:
            final.save(run_path / "stage1" / f"epoch_{epoch:03d}.pt")
            _write_trace(run_path, trace)

    after = frozen_digests(model)
    if before["text_encoder"] != after["text_encoder"]:
        raise TrainingError("text encoder changed during stage 1")
    return StageResult(model, final, best, trace, before, after, losses, lr_history)


def train_stage2(manifest: BenchmarkManifest, config: TrainConfig, backend: EncoderBackend | None = None,
                 start: Checkpoint | None = None, run_dir: str | Path | None = None,
                 model: QualityModel | None = None, store: FeatureStore | None = None) -> StageResult:
    """Stage 2: MSE fine-tuning with the text encoder and the level prompts frozen.

    ``best`` is the epoch with minimal training MSE. Without ``start``/``model`` the
    network starts from random initialisation (regression-only ablation).
    """
    torch.manual_seed(config.seed + 7919)
    if model is None:
        if start is not None:
            if start.stage != 1:
                raise ValueError("stage 2 must start from a stage-1 checkpoint")
            model = load_model(start, backend)
        else:
            if not config.stage2_only:
                raise ValueError("stage 2 needs a stage-1 start checkpoint unless stage2_only is set")
            model = build_model(backend, manifest.dimensions, config, manifest.score_range)
    backend = model.backend
    backend.freeze_text(True)
    model.levels.context.requires_grad_(False)
    store = store or FeatureStore(backend)
    samples = list(manifest.samples)
    mos_t = torch.tensor(np.stack([s.mos_array(model.dim_ids) for s in samples]), dtype=model.q_values.dtype)
    rng = np.random.default_rng([config.seed, 3])
    opt, sched = _optimizer(model, config)

    run_path = Path(run_dir) if run_dir is not None else None
    if run_path is not None:
        (run_path / "stage2").mkdir(parents=True, exist_ok=True)

    before = frozen_digests(model)
    trace = list(start.trace) if start is not None else []
    losses, lr_history = [], []
    best = final = None
    for epoch in range(config.stage2_epochs):
        lr_history.append([g["lr"] for g in opt.param_groups])
        order = rng.permutation(len(samples))
        epoch_loss = []
        for begin in range(0, len(order), config.batch_size):
            idx = order[begin:begin + config.batch_size]
            out = model(*store.batch([samples[i] for i in idx]))
            loss = mse_loss(out.scores, mos_t[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite stage-2 loss at epoch {epoch}: "
                                    f"batch={[samples[i].sample_id for i in idx]}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss.append(loss.item() * len(idx))
        sched.step()
        mean_loss = float(np.sum(epoch_loss) / len(samples))
        losses.append(mean_loss)
        log.info("stage2 epoch %d mse %.4f", epoch, mean_loss)
        final = _make_checkpoint(model, config, 2, epoch, mean_loss, trace)
        if best is None or mean_loss < best.loss:
            best = final
        if run_path is not None:
            final.save(run_path / "stage2" / f"epoch_{epoch:03d}.pt")

    after = frozen_digests(model)
    if before != after:
        raise TrainingError("frozen parameters changed during stage 2")
    if run_path is not None:
        mark = {"stage": 2, "epoch": best.epoch, "loss": best.loss,
                "path": f"stage2/epoch_{best.epoch:03d}.pt"}
        (run_path / "selected.json").write_text(json.dumps(mark, indent=1) + "\n")
    return StageResult(model, final, best, trace, before, after, losses, lr_history)


def select_checkpoint(run_dir: str | Path, stage: int | None = None) -> Checkpoint:
    """Checkpoint with minimal recorded training loss; ties go to the earliest epoch.

    ``stage=None`` prefers stage 2 when it exists.
    """
    run_dir = Path(run_dir)
    if stage is None:
        stage = 2 if list((run_dir / "stage2").glob("epoch_*.pt")) else 1
    paths = sorted((run_dir / f"stage{stage}").glob("epoch_*.pt"))
    if not paths:
        raise FileNotFoundError(f"no stage-{stage} checkpoints under {run_dir}")
    ckpts = [Checkpoint.load(p) for p in paths]
    return min(ckpts, key=lambda c: (c.loss, c.epoch))


def train(manifest: BenchmarkManifest, config: TrainConfig, backend: EncoderBackend,
          run_dir: str | Path | None = None, store: FeatureStore | None = None) -> tuple[StageResult | None, StageResult]:
    """Full pipeline (stage 1 then stage 2, or stage 2 alone when ``stage2_only``)."""
    store = store or FeatureStore(backend)
    if config.stage2_only:
        return None, train_stage2(manifest, config, backend, run_dir=run_dir, store=store)
    s1 = train_stage1(manifest, config, backend, run_dir=run_dir, store=store)
    s2 = train_stage2(manifest, config, run_dir=run_dir, model=s1.model, store=store, start=s1.final)
    return s1, s2
