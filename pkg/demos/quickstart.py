"""Synthesise a small benchmark, train on four folds' prompts and score the held-out ones.

Runs in about a minute on one CPU:

    python3 demos/quickstart.py [out_dir]
"""

import sys
import tempfile
from pathlib import Path

import torch

from t23dqa.benchmark import make_fold_plan
from t23dqa.encoders import make_test_backend
from t23dqa.evaluation import component_report, evaluate_model
from t23dqa.model import FeatureStore, predict
from t23dqa.synthetic import generate_synthetic_benchmark
from t23dqa.trainer import TrainConfig, train


def main(out: Path) -> None:
    torch.set_num_threads(1)
    manifest, planted = generate_synthetic_benchmark(out / "bench", n_prompts=20, n_generators=4, seed=0)
    print(f"{len(manifest.samples)} samples, {len(manifest.prompt_ids)} prompts, dims {manifest.dim_ids}")

    train_set, test_set = make_fold_plan(manifest, k=5, seed=0).split(manifest, 0)
    backend = make_test_backend(32, (4, 4), input_resolution=64, visual_hidden=64, text_gain=0.5)
    cfg = TrainConfig(stage1_epochs=15, stage2_epochs=5, batch_size=4, lr_visual=3e-3, lr_other=3e-3)
    s1, s2 = train(train_set, cfg, backend, run_dir=out / "run")

    print("\ncurriculum trace (epoch, prompts per batch, score gap, consistency, monitor SRCC):")
    for rec in s1.trace:
        print(f"  {rec['t']:2d}  n_p={rec['n_p']}  eta={rec['eta']:.1f}  rho={rec['rho']:.2f}  s_t={rec['s_t']:.3f}")

    report = evaluate_model(s2.model, test_set, checkpoint="stage2 final")
    print("\nheld-out prompts:")
    print(report.table(("srcc", "krcc", "plcc")))

    preds = predict(s2.model, FeatureStore(backend), list(test_set.samples))
    print()
    print(component_report(test_set, preds).to_text())


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="t23dqa_")))
