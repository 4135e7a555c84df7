import csv
import dataclasses
import json
import math

import numpy as np
import pandas as pd
import pytest

from t23dqa.benchmark import PromptComponents, make_fold_plan
from t23dqa.encoders import make_test_backend
from t23dqa.evaluation import (DIMENSION_MAPPINGS, EvalReport, FoldError, component_report, cross_benchmark,
                               cross_validate, dimension_stats, evaluate_model, radar_series, write_series)
from t23dqa.metrics import krcc, srcc
from t23dqa.trainer import TrainConfig, build_model


def backend():
    return make_test_backend(8, (2, 2), input_resolution=32, seed=0)


def with_dims(manifest, ids, name=None):
    keep = [d for d in manifest.dimensions if d.id in ids]
    samples = tuple(dataclasses.replace(s, mos={d: s.mos[d] for d in ids}) for s in manifest.samples)
    return dataclasses.replace(manifest, dimensions=tuple(keep), samples=samples, name=name or manifest.name)


def test_dimension_stats_matches_metrics(rng):
    mos = rng.uniform(1, 5, 30)
    pred = mos + rng.normal(0, 0.4, 30)
    mos[3] = np.nan
    st = dimension_stats(pred, mos)
    ok = ~np.isnan(mos)
    assert st["n"] == 29
    assert st["srcc"] == srcc(pred[ok], mos[ok]) and st["krcc"] == krcc(pred[ok], mos[ok])
    assert st["plcc"] >= 0.8
    raw = dimension_stats(pred, mos, fit=False)
    assert raw["fit_converged"] is False and raw["srcc"] == st["srcc"]


def test_ap_is_plain_mean(rng):
    rep = EvalReport("b", "c", ["A", "B", "C"])
    for _ in range(3):
        mos = rng.uniform(1, 5, (20, 3))
        rep.add_fold(mos + rng.normal(0, 0.5, (20, 3)), mos, fit=False)
    per_dim = [np.mean([f["srcc"][d] for f in rep.folds]) for d in "ABC"]
    assert abs(rep.ap() - np.mean(per_dim)) <= 1e-12
    assert abs(rep.fold_ap(1) - np.mean(list(rep.folds[1]["srcc"].values()))) <= 1e-12


def test_report_round_trip_and_files(rng, tmp_path):
    rep = EvalReport("bench", "ckpt", ["OVA", "OQ"])
    for _ in range(2):
        mos = rng.uniform(1, 5, (12, 2))
        rep.add_fold(mos + rng.normal(0, 0.3, (12, 2)), mos)
    back = EvalReport.from_dict(json.loads(json.dumps(rep.to_dict())))
    assert back.folds == rep.folds and back.ap() == rep.ap()
    paths = rep.save(tmp_path)
    assert {p.name for p in paths.values()} == {"report.json", "report.txt", "srcc_by_fold.csv",
                                                 "krcc_by_fold.csv", "plcc_by_fold.csv"}
    rows = list(csv.reader(open(paths["srcc"])))
    assert rows[0] == ["fold", "OVA", "OQ", "AP"] and len(rows) == 3
    assert float(rows[1][1]) == rep.folds[0]["srcc"]["OVA"]
    text = paths["txt"].read_text()
    assert "fold 1" in text and "AP" in text


def test_evaluate_model_dims(tiny_bench):
    manifest, _, _ = tiny_bench
    model = build_model(backend(), manifest.dimensions, TrainConfig())
    rep = evaluate_model(model, manifest, ["OVA", "OQ"])
    assert rep.dims == ["OVA", "OQ"] and len(rep.folds) == 1
    with pytest.raises(ValueError, match="XYZ"):
        evaluate_model(model, manifest, ["XYZ"])


def test_cross_validate_folds(tiny_bench, tmp_path):
    manifest, _, _ = tiny_bench
    cfg = TrainConfig(stage1_epochs=1, stage2_epochs=1, batch_size=3, lr_visual=1e-3, lr_other=1e-3)
    rep = cross_validate(manifest, cfg, backend, k=5, seed=0, run_root=tmp_path, fit=False)
    assert len(rep.folds) == 5
    assert sorted(p.name for p in tmp_path.iterdir()) == [f"fold_{k}" for k in range(5)]
    plan = make_fold_plan(manifest, 5, 0)
    tests = [plan.test_prompts(k) for k in range(5)]
    assert set().union(*tests) == set(manifest.prompt_ids)
    assert sum(len(t) for t in tests) == len(set(manifest.prompt_ids))
    for k in range(5):
        tr, te = plan.split(manifest, k)
        assert not set(tr.prompt_ids) & set(te.prompt_ids)


def test_cross_validate_names_failing_fold(tiny_bench):
    manifest, _, _ = tiny_bench
    cfg = TrainConfig(stage1_epochs=1, stage2_epochs=1, batch_size=4)  # more than one prompt's group
    with pytest.raises(FoldError, match=r"^fold 2: training failed"):
        cross_validate(manifest, cfg, backend, k=5, folds=[2])


def test_cross_benchmark(tiny_bench):
    manifest, _, _ = tiny_bench
    model = build_model(backend(), manifest.dimensions, TrainConfig())
    target = with_dims(manifest, ["OVA", "OQ"], name="other")
    rep = cross_benchmark(model, target, "3dgcqa")
    assert rep.dims == ["OVA", "OQ"] and rep.benchmark == "other"
    same = cross_benchmark(model, manifest, {d: d for d in manifest.dim_ids})
    direct = evaluate_model(model, manifest)
    assert same.folds == direct.folds
    # averaged sources
    merged = with_dims(manifest, ["OQ", "TC"])
    rep2 = cross_benchmark(model, merged, {"TC": ["TC", "TA"]})
    assert rep2.dims == ["TC"]
    with pytest.raises(ValueError, match="no overlapping"):
        cross_benchmark(model, with_dims(manifest, ["OQ"]), {"T": ["TC"]})
    with pytest.raises(KeyError):
        cross_benchmark(model, target, "nope")
    assert set(DIMENSION_MAPPINGS) == {"3dgcqa", "mate3d", "aigc-t23daqa"}


def test_component_report_uniform(tiny_bench):
    manifest, _, _ = tiny_bench
    pred = np.full((len(manifest.samples), len(manifest.dim_ids)), 3.25)
    table = component_report(manifest, pred)
    filled = table.means[table.counts > 0]
    assert filled.size and np.all(filled == 3.25)
    assert "3.250" in table.to_text()


def test_component_report_hand_case(tiny_bench):
    manifest, _, _ = tiny_bench
    comps = [PromptComponents("Single", "Realistic", "Basic", attribute="Mixed"),
             PromptComponents("Single", "Imaginative", "Basic", attribute="Mixed")]
    picked = [s for s in manifest.samples if s.generator_id == manifest.samples[0].generator_id][:2]
    samples = tuple(dataclasses.replace(s, components=c) for s, c in zip(picked, comps))
    small = dataclasses.replace(manifest, samples=samples)
    oq = small.dim_ids.index("OQ")
    pred = np.zeros((2, len(small.dim_ids)))
    pred[:, oq] = [2.0, 4.0]
    table = component_report(small, pred)
    assert table.generators == [picked[0].generator_id]
    got = dict(zip(table.components, table.means[0]))
    assert got == {"Single": 3.0, "Realistic": 2.0, "Basic": 3.0, "Mixed": 3.0, "Imaginative": 4.0}


def test_component_report_matches_groupby(tiny_bench, rng):
    manifest, _, _ = tiny_bench
    samples = list(manifest.samples)
    samples[0] = dataclasses.replace(samples[0], components=None)
    m = dataclasses.replace(manifest, samples=tuple(samples))
    pred = rng.uniform(1, 5, (len(samples), len(m.dim_ids)))
    table = component_report(m, pred)
    assert table.skipped == 1
    oq = m.dim_ids.index("OQ")
    rows = [{"g": s.generator_id, "c": c, "v": pred[i, oq]}
            for i, s in enumerate(samples) if s.components is not None for c in s.components.sub_components()]
    ref = pd.DataFrame(rows).groupby(["g", "c"])["v"].agg(["mean", "count"])
    for rec in table.to_records():
        if rec["count"] == 0:
            assert math.isnan(rec["mean"])
            continue
        assert abs(rec["mean"] - ref.loc[(rec["generator"], rec["component"]), "mean"]) <= 1e-12
        assert rec["count"] == ref.loc[(rec["generator"], rec["component"]), "count"]


def test_radar_series(tiny_bench, tmp_path):
    manifest, _, _ = tiny_bench
    series = radar_series(manifest)
    gens = sorted({s.generator_id for s in manifest.samples})
    assert list(series) == gens
    g0 = [s for s in manifest.samples if s.generator_id == gens[0]]
    assert series[gens[0]]["OQ"] == pytest.approx(np.mean([s.mos["OQ"] for s in g0]), abs=1e-12)
    path = write_series(tmp_path / "radar.csv", series)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["series", *manifest.dim_ids] and len(rows) == len(gens) + 1
