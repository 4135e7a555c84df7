import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from t23dqa.metrics import fit_logistic5, krcc, logistic5, pair_krcc, plcc, srcc

from helpers import brute_kendall_b, brute_spearman


def test_srcc_examples():
    x = np.arange(10.0)
    assert srcc(x, x) == 1.0
    assert srcc(x, -x) == -1.0
    assert srcc([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-15)
    assert math.isnan(srcc([1, 1, 1], [1, 2, 3]))


def test_krcc_examples():
    assert krcc([1, 2, 3], [1, 2, 3]) == 1.0
    assert krcc([1, 2, 3], [1, 3, 2]) == pytest.approx(1 / 3, abs=1e-15)
    assert math.isnan(krcc([1, 2, 3], [2, 2, 2]))


def test_krcc_tau_b_with_ties():
    x = [1, 2, 2, 3, 4]
    y = [1, 3, 2, 2, 5]
    # 10 pairs; ties in x: 1, ties in y: 1; concordant 7, discordant 1 by enumeration
    assert krcc(x, y) == pytest.approx((7 - 1) / math.sqrt(9 * 9), abs=1e-15)


def test_pair_krcc_mask():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    y = np.array([1.0, 3.0, 2.0, 4.0])
    mask = np.zeros((4, 4), dtype=bool)
    mask[1, 2] = True
    assert pair_krcc(x, y, mask) == -1.0
    assert math.isnan(pair_krcc(x, y, np.zeros((4, 4), dtype=bool)))


def test_brute_force_equivalence():
    rng = np.random.default_rng(0)
    for k in range(1000):
        n = int(rng.integers(3, 21))
        if k % 2:
            x, y = rng.integers(0, 5, n).astype(float), rng.integers(0, 5, n).astype(float)
        else:
            x, y = rng.standard_normal(n), rng.standard_normal(n)
        bs, bk = brute_spearman(x, y), brute_kendall_b(x, y)
        s, kk = srcc(x, y), krcc(x, y)
        assert (math.isnan(s) and math.isnan(bs)) or s == pytest.approx(bs, abs=1e-12)
        assert (math.isnan(kk) and math.isnan(bk)) or kk == pytest.approx(bk, abs=1e-12)


def test_plcc():
    assert plcc([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert math.isnan(plcc([1, 1], [1, 2]))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(3, 40), a=st.floats(0.1, 5), b=st.floats(-3, 3))
def test_invariance_under_increasing_maps(seed, n, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal(n), rng.standard_normal(n)
    for f in (lambda v: a * v + b, np.exp, lambda v: v ** 3 + v, lambda v: np.arctan(a * v)):
        fx = f(x)
        if len(np.unique(fx)) < len(np.unique(x)):
            continue  # map collapsed values numerically
        assert srcc(fx, y) == pytest.approx(srcc(x, y), abs=1e-12)
        assert krcc(fx, y) == pytest.approx(krcc(x, y), abs=1e-12)


def test_logistic_identity_fit():
    mos = np.linspace(1, 5, 30)
    fit = fit_logistic5(mos, mos)
    assert fit.converged
    assert np.max(np.abs(fit(mos) - mos)) <= 1e-6 or fit.residual <= 1e-6


def test_logistic_affine_recovery():
    mos = np.random.default_rng(1).uniform(1, 5, 50)
    pred = 2 * mos + 1
    fit = fit_logistic5(pred, mos)
    assert fit.converged
    assert plcc(fit(pred), mos) >= 0.999999


def test_logistic_improves_linearity():
    mos = np.random.default_rng(2).uniform(1, 5, 60)
    pred = mos ** 3
    fit = fit_logistic5(pred, mos)
    assert plcc(fit(pred), mos) >= plcc(pred, mos)


def test_logistic_initialisation_and_form():
    assert logistic5(0.0, 2.0, 1.0, 0.0, 0.0, 3.0) == pytest.approx(3.0)
    # b1 (1/2 - 1/(1+exp(b2 (x-b3)))) + b4 x + b5, checked at a generic point
    x, b = 0.7, (1.5, 2.0, 0.2, 0.3, -1.0)
    ref = b[0] * (0.5 - 1 / (1 + math.exp(b[1] * (x - b[2])))) + b[3] * x + b[4]
    assert logistic5(x, *b) == pytest.approx(ref, abs=1e-15)
    with pytest.raises(ValueError):
        fit_logistic5([1, 2, 3, 4], [1, 2, 3, 4])


def test_logistic_nonconvergence_flag():
    pred = np.array([1.0, 1.0, 1.0, 1.0, 1.0, 2.0])
    mos = np.array([5.0, 1.0, 4.0, 2.0, 3.0, 1.0])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = fit_logistic5(pred, mos, maxfev=5)
    assert not fit.converged
    assert np.array_equal(fit(pred), pred)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_monotone_fit_preserves_rank_statistics(seed):
    rng = np.random.default_rng(seed)
    mos = rng.uniform(1, 5, 40)
    pred = mos + rng.normal(0, 0.5, 40)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = fit_logistic5(pred, mos)
    if fit.is_monotone(pred.min(), pred.max()):
        mapped = fit(pred)
        if len(np.unique(mapped)) == len(np.unique(pred)):
            assert srcc(mapped, mos) == pytest.approx(srcc(pred, mos), abs=1e-12)
            assert krcc(mapped, mos) == pytest.approx(krcc(pred, mos), abs=1e-12)
