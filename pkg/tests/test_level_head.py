import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from t23dqa.benchmark import standard_dimensions
from t23dqa.encoders import make_test_backend
from t23dqa.level_head import LevelBank, build_level_prompts, level_features, score, score_batch

from helpers import loop_score

Q = torch.tensor([5.0, 4.0, 3.0, 2.0, 1.0], dtype=torch.float64)


def test_middle_split_k12(tiny_backend):
    bank = LevelBank(tiny_backend.embed_width, n_context=12, insertion="middle")
    seqs = build_level_prompts(tiny_backend, bank, "object alignment")
    assert len(seqs) == 5
    good = seqs[1]
    cls = tiny_backend.embed_words(tiny_backend.tokenize("good object alignment"))
    sot, eot = tiny_backend.special_embeddings()
    assert good.shape[0] == 1 + 6 + 3 + 6 + 1
    assert torch.equal(good[0], sot[0]) and torch.equal(good[-1], eot[0])
    assert torch.equal(good[1:7], bank.context[:6].detach())
    assert torch.equal(good[7:10], cls)
    assert torch.equal(good[10:16], bank.context[6:].detach())


def test_odd_k_middle_puts_extra_before(tiny_backend):
    bank = LevelBank(tiny_backend.embed_width, n_context=5, insertion="middle")
    seq = build_level_prompts(tiny_backend, bank, "geometry logic")[0]
    assert torch.equal(seq[1:4], bank.context[:3].detach())
    assert torch.equal(seq[-3:-1], bank.context[3:].detach())


def test_begin_and_end(tiny_backend):
    for insertion, k in (("begin", 1), ("end", 4)):
        bank = LevelBank(tiny_backend.embed_width, n_context=k, insertion=insertion)
        seq = build_level_prompts(tiny_backend, bank, "overall quality")[2]
        cls = tiny_backend.embed_words(tiny_backend.tokenize("fair overall quality"))
        if insertion == "begin":
            assert torch.equal(seq[1:1 + k], bank.context.detach())
            assert torch.equal(seq[1 + k:-1], cls)
        else:
            assert torch.equal(seq[1:1 + cls.shape[0]], cls)
            assert torch.equal(seq[-1 - k:-1], bank.context.detach())


def test_token_limit(tiny_backend):
    bank = LevelBank(tiny_backend.embed_width, n_context=80)
    with pytest.raises(ValueError, match="limit"):
        build_level_prompts(tiny_backend, bank, "object alignment")


def test_bank_validation():
    with pytest.raises(ValueError):
        LevelBank(4, adjectives=("a", "b"), q=(1.0,))
    with pytest.raises(ValueError):
        LevelBank(4, q=(5, 4, 4, 2, 1))
    with pytest.raises(ValueError):
        LevelBank(4, n_context=0)
    with pytest.raises(ValueError):
        LevelBank(4, insertion="side")


def test_q_remap():
    bank = LevelBank(4)
    assert torch.allclose(bank.q_for_range(0.0, 10.0), torch.tensor([10.0, 7.5, 5.0, 2.5, 0.0]))
    assert torch.allclose(bank.q_for_range(1.0, 5.0), bank.q)


def test_level_features_shape_and_cache():
    b = make_test_backend(512, (2, 2))
    bank = LevelBank(b.embed_width)
    dims = standard_dimensions()
    with torch.no_grad():
        a = level_features(b, bank, dims)
        again = level_features(b, bank, dims)
    assert a.shape == (12, 5, 512)
    assert again is a
    with torch.no_grad():
        bank.context.add_(0.01)
        changed = level_features(b, bank, dims)
    assert not torch.equal(changed, a)


def test_level_rows_distinct(tiny_backend):
    bank = LevelBank(tiny_backend.embed_width)
    with torch.no_grad():
        f = level_features(tiny_backend, bank, standard_dimensions(["OQ"]))[0]
    for i in range(5):
        for j in range(i + 1, 5):
            assert not torch.allclose(f[i], f[j])


def test_gradient_reaches_context_only(tiny_backend):
    tiny_backend.freeze_text(True)
    bank = LevelBank(tiny_backend.embed_width)
    f = level_features(tiny_backend, bank, standard_dimensions(["OA", "GL"]))
    f.sum().backward()
    assert bank.context.grad is not None and bank.context.grad.abs().sum() > 0
    assert all(p.grad is None for p in tiny_backend.text_parameters())


def test_fixed_template_mode(tiny_backend):
    bank = LevelBank(tiny_backend.embed_width, learnable=False)
    seq = build_level_prompts(tiny_backend, bank, "object alignment")[0]
    n_template = len(tiny_backend.tokenize("the quality of this image is"))
    assert seq.shape[0] == 2 + n_template + 3
    assert not bank.context.requires_grad


def test_uniform_cosine_gives_mean():
    F_L = torch.eye(5, 6, dtype=torch.float64)
    F_M = torch.tensor([0, 0, 0, 0, 0, 1.0], dtype=torch.float64)
    s, p = score(F_M, F_L, Q, 10.0)
    assert s.item() == 3.0
    assert torch.allclose(p, torch.full((5,), 0.2, dtype=torch.float64))


def test_large_inv_temp_goes_to_top_level():
    F_L = torch.eye(5, dtype=torch.float64)
    F_M = torch.tensor([1.0, 0.5, 0.2, 0.1, 0.0], dtype=torch.float64)
    s, _ = score(F_M, F_L, Q, 1e4)
    assert abs(s.item() - 5.0) < 1e-9


def _features_with_cosines(cos, width=6):
    """Unit level rows and a unit fused vector with prescribed cosines."""
    cos = np.asarray(cos, dtype=np.float64)
    f_m = np.zeros(width)
    f_m[0] = 1.0
    rows = []
    rng = np.random.default_rng(0)
    for c in cos:
        perp = rng.standard_normal(width - 1)
        perp /= np.linalg.norm(perp)
        rows.append(np.concatenate([[c], math.sqrt(1 - c * c) * perp]))
    return torch.tensor(f_m), torch.tensor(np.array(rows))


def test_hand_rolled_oracle():
    cos = [0.9, 0.5, 0.1, -0.3, -0.7]
    F_M, F_L = _features_with_cosines(cos)
    s, p = score(F_M, F_L, Q, 10.0)
    ref, ref_p = loop_score(cos, [5, 4, 3, 2, 1], 10.0)
    assert abs(s.item() - ref) < 1e-9
    assert np.allclose(p.numpy(), ref_p, atol=1e-12)
    # frozen value of the oracle
    assert abs(ref - 4.9813) < 1e-3


def test_degenerate_and_bad_temperature():
    F_L = torch.eye(5, dtype=torch.float64)
    with pytest.raises(ValueError, match="degenerate"):
        score(torch.zeros(5, dtype=torch.float64), F_L, Q)
    with pytest.raises(ValueError):
        score(torch.ones(5, dtype=torch.float64), F_L, Q, 0.0)
    with pytest.raises(ValueError, match="degenerate"):
        score_batch(torch.zeros(1, 1, 5, dtype=torch.float64), F_L[None], Q)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), c=st.floats(1e-3, 1e3), inv_temp=st.floats(0.1, 50.0))
def test_range_and_scale_invariance(seed, c, inv_temp):
    g = torch.Generator().manual_seed(seed)
    F_M = torch.randn(7, generator=g, dtype=torch.float64)
    F_L = torch.randn(5, 7, generator=g, dtype=torch.float64)
    s, p = score(F_M, F_L, Q, inv_temp)
    assert 1.0 <= s.item() <= 5.0
    assert abs(p.sum().item() - 1) < 1e-12 and (p >= 0).all()
    s2, _ = score(c * F_M, F_L, Q, inv_temp)
    assert abs(s.item() - s2.item()) < 1e-9


@settings(max_examples=40, deadline=None)
@given(cos=st.lists(st.floats(-0.95, 0.95), min_size=5, max_size=5), level=st.integers(0, 4),
       bump=st.floats(0.01, 0.5))
def test_monotone_towards_raised_level(cos, level, bump):
    base, _ = loop_score(cos, [5, 4, 3, 2, 1], 10.0)
    F_M, F_L = _features_with_cosines(cos)
    s0, _ = score(F_M, F_L, Q, 10.0)
    raised = list(cos)
    raised[level] = min(raised[level] + bump, 0.999)
    F_M, F_L = _features_with_cosines(raised)
    s1, _ = score(F_M, F_L, Q, 10.0)
    target = 5 - level
    assert abs(s0.item() - base) < 1e-9
    assert abs(s1.item() - target) <= abs(s0.item() - target) + 1e-12


def test_batched_matches_single():
    g = torch.Generator().manual_seed(3)
    F_M = torch.randn(4, 3, 6, generator=g, dtype=torch.float64)
    F_L = torch.randn(3, 5, 6, generator=g, dtype=torch.float64)
    scores, probs = score_batch(F_M, F_L, Q, 7.0)
    for b in range(4):
        for d in range(3):
            s, p = score(F_M[b, d], F_L[d], Q, 7.0)
            assert abs(scores[b, d].item() - s.item()) < 1e-12
            assert torch.allclose(probs[b, d], p, atol=1e-12)
