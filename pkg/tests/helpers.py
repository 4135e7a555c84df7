"""Reference implementations used as test oracles.

Everything here is written as plain Python loops over scalars so that it shares no
code path with the vectorised package implementations.
"""

import math

import numpy as np
import torch


def central_diff_check(fn, params, eps=1e-6, rtol=1e-3, atol=1e-8, skip=None):
    """Compare autograd gradients of scalar ``fn()`` with central finite differences.

    ``skip(param_index, flat_index)`` may veto individual coordinates. Returns the
    worst relative error seen.
    """
    for p in params:
        p.grad = None
    loss = fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for k, (p, g) in enumerate(zip(params, grads)):
            flat = p.view(-1)
            g = torch.zeros_like(p) if g is None else g
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                if skip is not None and skip(k, i):
                    continue
                old = flat[i].item()
                flat[i] = old + eps
                up = fn().item()
                flat[i] = old - eps
                down = fn().item()
                flat[i] = old
                num = (up - down) / (2 * eps)
                ana = gflat[i].item()
                err = abs(num - ana) / max(abs(num), abs(ana), atol / rtol)
                worst = max(worst, err)
    return worst


def naive_softmax(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    s = sum(e)
    return [v / s for v in e]


def naive_rank_loss(pred, mos, pairs, theta):
    if not pairs:
        return 0.0
    total = 0.0
    for i, j in pairs:
        acc, n = 0.0, 0
        for d in range(len(mos[i])):
            si, sj = mos[i][d], mos[j][d]
            if math.isnan(si) or math.isnan(sj):
                continue
            n += 1
            if si == sj:
                continue
            sign = 1.0 if si > sj else -1.0
            acc += max(0.0, -sign * (pred[i][d] - pred[j][d]) + theta)
        total += acc / max(n, 1)
    return total / len(pairs)


def naive_cons_loss(feat, mos, tau, strict=False):
    b, n_d = len(feat), len(mos[0])

    def sim(a, c):
        return -math.sqrt(sum((x - y) ** 2 for x, y in zip(a, c)))

    total, count = 0.0, 0
    for d in range(n_d):
        for i in range(b):
            if math.isnan(mos[i][d]):
                continue
            for p in range(b):
                if p == i or math.isnan(mos[p][d]):
                    continue
                gap = abs(mos[i][d] - mos[p][d])
                denom = 0.0
                for n in range(b):
                    if n == i or math.isnan(mos[n][d]):
                        continue
                    g = abs(mos[i][d] - mos[n][d])
                    if n == p or (g > gap if strict else g >= gap):
                        denom += math.exp(sim(feat[i][d], feat[n][d]) / tau)
                num = math.exp(sim(feat[i][d], feat[p][d]) / tau)
                total += -math.log(num / denom)
                count += 1
    return total / max(count, 1)


def naive_mse(pred, mos):
    total, n = 0.0, 0
    for i in range(len(mos)):
        for d in range(len(mos[i])):
            if math.isnan(mos[i][d]):
                continue
            total += (mos[i][d] - pred[i][d]) ** 2
            n += 1
    return total / n


def brute_spearman(x, y):
    def midranks(v):
        r = []
        for a in v:
            less = sum(1 for b in v if b < a)
            equal = sum(1 for b in v if b == a)
            r.append(less + (equal + 1) / 2.0)
        return r

    rx, ry = midranks(list(x)), midranks(list(y))
    n = len(rx)
    mx, my = sum(rx) / n, sum(ry) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    sxx = sum((a - mx) ** 2 for a in rx)
    syy = sum((b - my) ** 2 for b in ry)
    if sxx == 0 or syy == 0:
        return float("nan")
    return sxy / math.sqrt(sxx * syy)


def brute_kendall_b(x, y, allowed=None):
    conc = disc = tx = ty = n0 = 0
    n = len(x)
    for i in range(n):
        for j in range(i + 1, n):
            if allowed is not None and not allowed(i, j):
                continue
            n0 += 1
            dx, dy = x[i] - x[j], y[i] - y[j]
            if dx == 0:
                tx += 1
            if dy == 0:
                ty += 1
            if dx * dy > 0:
                conc += 1
            elif dx * dy < 0:
                disc += 1
    den = math.sqrt((n0 - tx) * (n0 - ty)) if n0 else 0.0
    return float("nan") if den == 0 else (conc - disc) / den


def sign_count_consistency(a, b):
    pos = neg = 0
    for x, y in zip(a, b):
        if x > y:
            pos += 1
        elif x < y:
            neg += 1
    if pos + neg == 0:
        return 1.0
    return abs(pos - neg) / (pos + neg)


def loop_score(cosines, q, inv_temp):
    probs = naive_softmax([inv_temp * c for c in cosines])
    return sum(p * v for p, v in zip(probs, q)), probs


def random_mos(rng, n, n_d, lo=1.0, hi=5.0, thirds=True, p_nan=0.0):
    if thirds:
        m = np.round(rng.integers(3, 16, size=(n, n_d)) / 3.0, 2)
    else:
        m = rng.uniform(lo, hi, size=(n, n_d))
    if p_nan:
        m = np.where(rng.random(m.shape) < p_nan, np.nan, m)
    return m
