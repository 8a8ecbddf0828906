"""Acceptance suite.

Each test checks one criterion at its stated tolerance and records a
PASS/FAIL line. The lines are printed as each test finishes (visible with
``pytest -s``) and repeated in the terminal summary.
"""

import itertools
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from taskcal.calibrate import Calibrator, deserialize, fit, serialize
from taskcal.core import Dataset, answer_abstain_space, categorical_space, ordinal_space, product_space
from taskcal.decision import argmax_policy_batch, bayes_risks, group_by_mbr_action, mbr_decode, mbr_decode_batch
from taskcal.harness import generate_synthetic
from taskcal.losses import LossSpec, build_loss_matrix
from taskcal.metrics import TceBinConfig, divergence, divergences, expected_task_loss, tce_binned

from instances import LOSS_KINDS, random_belief, random_task
from oracles import exhaustive_mbr, weighted_median

ACCEPTANCE_RESULTS: list[str] = []


def record(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] AC{number:<2} {title}: {detail}"
    ACCEPTANCE_RESULTS.append(line)
    print(line)
    assert ok, line


def _exact_loss(kind, space, t=None):
    """Loss matrix in rationals, built independently from the package."""
    C = space.n_classes
    if kind == "exact_match":
        return [[int(a != b) for b in range(C)] for a in range(C)]
    if kind == "l1":
        v = [Fraction(x) for x in space.values]
        return [[abs(v[a] - v[b]) for b in range(C)] for a in range(C)]
    if kind == "separable_l1":
        return [[sum(abs(Fraction(x) - Fraction(y)) for x, y in zip(space.values[a], space.values[b]))
                 for b in range(C)] for a in range(C)]
    if kind == "bas":
        return [[-1, 0], [t / (1 - t), 0]]
    raise ValueError(kind)


def _exact_belief(rng, C):
    """``(float belief, exact belief)``; half the draws sit on a rational grid."""
    if rng.random() < 0.5:
        q = rng.dirichlet(np.ones(C))
        return q, [Fraction(float(x)) for x in q]
    w = [int(x) for x in rng.integers(0, 6, size=C)]
    if sum(w) == 0:
        w[int(rng.integers(C))] = 1
    exact = [Fraction(x, sum(w)) for x in w]
    return np.array([float(x) for x in exact]), exact


def test_ac01_mbr_oracle_equivalence():
    rng = np.random.default_rng(101)
    agree, total, kinds, sizes = 0, 1000, set(), set()
    start = time.perf_counter()
    for i in range(total):
        kind = LOSS_KINDS[i % 4]
        space, L = random_task(rng, kind)
        t = Fraction(round(L.t * 20), 20) if kind == "bas" else None
        q, q_exact = _exact_belief(rng, space.n_classes)
        kinds.add(kind)
        sizes.add(space.n_classes)
        agree += mbr_decode(q, L) == exhaustive_mbr(q_exact, _exact_loss(kind, space, t))
    elapsed = time.perf_counter() - start
    ok = agree == total and elapsed < 5.0 and kinds == set(LOSS_KINDS) and sizes == set(range(2, 9))
    record(1, "MBR oracle equivalence", ok,
           f"{agree}/{total} agree, C in {sorted(sizes)}, {elapsed:.2f} s (< 5 s)")


def test_ac02_weighted_median_equivalence():
    rng = np.random.default_rng(102)
    ordinal_ok = 0
    for _ in range(1000):
        C = int(rng.integers(2, 9))
        values = np.sort(rng.choice(np.arange(-50, 50), size=C, replace=False))
        L = build_loss_matrix(ordinal_space(values), LossSpec("l1"))
        q = rng.dirichlet(np.ones(C) * rng.choice([0.3, 1.0, 3.0]))
        ordinal_ok += ordinal_space(values).values[mbr_decode(q, L)] == weighted_median(values, q)
    product_ok = 0
    for _ in range(500):
        shape = [int(s) for s in rng.integers(2, 5, size=int(rng.integers(2, 4)))]
        factors = [ordinal_space(np.sort(rng.choice(np.arange(-9, 10), size=s, replace=False))) for s in shape]
        space = product_space(factors)
        L = build_loss_matrix(space, LossSpec("separable_l1"))
        q = rng.dirichlet(np.ones(space.n_classes))
        joint = space.values[mbr_decode(q, L)]
        marginal = []
        for f, fac in enumerate(factors):
            w = [Fraction(0)] * len(fac.values)
            for idx, val in enumerate(space.values):
                w[fac.values.index(val[f])] += Fraction(float(q[idx]))
            marginal.append(weighted_median(fac.values, w))
        product_ok += tuple(joint) == tuple(marginal)
    ok = ordinal_ok == 1000 and product_ok == 500
    record(2, "weighted-median equivalence", ok,
           f"ordinal {ordinal_ok}/1000, separable product {product_ok}/500")


def test_ac03_bas_threshold_equivalence():
    space = answer_abstain_space()
    k = np.arange(1001)
    p = k / 1000
    Q = np.c_[p, 1 - p]
    mismatches, boundary_checked = 0, 0
    for j in range(20):
        L = build_loss_matrix(space, LossSpec("bas", j / 20))
        got = mbr_decode_batch(Q, L)
        want = np.where(k * 20 >= j * 1000, 0, 1)  # p_A >= t in integers
        mismatches += int(np.sum(got != want))
        boundary_checked += int(np.sum(k * 20 == j * 1000))
    entry = build_loss_matrix(space, LossSpec("bas", 0.25)).entries[1, 0]
    ok = mismatches == 0 and boundary_checked == 20 and entry == 1 / 3
    record(3, "BAS threshold equivalence", ok,
           f"{mismatches} mismatches over 1001 x 20 grid, {boundary_checked} exact boundary points, "
           f"d(abstain, A) at t=0.25 is {float(entry)!r}")


def test_ac04_calibrator_identities():
    rng = np.random.default_rng(104)
    dev = 0.0
    for C in (2, 3, 5, 8):
        Q = rng.dirichlet(np.ones(C), size=250)
        Q = np.clip(Q, 1e-6, None)
        Q /= Q.sum(axis=1, keepdims=True)
        for cal in (Calibrator.dirichlet(np.eye(C), np.zeros(C)), Calibrator.temperature(C, 0.0)):
            dev = max(dev, float(np.max(np.abs(cal.apply(Q) - Q))))
    out = Calibrator.temperature(2, math.log(2)).apply([0.9, 0.1])
    err = float(np.max(np.abs(out - [0.75, 0.25])))
    ok = dev <= 1e-8 and err <= 1e-9
    record(4, "calibrator identities", ok,
           f"max deviation on 1000 interior points {dev:.1e} (<= 1e-8), tau=2 error {err:.1e} (<= 1e-9)")


def _kl_rows(P, Q):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(P > 0, P * (np.log(P) - np.log(Q)), 0.0).sum(axis=1)


@pytest.fixture(scope="module")
def fitted_overconfident():
    ds, truth = generate_synthetic(5000, 3, "overconfident", seed=0)
    start = time.perf_counter()
    cal = fit(ds, "dirichlet")
    return ds, truth, cal, time.perf_counter() - start


def test_ac05_fit_recovery(fitted_overconfident):
    ds, truth, cal, elapsed = fitted_overconfident
    kl = float(np.mean(_kl_rows(truth.true_probs, cal.apply(ds.beliefs))))
    held, _ = generate_synthetic(5000, 3, "overconfident", seed=1)
    L = build_loss_matrix(held.space, LossSpec("exact_match"))
    before = expected_task_loss(held, mbr_decode_batch(held.beliefs, L), L)
    after = expected_task_loss(held, mbr_decode_batch(cal.apply(held.beliefs), L), L)
    ok = kl <= 0.01 and after < before and elapsed < 60
    record(5, "fit recovery", ok,
           f"mean KL {kl:.2e} (<= 0.01), held-out exact-match loss {after:.4f} vs {before:.4f}, "
           f"fit {elapsed:.2f} s (< 60 s)")


def test_ac06_tce_reduction(fitted_overconfident):
    ds, _, cal, _ = fitted_overconfident
    L = build_loss_matrix(ds.space, LossSpec("exact_match"))
    bins = TceBinConfig(4)
    before = tce_binned(ds, L, bins)
    after = tce_binned(ds.with_beliefs(cal.apply(ds.beliefs)), L, bins)
    ok = after <= 0.1 * before
    record(6, "TCE reduction", ok,
           f"binned TCE {before:.4f} -> {after:.4f}, ratio {after / before:.3f} (<= 0.1), m = 4")


def test_ac07_group_optimality():
    rng = np.random.default_rng(107)
    start = time.perf_counter()
    checked = 0
    ok = True
    for kind, space in (("exact_match", categorical_space("abc")), ("l1", ordinal_space([0, 1, 2]))):
        L = build_loss_matrix(space, LossSpec(kind))
        for _ in range(5):
            counts = [rng.multinomial(12, rng.dirichlet(np.ones(3))) for _ in range(4)]
            beliefs = [rng.dirichlet(np.ones(3)) for _ in range(4)]
            Q, y, g = [], [], []
            for k in range(4):
                for c in range(3):
                    Q += [beliefs[k]] * int(counts[k][c])
                    y += [c] * int(counts[k][c])
                    g += [k] * int(counts[k][c])
            ds = Dataset.from_arrays(space, Q, y)
            g = np.array(g)
            freqs = np.array([c / c.sum() for c in counts])
            rule_mbr = mbr_decode_batch(freqs, L)
            per_rule = {r: L.entries[ds.labels, np.array(r)[g]] for r in itertools.product(range(3), repeat=4)}
            assert len(per_rule) == 81
            ok &= per_rule[tuple(rule_mbr)].mean() <= min(v.mean() for v in per_rule.values()) + 1e-12
            groups = group_by_mbr_action(ds.with_beliefs(freqs[g]), L)
            for idx in groups.values():
                ok &= per_rule[tuple(rule_mbr)][idx].mean() <= min(v[idx].mean() for v in per_rule.values()) + 1e-12
            checked += 1
    elapsed = time.perf_counter() - start
    ok = bool(ok) and elapsed < 1.0
    record(7, "MBR on exact frequencies is optimal", ok,
           f"{checked} datasets x 81 rules, overall and per action group, {elapsed:.2f} s (< 1 s)")


def test_ac08_decomposition_identity():
    rng = np.random.default_rng(108)
    worst = 0.0
    n = 0
    for kind in LOSS_KINDS:
        for _ in range(500):
            _, L = random_task(rng, kind)
            C = L.n_classes
            K = int(rng.integers(1, 7))
            w = rng.dirichlet(np.ones(K))
            P = np.array([random_belief(rng, C) for _ in range(K)])
            q = random_belief(rng, C)
            fbar = w @ P
            fbar /= fbar.sum()
            lhs = float(w @ divergences(np.tile(q, (K, 1)), P, L))
            rhs = divergence(q, fbar, L) + float(w @ divergences(np.tile(fbar, (K, 1)), P, L))
            worst = max(worst, abs(lhs - rhs))
            n += 1
    record(8, "decomposition identity", worst <= 1e-9,
           f"{n} mixtures over {len(LOSS_KINDS)} loss kinds, max |LHS - RHS| {worst:.1e} (<= 1e-9)")


def test_ac09_divergence_properties():
    rng = np.random.default_rng(109)
    negatives, nonzero_self = 0, 0
    for i in range(10000):
        _, L = random_task(rng, LOSS_KINDS[i % 4])
        C = L.n_classes
        q, r = random_belief(rng, C), random_belief(rng, C)
        negatives += divergence(q, r, L) < 0
        nonzero_self += divergence(q, q, L) != 0
    bas = build_loss_matrix(answer_abstain_space(), LossSpec("bas", 0.25))
    worked = divergence((0.2, 0.8), (0.5, 0.5), bas)
    ok = negatives == 0 and nonzero_self == 0 and abs(worked - 1 / 3) <= 1e-12
    record(9, "divergence properties", ok,
           f"{negatives} negative of 10000, {nonzero_self} nonzero self-divergences, "
           f"worked BAS value {worked:.15f}")


def test_ac10_indistinguishability():
    ds, _ = generate_synthetic(20000, 3, "calibrated", seed=10)
    L = build_loss_matrix(ds.space, LossSpec("exact_match"))
    Q = ds.beliefs
    rows = np.arange(len(ds))
    parts, ok = [], True
    for name, actions in (("mbr", mbr_decode_batch(Q, L)), ("argmax", argmax_policy_batch(Q))):
        risk = bayes_risks(Q, L)[rows, actions]
        realized = L.entries[ds.labels, actions]
        var = np.sum(Q * (L.entries[:, actions].T - risk[:, None]) ** 2, axis=1)
        se = math.sqrt(var.sum()) / len(ds)
        gap = abs(risk.mean() - realized.mean())
        ok &= gap <= 3 * se
        parts.append(f"{name} gap {gap:.4f} vs 3 SE {3 * se:.4f}")
    record(10, "indistinguishability", bool(ok), ", ".join(parts) + " (n = 20000)")


def _cli_pipeline(d):
    from taskcal.cli import main

    steps = [
        ["synth", "--n", "400", "--classes", "3", "--seed", "7", "--output", "{d}/data.jsonl",
         "--task-spec-output", "{d}/task.json", "--truth-output", "{d}/truth.jsonl"],
        ["fit", "--task-spec", "{d}/task.json", "--input", "{d}/data.jsonl", "--family", "dirichlet",
         "--max-iters", "200", "--seed", "7", "--output", "{d}/cal.json"],
        ["apply", "--calibrator", "{d}/cal.json", "--input", "{d}/data.jsonl", "--output", "{d}/applied.jsonl"],
        ["decode", "--task-spec", "{d}/task.json", "--calibrator", "{d}/cal.json", "--input", "{d}/data.jsonl",
         "--output", "{d}/decoded.jsonl"],
        ["eval", "--task-spec", "{d}/task.json", "--calibrator", "{d}/cal.json", "--input", "{d}/data.jsonl",
         "--output", "{d}/eval.json"],
        ["tce", "--task-spec", "{d}/task.json", "--input", "{d}/data.jsonl", "--estimator", "kde",
         "--output", "{d}/tce.json"],
        ["cv", "--task-spec", "{d}/task.json", "--input", "{d}/data.jsonl", "--folds", "5", "--seed", "7",
         "--max-iters", "200", "--report", "{d}/cv.json"],
    ]
    codes = [main([a.format(d=d) for a in argv]) for argv in steps]
    return codes, {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_ac11_determinism_and_serialization(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    codes_a, files_a = _cli_pipeline(tmp_path / "a")
    codes_b, files_b = _cli_pipeline(tmp_path / "b")
    cli_ok = codes_a == codes_b == [0] * 7 and files_a == files_b and len(files_a) == 9

    rng = np.random.default_rng(111)
    identical = 0
    for _ in range(100):
        C = int(rng.integers(2, 9))
        cal = Calibrator.dirichlet(rng.normal(size=(C, C)), rng.normal(size=C)) if rng.random() < 0.5 \
            else Calibrator.temperature(C, float(rng.normal()))
        q = rng.dirichlet(np.ones(C))
        identical += np.array_equal(deserialize(serialize(cal)).apply(q), cal.apply(q))
    ok = cli_ok and identical == 100
    record(11, "determinism and serialization", ok,
           f"7 CLI commands run twice, {len(files_a)} output files byte-identical: {files_a == files_b}; "
           f"round trips bit-identical {identical}/100")
