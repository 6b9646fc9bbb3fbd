"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v``. The two-moons
adaptation criterion trains 20 networks and takes a few minutes on one core.
"""

import struct
import time
from dataclasses import replace

import numpy as np
import pytest

from swdda import autodiff as ad
from swdda.autodiff import Tensor
from swdda.data import TruncatedPayloadError, WrongMagicError, load_idx
from swdda.models import MlpSpec, init_bundle
from swdda.ot_core import CostKind, emd_exact, sample_projections, swd, wasserstein_1d
from swdda.runner import DEFAULT_CONFIG, build_datasets, load_config, run_experiment, train_condition
from swdda.training import (
    evaluate,
    make_optimizers,
    step_max_discrepancy,
    step_min_discrepancy,
    step_source,
    target_discrepancy,
)

from helpers import brute_force_assignment_costs, central_diff, min_projected_gap, rel_err

GROUND = {CostKind.QUADRATIC: "sqeuclidean", CostKind.ABSOLUTE: "euclidean"}


@pytest.fixture
def report(capsys):
    def emit(number, title, passed, detail, seconds):
        with capsys.disabled():
            print(f"\n{'PASS' if passed else 'FAIL'} criterion {number:2d} {title}: {detail} [{seconds:.2f} s]")
        return passed
    return emit


def _instances_1d(rng, count):
    for i in range(count):
        n = int(rng.integers(1, 8))
        cost = (CostKind.QUADRATIC, CostKind.ABSOLUTE)[i % 2]
        yield rng.normal(size=n) * rng.uniform(0.1, 10), rng.normal(size=n) * rng.uniform(0.1, 10), cost


# --- 1 and 2: exact oracles ---------------------------------------------------------------

def test_criterion_1_sort_matches_exact_assignment(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst, count = 0.0, 0
    for u, v, cost in _instances_1d(rng, 240):
        fast = wasserstein_1d(u[None], v[None], cost).item()
        exact = emd_exact(u, v, GROUND[cost]).cost
        worst = max(worst, abs(fast - exact))
        count += 1
    dt = time.perf_counter() - t0
    ok = worst < 1e-9 and count >= 200 and dt < 5
    report(1, "1-D sort == exact assignment", ok, f"{count} instances, max |diff| = {worst:.2e}", dt)
    assert ok


def test_criterion_2_sorted_coupling_is_optimal(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_gain, count = -np.inf, 0
    for u, v, cost in _instances_1d(rng, 240):
        # pair by rank, then express it as a permutation of the original v
        order_u, order_v = np.argsort(u, kind="stable"), np.argsort(v, kind="stable")
        perm = np.empty(len(u), dtype=int)
        perm[order_u] = order_v
        costs = brute_force_assignment_costs(u, v, cost.value)
        sorted_cost = costs[tuple(perm)]
        # summation order differs between permutations, so compare relative to the cost
        worst_gain = max(worst_gain, (sorted_cost - min(costs.values())) / max(1.0, sorted_cost))
        count += 1
    dt = time.perf_counter() - t0
    ok = worst_gain <= 1e-12 and count >= 200 and dt < 5
    report(2, "no permutation beats the sorted coupling", ok,
           f"{count} instances, largest relative improvement over sorted = {max(worst_gain, 0.0):.2e}", dt)
    assert ok


# --- 3: gradients --------------------------------------------------------------------------

KINK = 1e-3


def _cases():
    """name -> (draw(rng) -> inputs, fn(tensors) -> Tensor, admissible(inputs))."""
    def normal(*shape):
        return lambda rng: [rng.normal(size=s) for s in shape]

    def away_from_zero(xs):
        return np.abs(xs[0]).min() > KINK

    def labels(rng):
        return [rng.normal(size=(5, 3))]

    label_draw = np.random.default_rng(99).integers(0, 3, size=5)

    def swd_draw(rng):
        return [rng.normal(size=(6, 3)), rng.normal(size=(6, 3))]

    dirs = sample_projections(16, 3, 7).directions

    def swd_gap_ok(xs):
        return all(min_projected_gap(dirs @ x.T) > KINK for x in xs)

    def swd_abs_ok(xs):
        if not swd_gap_ok(xs):
            return False
        s1, s2 = np.sort(dirs @ xs[0].T, axis=1), np.sort(dirs @ xs[1].T, axis=1)
        return np.abs(s1 - s2).min() > KINK

    perm_rng = np.random.default_rng(5)
    perm = perm_rng.permutation(6)
    perms = np.stack([perm_rng.permutation(6) for _ in range(3)])
    always = lambda xs: True  # noqa: E731
    return {
        "matmul": (normal((3, 4), (4, 2)), lambda a, b: ad.matmul(a, b), always),
        "add_bias": (normal((3, 4), (1, 4)), lambda x, b: ad.add_bias(x, b), always),
        "add": (normal((3, 4), (3, 4)), lambda a, b: ad.add(a, b), always),
        "sub": (normal((3, 4), (3, 4)), lambda a, b: ad.sub(a, b), always),
        "mul": (normal((3, 4), (3, 4)), lambda a, b: ad.mul(a, b), always),
        "scale": (normal((3, 4)), lambda x: ad.scale(x, -2.5), always),
        "square": (normal((3, 4)), ad.square, always),
        "absolute": (normal((3, 4)), ad.absolute, away_from_zero),
        "relu": (normal((3, 4)), ad.relu, away_from_zero),
        "transpose": (normal((3, 4)), ad.transpose, always),
        "total": (normal((3, 4)), ad.total, always),
        "mean": (normal((3, 4)), ad.mean, always),
        "softmax": (normal((4, 3)), ad.softmax, always),
        "softmax_cross_entropy_mean": (labels, lambda z: ad.softmax_cross_entropy_mean(z, label_draw), always),
        "gather": (normal((1, 6)), lambda x: ad.gather(x, perm), always),
        "gather_rows": (normal((3, 6)), lambda x: ad.gather_rows(x, perms), always),
        "swd_quadratic": (swd_draw, lambda a, b: swd(a, b, dirs, CostKind.QUADRATIC), swd_gap_ok),
        "swd_absolute": (swd_draw, lambda a, b: swd(a, b, dirs, CostKind.ABSOLUTE), swd_abs_ok),
    }


def _gradient_error(draw, fn, admissible, rng, reverse_sign=1.0):
    while True:
        xs = draw(rng)
        if admissible(xs):
            break
    out_shape = fn(*[Tensor(x) for x in xs]).shape
    weight = rng.normal(size=out_shape)

    def scalar(*arrays):
        return ad.total(ad.mul(fn(*arrays), Tensor(weight)))

    leaves = [Tensor(x, requires_grad=True) for x in xs]
    ad.backward(scalar(*leaves))
    worst = 0.0
    for i, leaf in enumerate(leaves):
        def f(xi, i=i):
            args = [Tensor(xi if j == i else xs[j]) for j in range(len(xs))]
            return scalar(*args).item()
        worst = max(worst, rel_err(leaf.grad, reverse_sign * central_diff(f, xs[i], 1e-5)))
    return worst


def test_criterion_3_gradients_match_finite_differences(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    errors = {name: max(_gradient_error(*case, rng) for _ in range(50)) for name, case in _cases().items()}
    # the reversal layer is the identity going forward, so its backward must be -lambda * FD
    lam = 0.7
    errors["grad_reverse"] = max(
        _gradient_error(lambda r: [r.normal(size=(3, 4))], lambda x: ad.grad_reverse(x, lam),
                        lambda xs: True, rng, reverse_sign=-lam)
        for _ in range(50))
    dt = time.perf_counter() - t0
    worst_name = max(errors, key=errors.get)
    ok = errors[worst_name] < 1e-4 and dt < 30
    report(3, "gradients vs central differences", ok,
           f"{len(errors)} ops x 50 instances, worst rel. err {errors[worst_name]:.1e} ({worst_name})", dt)
    assert ok, errors


# --- 4: metric properties ---------------------------------------------------------------------

def test_criterion_4_swd_metric_properties(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = {"symmetry": 0.0, "negativity": 0.0, "identity": 0.0, "closed_form": 0.0, "translation": 0.0}
    for i in range(100):
        n, d, m = int(rng.integers(1, 9)), int(rng.integers(1, 5)), int(rng.integers(1, 33))
        cost = (CostKind.QUADRATIC, CostKind.ABSOLUTE)[i % 2]
        dirs = sample_projections(m, d, i)
        p1, p2 = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        a, b = swd(p1, p2, dirs, cost).item(), swd(p2, p1, dirs, cost).item()
        worst["symmetry"] = max(worst["symmetry"], abs(a - b) / max(1.0, abs(a)))
        worst["negativity"] = max(worst["negativity"], -min(a, 0.0))
        worst["identity"] = max(worst["identity"], abs(swd(p1, p1, dirs, cost).item()))

        x, y, t = rng.normal(size=(1, d)), rng.normal(size=(1, d)), rng.normal(size=(1, d)) * 3
        proj = dirs.directions @ (x - y).ravel()
        want = np.sum(proj ** 2) if cost is CostKind.QUADRATIC else np.sum(np.abs(proj))
        got = swd(x, y, dirs, cost).item()
        worst["closed_form"] = max(worst["closed_form"], abs(got - want) / max(1.0, want))
        if cost is CostKind.QUADRATIC:
            shifted = swd(x + t, y + t, dirs, cost).item()
            worst["translation"] = max(worst["translation"], abs(shifted - got) / max(1.0, got))
    dt = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-12 and dt < 5
    report(4, "SWD metric properties", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()), dt)
    assert ok, worst


# --- 5: Monte-Carlo stability -------------------------------------------------------------------

def test_criterion_5_projection_count_stabilises_estimate(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    p1, p2 = rng.normal(size=(32, 8)), rng.normal(size=(32, 8)) + 0.5
    counts = [4, 8, 16, 32, 64, 128]
    stds = []
    for m in counts:
        vals = [swd(p1, p2, sample_projections(m, 8, s)).item() / m for s in range(100)]
        stds.append(float(np.std(vals)))
    dt = time.perf_counter() - t0
    ok = all(b < a for a, b in zip(stds, stds[1:])) and dt < 10
    report(5, "std of swd/M shrinks with M", ok,
           " > ".join(f"M={m}:{s:.3f}" for m, s in zip(counts, stds)), dt)
    assert ok


# --- 6: two-moons adaptation -----------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_two_moons_adaptation(report):
    t0 = time.perf_counter()
    cfg = load_config(DEFAULT_CONFIG)
    source, target = build_datasets(cfg)
    acc = {"source_only": [], "swd": []}
    for seed in range(10):
        for name, tcfg in (("source_only", replace(cfg.train, mode="source_only")), ("swd", cfg.train)):
            bundle, _ = train_condition(cfg, tcfg, source, target, seed)
            acc[name].append(evaluate(bundle, target))
    dt = time.perf_counter() - t0
    base, adapted = float(np.median(acc["source_only"])), float(np.median(acc["swd"]))
    ok = adapted >= base + 0.10 and adapted >= 0.95 and dt < 300
    report(6, "two-moons adaptation", ok,
           f"median target acc swd {adapted:.4f} (needs >= 0.95 and >= {base + 0.10:.4f}), "
           f"source_only {base:.4f}", dt)
    assert ok


# --- 7 and 8: training contracts ------------------------------------------------------------------

def _default_setup():
    cfg = load_config(DEFAULT_CONFIG)
    source, target = build_datasets(cfg)
    bundle = init_bundle(MlpSpec(cfg.generator_widths), MlpSpec(cfg.classifier_widths), 0)
    return cfg, source, target, bundle


def test_criterion_7_freeze_contracts(report):
    t0 = time.perf_counter()
    cfg, source, target, bundle = _default_setup()
    opt = make_optimizers(cfg.train)
    rng = np.random.default_rng(7)
    violations = 0
    for it in range(50):
        si = rng.choice(len(source), cfg.train.batch_size, replace=False)
        ti = rng.choice(len(target), cfg.train.batch_size, replace=False)
        xs, ys, xt = source.points[si], source.labels[si], target.points[ti]
        dirs = sample_projections(cfg.train.num_projections, 2, it)
        step_source(bundle, xs, ys, opt)
        g = [t.data.tobytes() for t in bundle.generator_tensors()]
        step_max_discrepancy(bundle, xs, ys, xt, dirs, opt, cfg.train)
        violations += g != [t.data.tobytes() for t in bundle.generator_tensors()]
        c = [t.data.tobytes() for t in bundle.classifier_tensors()]
        step_min_discrepancy(bundle, xt, dirs, opt, cfg.train)
        violations += c != [t.data.tobytes() for t in bundle.classifier_tensors()]
    dt = time.perf_counter() - t0
    ok = violations == 0 and dt < 10
    report(7, "freeze contracts", ok, f"50 iterations, {violations} bitwise violations", dt)
    assert ok


def test_criterion_8_grl_gradient_is_negated_step_three(report):
    t0 = time.perf_counter()
    cfg, source, target, bundle = _default_setup()
    grl_cfg = replace(cfg.train, mode="grl", grl_lambda=1.0)
    xt = target.points[:cfg.train.batch_size]
    dirs = sample_projections(cfg.train.num_projections, 2, 8)

    bundle.zero_grad()
    ad.backward(ad.scale(target_discrepancy(bundle, xt, cfg.train, dirs), cfg.train.discrepancy_weight))
    step3 = [t.grad.copy() for t in bundle.generator_tensors()]

    bundle.zero_grad()
    branch = target_discrepancy(bundle, xt, grl_cfg, dirs, reverse_lambda=grl_cfg.grl_lambda)
    ad.backward(ad.scale(branch, grl_cfg.discrepancy_weight))
    grl = [t.grad.copy() for t in bundle.generator_tensors()]

    diff = max(np.abs(a + b).max() for a, b in zip(grl, step3))
    scale = max(np.abs(a).max() for a in step3)
    dt = time.perf_counter() - t0
    ok = diff < 1e-10 and scale > 0 and dt < 5
    report(8, "GRL generator gradient == -(step-3 gradient)", ok,
           f"max abs diff {diff:.1e} (gradient scale {scale:.1e})", dt)
    assert ok


# --- 9: determinism --------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_9_full_runs_are_byte_identical(report, tmp_path):
    t0 = time.perf_counter()
    a = run_experiment(DEFAULT_CONFIG, tmp_path / "a")
    b = run_experiment(DEFAULT_CONFIG, tmp_path / "b")
    files = ["summary.csv", "source_only/history.csv", "swd/history.csv"]
    same = [(a / f).read_bytes() == (b / f).read_bytes() for f in files]
    dt = time.perf_counter() - t0
    ok = all(same) and dt < 60
    report(9, "determinism", ok, f"{sum(same)}/{len(files)} files byte-identical across two default runs", dt)
    assert ok


# --- 10: IDX ------------------------------------------------------------------------------------

def test_criterion_10_idx_fixtures(report, tmp_path):
    t0 = time.perf_counter()
    img, lab = tmp_path / "img", tmp_path / "lab"
    # two 2x3 images and their labels, written byte by byte
    img.write_bytes(struct.pack(">4I", 2051, 2, 2, 3) + bytes([0, 51, 102, 153, 204, 255, 255, 0, 0, 0, 0, 255]))
    lab.write_bytes(struct.pack(">2I", 2049, 2) + bytes([3, 9]))
    ds = load_idx(img, lab)
    parsed = (ds.points.tolist() == [[0.0, 0.2, 0.4, 0.6, 0.8, 1.0], [1.0, 0.0, 0.0, 0.0, 0.0, 1.0]]
              and ds.labels.tolist() == [3, 9])

    bad_magic = tmp_path / "bad_magic"
    bad_magic.write_bytes(struct.pack(">4I", 2052, 2, 2, 3) + bytes(12))
    short = tmp_path / "short"
    short.write_bytes(struct.pack(">4I", 2051, 2, 2, 3) + bytes(11))
    raised = []
    for path, err in ((bad_magic, WrongMagicError), (short, TruncatedPayloadError)):
        try:
            load_idx(path, lab)
            raised.append(False)
        except err:
            raised.append(True)
    dt = time.perf_counter() - t0
    ok = parsed and all(raised) and dt < 1
    report(10, "IDX fixtures", ok, f"parsed exactly: {parsed}, malformed files rejected: {sum(raised)}/2", dt)
    assert ok
