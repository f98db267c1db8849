"""Acceptance gate AC-1 ... AC-12.

Each test records one PASS/FAIL line (printed in the terminal summary by
conftest.py) and then asserts, so a failing criterion also fails the run.
AC-8 and AC-12 share one run of the default phantom experiment, roughly
four minutes on a single core.
"""

import contextlib
import itertools
import math
import time

import numpy as np
import pytest
from gradcheck import check_gradients
from test_fusion import brute_resample, brute_signed_edt, two_box_case
from test_metrics import brute_surface, wilcoxon_enumeration
from test_network import tiny_triple_gradcheck

from anisoseg._backend import HAVE_NUMBA, use_backend
from anisoseg.experiment import ExperimentConfig, run_experiment
from anisoseg.fusion import fuse_planes, signed_edt
from anisoseg.hpo import SearchSpace, Trial, make_bracket, random_search, run_hpo, select_survivors, synthetic_objective
from anisoseg.layers import BatchNormState, batchnorm, conv3d, dropout, maxpool3d, transposed_conv3d, upsample_trilinear
from anisoseg.metrics import UndefinedTestError, abd, dsc, hd95, surface_points, wilcoxon_signed_rank
from anisoseg.network import PARAMETER_TARGETS, BEST_HYPERPARAMS, build_multistream, count_parameters
from anisoseg.tensor import Tensor, concat_channels, record, relu, sigmoid, tsum
from anisoseg.training import early_stop_check, soft_dice_loss
from anisoseg.volume import Grid3, Mask

BACKENDS = ("numba", "numpy") if HAVE_NUMBA else ("numpy",)
RESULTS: dict[str, tuple[bool, str]] = {}


@contextlib.contextmanager
def criterion(name):
    """Record PASS when the block finishes, FAIL with the reason otherwise."""
    info = {"detail": ""}
    t0 = time.perf_counter()
    try:
        yield info
    except BaseException as exc:
        RESULTS[name] = (False, f"{info['detail']} {type(exc).__name__}: {exc}".strip())
        raise
    RESULTS[name] = (True, f"{info['detail']} [{time.perf_counter() - t0:.1f}s]".strip())


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------


def pairwise_min(x, y, chunk=2048):
    """Exhaustive nearest distance from every row of ``x`` to the rows of ``y``."""
    out = np.empty(len(x))
    for s in range(0, len(x), chunk):
        diff = x[s : s + chunk, None, :] - y[None, :, :]
        out[s : s + chunk] = np.sqrt((diff**2).sum(-1)).min(axis=1)
    return out


def linear_percentile(values, q):
    v = np.sort(values)
    pos = q / 100 * (len(v) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (pos - lo) * (v[hi] - v[lo])


def brute_signed_edt_vec(fg, spacing):
    """All-pairs signed distance, vectorized in chunks for masks up to 24^3."""
    sp = np.asarray(spacing, float)
    pts = np.argwhere(np.ones(fg.shape, bool)) * sp
    flat = fg.ravel()
    cap = float(np.linalg.norm(np.array(fg.shape) * sp))
    out = np.full(flat.size, cap)
    if flat.any() and not flat.all():
        inside, outside = pts[flat], pts[~flat]
        out[flat] = np.minimum(pairwise_min(inside, outside), cap)
        out[~flat] = np.minimum(pairwise_min(outside, inside), cap)
    out[flat] *= -1
    return out.reshape(fg.shape)


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------


def test_ac1_parameter_counts():
    with criterion("AC-1") as info:
        counts = {v: count_parameters(build_multistream(v, hp=BEST_HYPERPARAMS[v])) for v in ("single", "dual", "triple")}
        info["detail"] = " ".join(f"{v}={n / 1e6:.3f}M" for v, n in counts.items())
        for v, n in counts.items():
            assert abs(n - PARAMETER_TARGETS[v]) / PARAMETER_TARGETS[v] < 0.10, v
        assert counts["single"] < counts["dual"] < counts["triple"]


def test_ac2_metric_oracles():
    with criterion("AC-2") as info:
        r = np.random.default_rng(2)
        worst = 0.0
        for _ in range(200):
            dims = tuple(int(v) for v in r.integers(1, 17, 3))
            g = Grid3(dims, tuple(r.uniform(0.3, 2.5, 3)), tuple(r.uniform(-5, 5, 3)))
            x = r.random(dims) < r.uniform(0.05, 0.8)
            y = r.random(dims) < r.uniform(0.05, 0.8)
            x.flat[r.integers(x.size)] = True
            y.flat[r.integers(y.size)] = True
            mx, my = Mask(g, x), Mask(g, y)
            assert dsc(mx, my) == 2.0 * int((x & y).sum()) / (int(x.sum()) + int(y.sum()))
            px, py = brute_surface(x, g), brute_surface(y, g)
            sx, sy = surface_points(mx), surface_points(my)
            assert len(sx) == len(px) and len(sy) == len(py)
            dxy, dyx = pairwise_min(px, py), pairwise_min(py, px)
            ref_abd = (dxy.sum() + dyx.sum()) / (len(dxy) + len(dyx))
            ref_hd = max(linear_percentile(dxy, 95), linear_percentile(dyx, 95))
            worst = max(worst, abs(abd(sx, sy) - ref_abd), abs(hd95(sx, sy) - ref_hd))
        info["detail"] = f"200 pairs, max distance error {worst:.2e} mm"
        assert worst <= 1e-9


def test_ac3_edt_exact():
    with criterion("AC-3") as info:
        r = np.random.default_rng(3)
        worst = 0.0
        for i in range(100):
            dims = tuple(int(v) for v in r.integers(1, 25, 3))
            spacing = tuple(r.uniform(0.25, 4.0, 3))
            fg = r.random(dims) < r.uniform(0.0, 1.0)
            ref = brute_signed_edt_vec(fg, spacing)
            for name in BACKENDS:
                with use_backend(name):
                    got = signed_edt(Mask(Grid3(dims, spacing), fg)).values
                worst = max(worst, float(np.abs(got - ref).max()))
        info["detail"] = f"100 masks x {'+'.join(BACKENDS)}, max error {worst:.2e} mm"
        assert worst <= 1e-9


def _t(r, *shape):
    return Tensor(r.standard_normal(shape), requires_grad=True)


def _weighted(t, w):
    return tsum(record(t.data * w, [t], lambda g: (g * w,)))


def op_checks(seed):
    """Relative finite-difference errors of every differentiable op for one seed."""
    r = np.random.default_rng(seed)
    errs = {}
    x, w, b = _t(r, 1, 2, 4, 3, 5), _t(r, 3, 2, 3, 3, 3), _t(r, 3)
    proj = r.standard_normal((1, 3, 4, 3, 5))
    errs["conv3d"] = check_gradients(lambda: _weighted(conv3d(x, w, b), proj), [x, w, b])
    xp = Tensor(r.permutation(96).reshape(1, 2, 4, 4, 3) / 10.0, requires_grad=True)  # distinct values, no window ties
    proj = r.standard_normal((1, 2, 2, 2, 3))
    errs["maxpool3d"] = check_gradients(lambda: _weighted(maxpool3d(xp, (2, 2, 1)), proj), [xp])
    xu = _t(r, 1, 2, 3, 2, 2)
    proj = r.standard_normal((1, 2, 6, 2, 8))
    errs["upsample_trilinear"] = check_gradients(lambda: _weighted(upsample_trilinear(xu, (2, 1, 4)), proj), [xu])
    xt, wt, bt = _t(r, 1, 3, 2, 3, 2), _t(r, 3, 2, 2, 1, 2), _t(r, 2)
    proj = r.standard_normal((1, 2, 4, 3, 4))
    errs["transposed_conv3d"] = check_gradients(lambda: _weighted(transposed_conv3d(xt, wt, bt), proj), [xt, wt, bt])
    a, c = _t(r, 1, 1, 2, 2, 2), _t(r, 1, 2, 2, 2, 2)
    proj = r.standard_normal((1, 3, 2, 2, 2))
    errs["concat_channels"] = check_gradients(lambda: _weighted(concat_channels([a, c]), proj), [a, c])
    xa = _t(r, 1, 2, 3, 3, 3)
    xa.data[np.abs(xa.data) < 0.05] += 0.1  # off the relu kink
    proj = r.standard_normal(xa.shape)
    errs["relu"] = check_gradients(lambda: _weighted(relu(xa), proj), [xa])
    errs["sigmoid"] = check_gradients(lambda: _weighted(sigmoid(xa), proj), [xa])
    xb, gamma, beta = _t(r, 1, 2, 3, 3, 3), _t(r, 2), _t(r, 2)
    proj = r.standard_normal(xb.shape)
    for mode in ("train", "infer"):
        state = BatchNormState(2)
        state.running_mean, state.running_var = r.standard_normal(2), r.uniform(0.5, 2.0, 2)
        errs[f"batchnorm_{mode}"] = check_gradients(lambda: _weighted(batchnorm(xb, gamma, beta, state, mode), proj), [xb, gamma, beta])
    xd = _t(r, 1, 2, 3, 3, 3)
    proj = r.standard_normal(xd.shape)
    errs["dropout"] = check_gradients(lambda: _weighted(dropout(xd, 0.3, "train", np.random.default_rng(seed)), proj), [xd])
    p = Tensor(r.uniform(0.05, 0.95, (1, 1, 3, 3, 3)), requires_grad=True)
    g = (r.random(p.shape) < 0.5).astype(float)
    errs["soft_dice_loss"] = check_gradients(lambda: soft_dice_loss(p, g), [p])
    return errs


def test_ac4_gradients():
    with criterion("AC-4") as info:
        worst = {}
        for seed in range(10):
            for name, e in op_checks(seed).items():
                worst[name] = max(worst.get(name, 0.0), e)
            worst["tiny_triple"] = max(worst.get("tiny_triple", 0.0), tiny_triple_gradcheck(seed, "transposed" if seed % 2 else "trilinear"))
        name, err = max(worst.items(), key=lambda kv: kv[1])
        info["detail"] = f"{len(worst)} checks x 10 seeds, worst {name} {err:.1e}"
        assert err < 1e-4, worst


def test_ac5_loss_identities():
    with criterion("AC-5") as info:
        r = np.random.default_rng(5)
        lo, hi = 0.0, -1.0
        for _ in range(1000):
            shape = tuple(int(v) for v in r.integers(1, 6, 3))
            g = (r.random(shape) < r.random()).astype(np.float64)
            assert soft_dice_loss(Tensor(g.copy()), g).item() == -1.0
            p = r.random(shape) ** r.uniform(0.1, 10)
            val = soft_dice_loss(Tensor(p), g).item()
            assert -1.0 <= val < 0.0
            lo, hi = min(lo, val), max(hi, val)
        info["detail"] = f"1000 inputs, loss range [{lo:.4f}, {hi:.4f}]"


def test_ac6_bracket_schedule():
    with criterion("AC-6") as info:
        assert make_bracket(8, 5).rungs == ((8, 5), (4, 10), (2, 20), (1, 40))
        r = np.random.default_rng(6)
        for _ in range(500):
            n = int(r.integers(1, 40))
            pool = [None, *np.round(r.random(4), 2)]
            losses = [pool[i] for i in r.integers(0, len(pool), n)]
            trials = [Trial(i, {}, 5.0, l, "failed" if l is None else "ok", 0) for i, l in enumerate(losses)]
            keep = math.ceil(n / 2)
            expected = sorted(range(n), key=lambda i: (math.inf if losses[i] is None else losses[i], i))[:keep]
            assert [t.index for t in select_survivors(trials, keep)] == expected
        info["detail"] = "bracket (8,5) exact, 500 randomized ledgers"


def test_ac7_hpo_beats_random():
    with criterion("AC-7") as info:
        space = SearchSpace()
        best, base, within = [], [], 0
        for seed in range(20):
            res = run_hpo(synthetic_objective, space, 5, 8, 5, rng=seed)
            ref = random_search(synthetic_objective, space, res.total_budget, 40, rng=10_000 + seed)
            assert ref.total_budget == res.total_budget
            best.append(res.best.loss)
            base.append(ref.best.loss)
            within += abs(math.log10(res.best.config["learning_rate"]) + 4) <= 1
        info["detail"] = f"median best {np.median(best):.3f} vs random {np.median(base):.3f}, {within}/20 within a decade"
        assert np.median(best) < np.median(base)
        assert within >= 18


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    out = tmp_path_factory.mktemp("experiment")
    return run_experiment(ExperimentConfig(), out)


def _p(res, comparison, region="whole", metric="dsc"):
    return next(s["p_value"] for s in res.significance if (s["comparison"], s["region"], s["metric"]) == (comparison, region, metric))


@pytest.mark.slow
def test_ac8_multiplane_beats_single(experiment):
    with criterion("AC-8") as info:
        m = {a: v["whole"]["dsc"] for a, v in experiment.summary["means"].items()}
        p_dual, p_triple = _p(experiment, "dual>single"), _p(experiment, "triple>single")
        info["detail"] = f"DSC single {m['single']:.4f} dual {m['dual']:.4f} triple {m['triple']:.4f}; p dual {p_dual:.4g} triple {p_triple:.4g}"
        assert not experiment.summary["failures"]
        assert m["dual"] > m["single"] and m["triple"] > m["single"]
        assert min(p_dual, p_triple) < 0.05


@pytest.mark.slow
def test_ac12_ensemble_comparator(experiment):
    with criterion("AC-12") as info:
        delta = experiment.summary["deltas"]["triple-ensemble"]["whole"]["dsc"]
        p = _p(experiment, "triple<>ensemble")
        info["detail"] = f"DSC triple-ensemble {delta:+.4f}, two-sided p {p:.4g}"
        assert {r["approach"] for r in experiment.rows} >= {"ensemble", "triple"}
        assert math.isfinite(delta) and 0 < p <= 1


def test_ac9_fusion():
    with criterion("AC-9") as info:
        r = np.random.default_rng(9)
        for _ in range(20):
            dims = tuple(int(v) for v in r.integers(1, 16, 3))
            g = Grid3(dims, tuple(r.uniform(0.3, 3.0, 3)))
            m = Mask(g, r.random(dims) < r.random())
            assert np.array_equal(fuse_planes([m] * int(r.integers(1, 4)), g).labels, m.labels)
            assert np.array_equal(signed_edt(m).values < 0, m.foreground)
        for seed in range(8):
            masks, iso = two_box_case(seed)
            fields = [brute_resample(brute_signed_edt(k.foreground, k.grid.spacing), k.grid, iso) for k in masks]
            expected = np.sort(np.stack(fields), axis=0).sum(axis=0) / len(fields) < 0
            got = fuse_planes(masks, iso)
            assert got.count() > 0 and np.array_equal(got.foreground, expected)
        info["detail"] = "identity and self-threshold on 20 masks, 8 two-box 16^3 cases"


def test_ac10_wilcoxon_exact():
    with criterion("AC-10") as info:
        r = np.random.default_rng(10)
        checked = 0
        for n in range(5, 13):
            for trial in range(6):
                d = r.normal(0.3 * (trial % 3), 1, n)
                if trial >= 3:
                    d = np.round(d * 2) / 2  # ties
                d[d == 0] = 0.5
                pg, pl = wilcoxon_enumeration(d)
                assert wilcoxon_signed_rank(d, alternative="greater").p_value == pg
                assert wilcoxon_signed_rank(d, alternative="less").p_value == pl
                assert wilcoxon_signed_rank(d).p_value == min(1.0, 2 * min(pg, pl))
                checked += 1
        for n in range(1, 5):  # below the n >= 5 precondition
            with pytest.raises(UndefinedTestError):
                wilcoxon_signed_rank(np.arange(1.0, n + 1))
        info["detail"] = f"{checked} samples with n=5..12 match 2^n enumeration"


def test_ac11_early_stopping():
    with criterion("AC-11") as info:
        assert early_stop_check([0.5] * 100) == "continue"
        assert early_stop_check([0.5] * 101) == "stop"
        exact = [1.0 - 0.001 * i for i in range(300)]
        assert early_stop_check(exact, 0.001, 100) == "continue"  # exactly 0.001 counts
        below = [1.0] + [1.0 - 0.000999] * 100
        assert early_stop_check(below, 0.001, 100) == "stop"
        late = [1.0] * 100 + [0.998] + [0.998] * 99
        assert early_stop_check(late, 0.001, 100) == "continue"
        assert early_stop_check(late + [0.998], 0.001, 100) == "stop"
        for k in itertools.chain(range(1, 5), (100,)):
            assert early_stop_check([1.0] * k, 0.001, k) == "continue"
        info["detail"] = "flat, exact-delta boundary, sub-delta and late-improvement histories"
