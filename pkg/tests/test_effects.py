import math

import numpy as np
import pytest

from mcfkit.effects import (CoverageWarning, EstimationError, ate, atet, bgate, discretize,
                            effect_curve, gate, iate_table, iates, normal_pvalue, stars,
                            write_effects)
from mcfkit.mcf import McfParams, fit_mcf, iate
from mcfkit.synth import DgpSpec, generate

from conftest import make_dataset


def _fit(data, n_trees=30, seed=0, min_leaf=5):
    half = data.n // 2
    tr, es = data.subset(np.arange(half)), data.subset(np.arange(half, data.n))
    return fit_mcf(tr, es, McfParams(n_trees=n_trees, min_leaf=min_leaf, seed=seed)), es


def _random_design(n, tau, seed, p=3, k=2, noise=1.0, extra=None):
    """Randomized arms; tau(x, z) is the arm-1 effect."""
    r = np.random.default_rng(seed)
    x = r.normal(size=(n, p))
    if extra is not None:
        x = np.column_stack([x, extra(r, x)])
    d = r.integers(0, k, n)
    y = x[:, 0] + (d == 1) * tau(x) + noise * r.normal(size=n)
    kinds = ["continuous"] * p + (["ordered"] if extra is not None else [])
    return make_dataset(x, d, y, n_arms=k, kinds=kinds)


@pytest.fixture(scope="module")
def fitted():
    spec = DgpSpec(n=1200, p=3, cat_levels=(3,), n_arms=3, selection=0.5,
                   effect_const=(0.0, 1.0, 0.5), effect_slope=(0.0, 0.5, 0.0),
                   effect_cat=(0.0, 0.0, 0.3), seed=11)
    data, _ = generate(spec)
    forest, es = _fit(data, 40)
    return forest, data


def test_stars_and_pvalues():
    assert [stars(p) for p in (0.005, 0.03, 0.07, 0.2)] == ["***", "**", "*", ""]
    assert normal_pvalue(1.959963984540054, 1.0) == pytest.approx(0.05, abs=1e-12)
    assert normal_pvalue(0.0, 0.0) == 1.0


def test_single_prediction_row_ate_is_its_iate(fitted):
    forest, data = fitted
    one = data.subset([5])
    est = ate(forest, one, (1, 0))
    assert est.estimate == pytest.approx(iate(forest, one.x[0], (1, 0)), abs=1e-12)


def test_ate_is_mean_of_iates(fitted):
    forest, data = fitted
    for c in ((1, 0), (2, 0), (2, 1)):
        assert ate(forest, data, c).estimate == pytest.approx(
            float(np.mean(iates(forest, data.x, [c]))), abs=1e-9)


def test_contrast_antisymmetry_exact(fitted):
    forest, data = fitted
    a, b = ate(forest, data, (2, 1)), ate(forest, data, (1, 2))
    assert a.estimate == -b.estimate and a.se == b.se
    g, h = gate(forest, data, (2, 1), "c0"), gate(forest, data, (1, 2), "c0")
    assert [e.estimate for e in g.estimates] == [-e.estimate for e in h.estimates]
    assert [e.se for e in g.estimates] == [e.se for e in h.estimates]


def test_gate_share_weighted_mean_is_ate(fitted):
    forest, data = fitted
    for z in ("c0", "x0"):
        res = gate(forest, data, (1, 0), z)
        assert res.weighted_mean() == pytest.approx(res.overall.estimate, abs=1e-9)
        assert abs(sum(res.shares) - 1) < 1e-12
    assert len(gate(forest, data, (1, 0), "x0").cells) == 10      # deciles


def test_single_cell_gate_equals_ate(fitted):
    forest, data = fitted
    sub = data.subset(data.column("c0") == 1)
    res = gate(forest, sub, (1, 0), "c0")
    assert len(res.estimates) == 1
    assert res.estimates[0].estimate == pytest.approx(res.overall.estimate, abs=1e-12)
    assert res.deltas[0].estimate == pytest.approx(0.0, abs=1e-12)


def test_bgate_without_balancing_is_gate(fitted):
    forest, data = fitted
    g = gate(forest, data, (2, 0), "c0")
    b = bgate(forest, data, (2, 0), "c0", [])
    assert [e.estimate for e in b.estimates] == [e.estimate for e in g.estimates]
    assert [e.se for e in b.estimates] == [e.se for e in g.estimates]


def test_bgate_empty_cell_warns_and_renormalizes(fitted):
    forest, data = fitted
    # drop every c0 == 2 row with x0 above its median: that balancing cell goes missing
    hi = data.column("x0") > np.median(data.column("x0"))
    sub = data.subset(~((data.column("c0") == 2) & hi))
    w_bin = (sub.column("x0") > np.median(data.column("x0"))).astype(float)
    sub = make_dataset(np.column_stack([sub.x, w_bin]), sub.d, sub.y, n_arms=3,
                       kinds=["continuous"] * 3 + ["unordered", "unordered"],
                       names=["x0", "x1", "x2", "c0", "w"])
    forest2, _ = _fit(sub, 20)
    with pytest.warns(CoverageWarning):
        res = bgate(forest2, sub, (1, 0), "c0", ["w"])
    assert res.notes


def test_atet_all_treated_equals_ate(fitted):
    forest, data = fitted
    treated = data.subset(data.d == 1)
    assert atet(forest, treated, (1, 0)).estimate == ate(forest, treated, (1, 0)).estimate


def test_atet_exceeds_ate_under_selection_on_gain():
    r = np.random.default_rng(3)
    n = 3000
    x = r.normal(size=(n, 2))
    d = (r.random(n) < 1 / (1 + np.exp(-2 * x[:, 0]))).astype(int)
    y = x[:, 1] + d * (1 + x[:, 0]) + 0.5 * r.normal(size=n)
    data = make_dataset(x, d, y)
    forest, _ = _fit(data, 40)
    assert atet(forest, data, (1, 0), treated=1).estimate > ate(forest, data, (1, 0)).estimate


def test_undefined_share_aborts(fitted):
    forest, data = fitted
    far = data.subset(np.arange(20))
    with pytest.raises(EstimationError):
        # a tolerance of zero with incomplete rows present must abort; force one
        forest2 = fit_mcf(data.subset(np.arange(600)),
                          data.subset(np.arange(600, 1200)),
                          McfParams(n_trees=1, min_leaf=1, seed=3))
        ate(forest2, data, (1, 0), max_undefined_share=0.0)
    assert ate(forest, far, (1, 0)).n_effective == 20


def test_discretize_levels_and_deciles():
    assert discretize([1, 2, 2, 3]).tolist() == [1, 2, 2, 3]
    codes = discretize(np.arange(100.0))
    assert np.unique(codes).size == 10 and np.bincount(codes.astype(int)).tolist() == [10] * 10


def test_effect_curve_shapes_and_flat_months(tmp_path):
    r = np.random.default_rng(5)
    n = 600
    x = r.normal(size=(n, 2))
    d = r.integers(0, 2, n)
    base = x[:, 0] + d * 0.5 + r.normal(size=n)
    data = make_dataset(x, d, np.tile(base[:, None], (1, 36)))
    forest, _ = _fit(data, 20)
    curve = effect_curve(forest, data, (1, 0))
    assert curve.months == list(range(1, 37))
    vals = [e.estimate for e in curve.estimates]
    assert max(vals) - min(vals) < 1e-12
    curve.to_csv(tmp_path / "c.csv")
    assert len((tmp_path / "c.csv").read_text().splitlines()) == 37


def test_tables_have_headers(tmp_path, fitted):
    forest, data = fitted
    write_effects(tmp_path / "e.csv", [ate(forest, data, (1, 0))])
    assert (tmp_path / "e.csv").read_text().splitlines()[0] == \
        "estimand,contrast,cell,outcome,estimate,se,pvalue,stars"
    rows = iate_table(forest, data.subset(np.arange(5)), [(1, 0)])
    assert set(rows[0]) == {"id", "mu_0", "mu_1", "mu_2", "iate_1-0", "se_1-0"}
    assert all(r["se_1-0"] >= 0 for r in rows)


# Monte Carlo checks ---------------------------------------------------------

@pytest.mark.slow
def test_zero_effect_ate_within_two_se():
    inside = 0
    for rep in range(50):
        data = _random_design(800, lambda x: 0.0 * x[:, 0], 100 + rep)
        forest, _ = _fit(data, 25, rep)
        est = ate(forest, data, (1, 0))
        inside += abs(est.estimate) <= 2 * est.se
    assert inside >= 45


@pytest.mark.slow
def test_constant_effect_recovered():
    data = _random_design(4000, lambda x: 0.7 + 0 * x[:, 0], 7)
    forest, _ = _fit(data, 50)
    assert abs(ate(forest, data, (1, 0)).estimate - 0.7) <= 0.1


@pytest.mark.slow
def test_atet_equals_ate_under_randomization():
    data = _random_design(3000, lambda x: 1 + x[:, 1], 8)
    forest, _ = _fit(data, 40)
    res = gate(forest, data, (1, 0), "d")        # cells of d are the ATETs
    delta = res.deltas[1]
    assert abs(delta.estimate) <= 2 * delta.se


@pytest.mark.slow
def test_gate_difference_for_binary_z():
    data = _random_design(4000, lambda x: (x[:, 3] == 1).astype(float), 9,
                          extra=lambda r, x: r.integers(0, 2, len(x)))
    forest, _ = _fit(data, 50)
    res = gate(forest, data, (1, 0), "x3")
    assert abs(res.estimates[1].estimate - res.estimates[0].estimate - 1) <= 0.15


@pytest.mark.slow
def test_bgate_close_to_gate_when_z_independent_of_w():
    r = np.random.default_rng(10)
    n = 4000
    z = r.integers(0, 2, n)
    w = r.integers(0, 2, n)
    x = np.column_stack([r.normal(size=n), z, w])
    d = r.integers(0, 2, n)
    y = x[:, 0] + d * (0.5 + z + w) + r.normal(size=n)
    data = make_dataset(x, d, y, kinds=["continuous", "unordered", "unordered"])
    forest, _ = _fit(data, 50)
    g = gate(forest, data, (1, 0), "x1")
    b = bgate(forest, data, (1, 0), "x1", ["x2"])
    for ge, be in zip(g.estimates, b.estimates):
        assert abs(be.estimate - ge.estimate) <= 2 * be.se


@pytest.mark.slow
def test_bgate_removes_heterogeneity_carried_by_w():
    r = np.random.default_rng(11)
    n = 4000
    w = r.integers(0, 2, n)
    z = np.where(r.random(n) < 0.8, w, 1 - w)            # z tracks w
    x = np.column_stack([r.normal(size=n), z, w])
    d = r.integers(0, 2, n)
    y = x[:, 0] + d * (2.0 * w) + r.normal(size=n)
    data = make_dataset(x, d, y, kinds=["continuous", "unordered", "unordered"])
    forest, _ = _fit(data, 50)
    g = gate(forest, data, (1, 0), "x1")
    b = bgate(forest, data, (1, 0), "x1", ["x2"])
    spread_g = abs(g.deltas[1].estimate - g.deltas[0].estimate)
    spread_b = abs(b.deltas[1].estimate - b.deltas[0].estimate)
    assert spread_b < spread_g


@pytest.mark.slow
def test_lock_in_curve_sign_pattern():
    spec = DgpSpec(n=3000, p=3, n_arms=2, effect_const=(0.0, 1.0), effect_slope=(0.0, 0.0),
                   effect_cat=(0.0, 0.0), noise_sd=0.5, months=30, seed=12)
    data, truth = generate(spec)
    forest, _ = _fit(data, 40)
    curve = effect_curve(forest, data, (1, 0))
    true = truth.tau[:, 1].mean() * np.array([-1.0] * 6 + [0.5] * 7)
    months = list(range(6)) + list(range(23, 30))
    for m, t in zip(months, true):
        e = curve.estimates[m]
        assert abs(e.estimate - t) <= 3 * e.se
        assert math.copysign(1, e.estimate) == math.copysign(1, t)


@pytest.mark.slow
def test_se_shrinks_when_n_quadruples():
    small, large = [], []
    for rep in range(5):
        for n, store in ((500, small), (2000, large)):
            data = _random_design(n, lambda x: 0.5 + 0 * x[:, 0], 200 + rep)
            forest, _ = _fit(data, 20, rep)
            store.append(ate(forest, data, (1, 0)).se)
    assert np.median(large) < np.median(small)
