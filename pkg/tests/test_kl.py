import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.integrate import quad

from tephra_abc.distances import LearnedDistance
from tephra_abc.kl import (
    DegenerateScaling,
    GibbsSpec,
    KLReport,
    ParameterOracle,
    estimate_kl,
    importance_weights,
    loo_evaluate,
    quantile_sweep,
    scale_unit,
    select_best,
    write_reports,
)
from tephra_abc.metric_learning import SDMLDivergence, TrainingSet, train_contrastive, train_triplet
from tephra_abc.nn import SGDConfig
from tephra_abc.seeding import make_rng

unit = arrays(np.float64, 6, elements=st.floats(0, 1))


@given(unit)
def test_identical_distances_give_zero(d):
    assert estimate_kl(d, d, np.ones(6)) == 0.0


def test_three_point_hand_value():
    learned = np.array([0.0, 0.5, 1.0])
    true = np.array([0.0, 1.0, 0.5])
    # same multiset of energies so the normalizers cancel
    s = 1 + math.exp(-0.25) + math.exp(-1)
    expected = (0.75 * math.exp(-0.25) - 0.75 * math.exp(-1)) / s
    assert estimate_kl(learned, true, np.ones(3)) == pytest.approx(expected, rel=1e-14)
    assert expected == pytest.approx(0.14356633230441834, rel=1e-12)


def test_five_point_brute_force_definition():
    rng = make_rng(3, "kl5")
    d, dt = rng.uniform(size=5), rng.uniform(size=5)
    q = rng.uniform(0.5, 2.0, size=5)
    beta = 1.7
    pt = [math.exp(-beta * v * v) for v in d]
    pt_star = [math.exp(-beta * v * v) for v in dt]
    z = sum(p / qq for p, qq in zip(pt, q)) / 5
    z_star = sum(p / qq for p, qq in zip(pt_star, q)) / 5
    ratio = [p / qq for p, qq in zip(pt, q)]
    total = sum(ratio)
    brute = sum(r / total * math.log((pt[i] / z) / (pt_star[i] / z_star)) for i, r in enumerate(ratio))
    assert estimate_kl(d, dt, q, GibbsSpec(beta=beta)) == pytest.approx(brute, abs=1e-12)


@given(unit, arrays(np.float64, 6, elements=st.floats(0.1, 10)), st.floats(0.1, 5))
def test_importance_weights_normalized(d, q, beta):
    w = importance_weights(d, q, beta)
    assert np.all(w >= 0)
    assert abs(w.sum() - 1) < 1e-12


@given(unit, unit)
def test_estimate_nonnegative_under_uniform_proposal(a, b):
    # with a constant proposal the estimate is a discrete KL divergence
    assert estimate_kl(a, b, np.ones(6)) >= -1e-12


def test_converges_to_continuous_kl():
    # p ~ exp(-t^2), p* ~ exp(-t^4) on [0, 1], proposal uniform
    z = quad(lambda t: math.exp(-t * t), 0, 1)[0]
    zs = quad(lambda t: math.exp(-(t**4)), 0, 1)[0]
    exact = quad(lambda t: math.exp(-t * t) / z * (math.log(zs / z) + t**4 - t * t), 0, 1)[0]
    est = []
    for rep in range(200):
        t = make_rng(rep, "klconv").uniform(size=1000)
        est.append(estimate_kl(t, t**2, np.ones(1000)))
    se = np.std(est, ddof=1)
    assert abs(est[0] - exact) < 3 * se
    assert abs(np.mean(est) - exact) < 3 * se / math.sqrt(200) + 1e-4


def test_scale_unit_modes():
    np.testing.assert_array_equal(scale_unit([0.0, 2.0, 4.0]), [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(scale_unit([1.0, 2.0, 3.0], "minmax"), [0.0, 0.5, 1.0])
    with pytest.raises(DegenerateScaling):
        scale_unit([0.0, 0.0])
    with pytest.raises(DegenerateScaling):
        scale_unit([2.0, 2.0], "minmax")


def test_input_validation():
    with pytest.raises(ValueError, match="equal length"):
        estimate_kl([0.1], [0.1, 0.2], [1.0, 1.0])
    with pytest.raises(ValueError, match="positive"):
        estimate_kl([0.1], [0.1], [0.0])
    with pytest.raises(ValueError):
        GibbsSpec(beta=0)


# ---------------------------------------------------------------- LOO


def _line_ts(n=12, seed=0):
    rng = make_rng(seed, "klts")
    thetas = rng.uniform(size=(n, 2))
    xs = np.c_[thetas, rng.normal(size=(n, 3))]
    return TrainingSet(thetas, xs, np.array([], dtype=int), np.arange(n))


def test_oracle_has_zero_kl():
    rep = loo_evaluate(_line_ts(), ParameterOracle())
    assert rep.technique == "oracle"
    assert len(rep.estimates) == 12
    assert all(e == 0.0 for e in rep.estimates)


def test_test_split_of_two():
    # one reference per observation: both distances rescale to 1
    ts = _line_ts(2)
    rep = loo_evaluate(ts, LearnedDistance.euclidean(5))
    assert rep.estimates == [0.0, 0.0]
    with pytest.raises(ValueError, match="two samples"):
        loo_evaluate(TrainingSet(ts.thetas, ts.datasets, [0], [1]), LearnedDistance.euclidean(5))


def test_positive_rescaling_of_distance_is_invisible():
    ts = _line_ts()
    m = np.diag([1.0, 2.0, 0.5, 0.1, 3.0])
    base = loo_evaluate(ts, LearnedDistance.mahalanobis(m)).estimates
    for c in (4.0, 3.7, 1e-3):
        np.testing.assert_allclose(loo_evaluate(ts, LearnedDistance.mahalanobis(c * m)).estimates, base, rtol=1e-12, atol=1e-14)


def test_parameter_only_metric_beats_noisy_one():
    ts = _line_ts(40)
    good = LearnedDistance.mahalanobis(np.diag([1.0, 1.0, 0.0, 0.0, 0.0]))
    bad = LearnedDistance.mahalanobis(np.diag([0.0, 0.0, 1.0, 1.0, 1.0]))
    assert loo_evaluate(ts, good).median < 1e-12
    assert loo_evaluate(ts, bad).median > 0.01


class _Constant:
    variant = "constant"

    def pairwise_from(self, datasets, thetas):
        return np.zeros((len(thetas), len(thetas)))


def test_degenerate_scaling_skips_observation(caplog):
    rep = loo_evaluate(_line_ts(5), _Constant())
    assert rep.estimates == []
    assert rep.skipped == [0, 1, 2, 3, 4]
    assert math.isnan(rep.median)
    assert "skipped" in caplog.text


# ---------------------------------------------------------------- sweep


def _sweep_ts(n=24):
    rng = make_rng(1, "sweep")
    thetas = rng.uniform(size=(n, 2))
    xs = np.c_[thetas + 0.3 * rng.normal(size=(n, 2)), rng.normal(size=(n, 2))]
    return TrainingSet(thetas, xs, np.arange(n // 2), np.arange(n // 2, n))


def test_sweep_selects_oracle():
    res = quantile_sweep(_sweep_ts(), ["euclidean", ParameterOracle()], [0.2, 0.5])
    assert len(res.reports) == 4
    assert res.best == ("oracle", 0.2)
    assert res.best_report.median == 0.0


def test_sweep_records_trainer_failures():
    def failing(name, ts, labels):
        raise SDMLDivergence("unbounded")

    res = quantile_sweep(_sweep_ts(), ["sdml"], [0.3], train=failing)
    assert res.reports == [] and res.best is None
    assert res.missing == [{"technique": "sdml", "quantile": 0.3, "reason": "unbounded"}]


def test_sweep_skips_deep_trainers_when_saturated():
    calls = []

    def trainer(name, ts, labels):
        calls.append(name)
        return LearnedDistance.euclidean(4)

    res = quantile_sweep(_sweep_ts(), ["triplet", "euclidean"], [0.99], train=trainer)
    assert calls == ["euclidean"]
    assert res.missing[0]["technique"] == "triplet"


def test_select_best_ties_keep_first():
    a = KLReport("a", 0.1, [0, 1], [0.25, 0.75])
    b = KLReport("b", 0.2, [0, 1], [0.5, 0.5])
    empty = KLReport("c", 0.3)
    assert select_best([empty, a, b]) == ("a", 0.1)
    assert select_best([empty]) is None


def test_write_reports_format(tmp_path):
    r = KLReport("triplet", 0.6, [3, 7], [0.125, 0.5])
    write_reports([r], tmp_path / "kl.csv", tmp_path / "kl.json", best=("triplet", 0.6))
    assert (tmp_path / "kl.csv").read_text() == (
        "technique,quantile,observation_id,kl_estimate\ntriplet,0.6,3,0.125\ntriplet,0.6,7,0.5\n"
    )
    body = json.loads((tmp_path / "kl.json").read_text())
    assert body["best"] == {"technique": "triplet", "quantile": 0.6}
    assert body["reports"][0]["median"] == 0.3125


def test_sweep_selection_reproducible(small_ts):
    def quick(name, ts, labels):
        sgd = SGDConfig(epochs=20, batch_size=16, seed=1)
        fit = train_triplet if name == "triplet" else train_contrastive
        return fit(ts, labels, arch=(16, 4), sgd=sgd).distance

    runs = [quantile_sweep(small_ts, ["triplet", "contrastive"], [0.2, 0.4, 0.6], train=quick) for _ in range(2)]
    assert runs[0].best == runs[1].best is not None
    assert [r.estimates for r in runs[0].reports] == [r.estimates for r in runs[1].reports]
