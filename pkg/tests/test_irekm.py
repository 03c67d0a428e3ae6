import json

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from oracles import naive_covariance
from torsion.grid import GridSpec
from torsion.irekm import (
    XI0_SQ_FLOOR,
    Ensemble,
    GammaSelectionError,
    InversionTrace,
    PredictionError,
    PriorSpec,
    ensemble_stats,
    init_ensemble,
    noise_level,
    predict,
    relative_errors,
    residual,
    run_irekm,
    select_gamma,
    update_ensemble,
)
from torsion.observe import ObservationSet, SolverSettings, generate_data, observe
from torsion.plasticity import MaterialParams, ParameterBox

TRUTH = MaterialParams(0.3, 0.02, 42.3)
ANGLES = (1.0, 0.5, 0.1, 0.005)
COARSE = SolverSettings(GridSpec(1, 1, 8, 8))


# ---------------------------------------------------------------- prior / ensemble


def test_prior_validation():
    with pytest.raises(ValueError):
        PriorSpec(kappa=(0.5, 0.4))
    with pytest.raises(ValueError):
        PriorSpec(kappa=(0.2, 1.2))
    with pytest.raises(ValueError):
        PriorSpec(xi0_sq=(-0.1, 0.1))
    assert PriorSpec.from_dict(PriorSpec().to_dict()) == PriorSpec()


def test_prior_box_floor():
    box = PriorSpec().box()
    assert box.lower[1] == XI0_SQ_FLOOR


def test_init_ensemble_bounds_and_determinism():
    prior = PriorSpec()
    e = init_ensemble(prior, 200, 0)
    assert e.size == 200 and e.n == 0
    assert np.all(e.members >= prior.box().lower) and np.all(e.members <= prior.upper)
    np.testing.assert_array_equal(e.members, init_ensemble(prior, 200, 0).members)
    with pytest.raises(ValueError):
        init_ensemble(prior, 1, 0)


def test_init_ensemble_means():
    prior = PriorSpec()
    n = 100_000
    means = init_ensemble(prior, n, 1).members.mean(axis=0)
    width = prior.upper - prior.lower
    mid = (prior.upper + prior.lower) / 2
    assert np.all(np.abs(means - mid) <= 3 * width / np.sqrt(12) / np.sqrt(n))


def test_ensemble_validation():
    with pytest.raises(ValueError):
        Ensemble(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        Ensemble(np.zeros((4, 2)))


# ---------------------------------------------------------------- predict


def test_predict_identical_members():
    e = Ensemble(np.tile([0.3, 0.02, 42.3], (3, 1)))
    w = predict(e, ANGLES, COARSE)
    assert np.all(w == w[0])
    np.testing.assert_array_equal(w[0], observe(TRUTH, ANGLES, COARSE))


def test_predict_elastic_member():
    e = Ensemble(np.array([[1.0, 0.02, 42.3], [1.0, 0.02, 42.3]]))
    settings_fine = SolverSettings(GridSpec.from_spacing(dx=0.02))
    assert predict(e, [0.005], settings_fine)[0, 0] == pytest.approx(0.029732, rel=0.01)


def test_predict_order_and_jobs_independent():
    e = init_ensemble(PriorSpec(), 6, 3)
    w = predict(e, ANGLES, COARSE)
    flipped = predict(Ensemble(e.members[::-1]), ANGLES, COARSE)[::-1]
    np.testing.assert_array_equal(w, flipped)
    np.testing.assert_array_equal(w, predict(e, ANGLES, COARSE, n_jobs=3))


def test_predict_failure_lists_members():
    e = Ensemble(np.array([[1.0, 0.02, 42.3], [0.3, 0.02, 42.3]]))
    with pytest.raises(PredictionError) as info:
        predict(e, [1.0], SolverSettings(GridSpec(1, 1, 8, 8), max_iter=2))
    assert info.value.failed_members == [1]


# ---------------------------------------------------------------- statistics


def test_stats_identical_members():
    e = Ensemble(np.tile([0.3, 0.02, 42.3], (4, 1)))
    s = ensemble_stats(e, np.ones((4, 2)))
    assert np.all(s.C_ww == 0) and np.all(s.C_theta_w == 0)


def test_stats_hand_case():
    e = Ensemble(np.array([[0.0, 0.02, 42.0], [2.0, 0.02, 42.0]]))
    s = ensemble_stats(e, np.array([[0.0], [2.0]]))
    assert s.theta_mean[0] == 1.0 and s.w_mean[0] == 1.0
    assert s.C_theta_w[0, 0] == 2.0 and s.C_ww[0, 0] == 2.0


@pytest.mark.parametrize("seed", range(10))
def test_stats_match_naive_oracle(seed):
    rng = np.random.default_rng(seed)
    ne, m = rng.integers(2, 11), rng.integers(1, 6)
    theta = rng.random((ne, 3)) * [1, 0.1, 1] + [0, 0, 42]
    w = rng.standard_normal((ne, m))
    s = ensemble_stats(Ensemble(theta), w)
    np.testing.assert_allclose(s.C_ww, naive_covariance(w.tolist(), w.tolist()), rtol=0, atol=1e-12)
    np.testing.assert_allclose(s.C_theta_w, naive_covariance(theta.tolist(), w.tolist()), rtol=0, atol=1e-12)
    np.testing.assert_array_equal(s.C_ww, s.C_ww.T)
    assert np.linalg.eigvalsh(s.C_ww).min() > -1e-12


def test_stats_shape_check():
    with pytest.raises(ValueError):
        ensemble_stats(Ensemble(np.zeros((3, 3))), np.zeros((2, 1)))


# ---------------------------------------------------------------- gamma selection


def test_select_gamma_hand_case():
    gamma, i = select_gamma([[1.0]], 1.0, [1.0], [0.0], gamma0=0.25, rho=0.5)
    assert gamma == 1.0 and i == 2


def test_select_gamma_immediate_and_zero_residual():
    assert select_gamma([[1.0]], 1.0, [1.0], [0.0], gamma0=4.0, rho=0.5) == (4.0, 0)
    assert select_gamma([[1.0]], 1.0, [2.0], [2.0], gamma0=0.3, rho=0.5) == (0.3, 0)


def test_select_gamma_rules_agree_at_unit_sigma():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 3))
    C_ww, r = a @ a.T, rng.standard_normal(3)
    assert select_gamma(C_ww, 1.0, r, 0 * r, rule="scaled") == select_gamma(C_ww, 1.0, r, 0 * r, rule="literal")


def _condition(C_ww, sigma, r, gamma, rho, rule):
    # independent evaluation with explicit matrix powers of C
    C = sigma**2 * np.eye(len(r))
    half, inv_half = scipy.linalg.sqrtm(C).real, np.linalg.inv(scipy.linalg.sqrtm(C).real)
    y = np.linalg.inv(C_ww + gamma * C) @ r
    if rule == "scaled":
        return gamma * np.linalg.norm(half @ y) >= rho * np.linalg.norm(inv_half @ r)
    return gamma * np.linalg.norm(inv_half @ y) >= rho * np.linalg.norm(np.linalg.inv(C) @ r)


@pytest.mark.parametrize("rule", ["scaled", "literal"])
def test_select_gamma_first_crossing(rule):
    rng = np.random.default_rng(42)
    for _ in range(100):
        m = rng.integers(1, 6)
        a = rng.standard_normal((m, m)) * 10.0 ** rng.uniform(-4, 1)
        C_ww = a @ a.T
        # the literal test has no solution once sigma > 1 / rho
        sigma = 10.0 ** rng.uniform(-3, 0.5 if rule == "scaled" else 0)
        r = rng.standard_normal(m) * 10.0 ** rng.uniform(-3, 1)
        gamma0, rho = 10.0 ** rng.uniform(-2, 1), rng.uniform(0.1, 0.9)
        gamma, i = select_gamma(C_ww, sigma, r, np.zeros(m), gamma0, rho, rule=rule)
        assert gamma == gamma0 * 2.0**i
        assert _condition(C_ww, sigma, r, gamma, rho, rule)
        if gamma > gamma0:
            assert not _condition(C_ww, sigma, r, gamma / 2, rho, rule)


def test_select_gamma_literal_unreachable_for_large_sigma():
    # as gamma grows the literal left side tends to |r| / sigma^3, below rho |r| / sigma^2
    with pytest.raises(GammaSelectionError):
        select_gamma([[1.0]], 2.0, [1.0], [0.0], rho=0.7, rule="literal")
    assert select_gamma([[1.0]], 2.0, [1.0], [0.0], rho=0.7, rule="scaled")[0] >= 1.0


def test_select_gamma_errors():
    with pytest.raises(ValueError):
        select_gamma([[1.0]], 1.0, [1.0], [0.0], gamma0=0)
    with pytest.raises(ValueError):
        select_gamma([[1.0]], 1.0, [1.0], [0.0], rho=1.0)
    with pytest.raises(ValueError):
        select_gamma([[1.0]], 0.0, [1.0], [0.0])
    with pytest.raises(ValueError):
        select_gamma([[1.0]], 1.0, [1.0], [0.0], rule="other")
    # rho close to one with a huge ensemble covariance never crosses within a tiny cap
    with pytest.raises(GammaSelectionError):
        select_gamma([[1e30]], 1.0, [1.0], [0.0], gamma0=1e-10, rho=0.99, cap=3)


# ---------------------------------------------------------------- update


WIDE = PriorSpec(kappa=(0.0, 1.0), xi0_sq=(0.0, 1.0), G=(1.0, 100.0)).box()


def test_update_hand_case():
    e = Ensemble(np.array([[0.0, 0.02, 42.0], [2.0, 0.02, 42.0]]))
    w = np.array([[0.0], [2.0]])
    stats = ensemble_stats(e, w)
    box = ParameterBox((-10.0, 0.0, 1.0), (10.0, 1.0, 100.0))
    # C_kw = C_ww = 2 and gamma * C = 2, so the gain is 2 / (2 + 2) = 0.5
    new = update_ensemble(e, w, stats, w + [[1.0], [0.0]], gamma=2.0, sigma=1.0, box=box)
    assert new.members[0, 0] == 0.5
    assert new.members[1, 0] == 2.0
    assert new.n == 1


def test_update_zero_gain_unchanged():
    e = init_ensemble(PriorSpec(), 5, 0)
    w = np.zeros((5, 2))
    stats = ensemble_stats(e, w)
    new = update_ensemble(e, w, stats, np.ones((5, 2)), 1.0, 0.1, PriorSpec().box())
    np.testing.assert_array_equal(new.members, e.members)


def test_update_clamps_to_floor():
    e = Ensemble(np.array([[0.3, 0.001, 42.3], [0.3, 0.003, 42.3]]))
    w = np.array([[0.0], [1.0]])
    stats = ensemble_stats(e, w)
    new = update_ensemble(e, w, stats, np.array([[-100.0], [1.0]]), 1.0, 1.0, PriorSpec().box())
    assert new.members[0, 1] == XI0_SQ_FLOOR


def test_update_shrinks_with_gamma():
    rng = np.random.default_rng(5)
    e = Ensemble(np.array([0.5, 0.05, 42.5]) + 0.01 * rng.standard_normal((8, 3)))
    w = rng.standard_normal((8, 3))
    stats = ensemble_stats(e, w)
    dj = w + rng.standard_normal((8, 3))
    steps = []
    for gamma in np.logspace(0, 1, 6):
        new = update_ensemble(e, w, stats, dj, gamma, 1.0, WIDE)
        steps.append(np.abs(new.members - e.members).sum())
    assert np.all(np.diff(steps) < 0)


def test_update_rejects_nonpositive_gamma():
    e = Ensemble(np.zeros((2, 3)) + [0.3, 0.02, 42.3])
    stats = ensemble_stats(e, np.zeros((2, 1)))
    with pytest.raises(ValueError):
        update_ensemble(e, np.zeros((2, 1)), stats, np.zeros((2, 1)), 0.0, 1.0, WIDE)


# ---------------------------------------------------------------- residual, noise, errors


def test_residual():
    assert residual([1.0, 2.0], [1.0, 2.0], 0.1) == 0.0
    assert residual([0.2], [0.0], 0.1) == pytest.approx(2.0, abs=1e-12)
    assert residual([0.2], [0.0], 0.01) == pytest.approx(10 * residual([0.2], [0.0], 0.1), rel=1e-12)
    with pytest.raises(ValueError):
        residual([1.0], [0.0], 0.0)


def test_noise_level_known_noise():
    data = generate_data(TRUTH, ANGLES, 1e-3, 7, COARSE)
    z = (data.d - observe(TRUTH, ANGLES, COARSE)) / 1e-3
    assert noise_level(data, COARSE) == pytest.approx(np.linalg.norm(z), rel=1e-12)


def test_noise_level_shrinks_with_sigma():
    small = generate_data(TRUTH, ANGLES, 1e-9, 7, COARSE)
    big = generate_data(TRUTH, ANGLES, 1e-3, 7, COARSE)
    # the same z in both cases: delta is the norm of z, up to roundoff at tiny sigma
    assert noise_level(big, COARSE) == pytest.approx(noise_level(small, COARSE), rel=1e-3)


def test_noise_level_without_truth():
    data = ObservationSet(ANGLES, [1.0, 0.5, 0.3, 0.01], 1e-3)
    assert noise_level(data) == 2.0
    with pytest.raises(ValueError):
        noise_level(ObservationSet(ANGLES, [1.0, 0.5, 0.3, 0.01], 0.0))


def test_noise_level_chi_squared_mean():
    from torsion import rng

    z = rng.normals(0, rng.DATA_NOISE, 1, 4)
    deltas_sq = [np.sum(rng.normals(s, rng.DATA_NOISE, 1, 4) ** 2) for s in range(10_000)]
    assert np.mean(deltas_sq) == pytest.approx(4.0, rel=0.05)
    assert z.shape == (1, 4)


def test_relative_errors_hand_case():
    e = relative_errors(MaterialParams(0.33, 0.022, 42.3), TRUTH)
    assert e["e_kappa"] == pytest.approx(0.1, abs=1e-12)
    assert e["e_xi"] == pytest.approx(0.1, abs=1e-12)
    assert e["e_G"] == 0.0
    expected = np.hypot(0.03, 0.002) / np.linalg.norm([0.3, 0.02, 42.3])
    assert e["e_n"] == pytest.approx(expected, abs=1e-12)
    assert e["e_n"] == pytest.approx(7.107e-4, rel=1e-3)


def test_relative_errors_published_row():
    e = relative_errors(MaterialParams(0.300, 0.0199, 42.34), TRUTH)
    assert e["e_G"] == pytest.approx(9.46e-4, rel=1e-2)


def test_relative_errors_zero_truth():
    assert relative_errors(TRUTH, TRUTH) == {"e_kappa": 0, "e_xi": 0, "e_G": 0, "e_n": 0}
    with pytest.raises(ValueError):
        relative_errors(TRUTH, MaterialParams(0.0, 0.02, 42.3))


# ---------------------------------------------------------------- full loop


@pytest.fixture(scope="module")
def small_run():
    data = generate_data(TRUTH, ANGLES, 1e-3, 0, COARSE)
    trace = run_irekm(PriorSpec(), data, n_members=20, max_iter=8, seed=1, settings=COARSE)
    return data, trace


def test_run_trace_integrity(small_run):
    data, trace = small_run
    assert len(trace.records) == trace.n + 1
    assert trace.stop_reason in ("discrepancy", "max-iter")
    assert trace.tau == pytest.approx(1 / 0.7)
    for k, rec in enumerate(trace.records):
        assert rec.n == k and rec.R >= 0
    last = trace.records[-1]
    assert last.gamma is None
    assert all(r.gamma is not None for r in trace.records[:-1])
    if trace.stop_reason == "discrepancy":
        assert last.R <= trace.tau * trace.delta
    else:
        assert trace.n == 8


def test_run_residual_matches_offline(small_run):
    data, trace = small_run
    # replay: the recorded R_n is the residual of the mean prediction of the ensemble at n
    prior = PriorSpec()
    from torsion.observe import perturb_for_ensemble

    e = init_ensemble(prior, 20, 1)
    dj = perturb_for_ensemble(data.d, data.sigma, 20, 1)
    for rec in trace.records:
        w = predict(e, ANGLES, COARSE)
        stats = ensemble_stats(e, w)
        assert rec.R == residual(data.d, w.mean(axis=0), data.sigma)
        if rec.gamma is not None:
            e = update_ensemble(e, w, stats, dj, rec.gamma, data.sigma, prior.box())


def test_run_deterministic(small_run):
    data, trace = small_run
    again = run_irekm(PriorSpec(), data, n_members=20, max_iter=8, seed=1, settings=COARSE)
    assert again.to_jsonl() == trace.to_jsonl()


def test_trace_files_round_trip(small_run, tmp_path):
    _, trace = small_run
    paths = trace.write(tmp_path)
    assert InversionTrace.from_jsonl(paths["trace"].read_text()).to_jsonl() == trace.to_jsonl()
    lines = paths["errors"].read_text().splitlines()
    assert lines[0] == "n,e_kappa,e_xi,e_G,e_n,R_n,gamma_n"
    assert len(lines) == trace.n + 2
    summary = json.loads(paths["summary"].read_text())
    assert summary["n"] == trace.n and summary["stop_reason"] == trace.stop_reason


def test_run_stops_at_max_iter():
    data = generate_data(TRUTH, ANGLES, 1e-4, 0, COARSE)
    trace = run_irekm(PriorSpec(), data, n_members=10, max_iter=1, seed=0, settings=COARSE, delta=0.0)
    assert trace.stop_reason == "max-iter" and trace.n == 1 and len(trace.records) == 2


def test_run_immediate_discrepancy():
    data = generate_data(TRUTH, ANGLES, 1e-3, 0, COARSE)
    trace = run_irekm(PriorSpec(), data, n_members=10, seed=0, settings=COARSE, delta=1e12)
    assert trace.stop_reason == "discrepancy" and trace.n == 0


def test_run_without_truth_uses_sqrt_m():
    data = generate_data(TRUTH, ANGLES, 1e-3, 0, COARSE)
    blind = ObservationSet(data.angles, data.d, data.sigma)
    trace = run_irekm(PriorSpec(), blind, n_members=10, max_iter=1, seed=0, settings=COARSE)
    assert trace.delta == 2.0
    assert trace.records[0].errors is None


def test_run_callback_sees_every_record():
    data = generate_data(TRUTH, ANGLES, 1e-3, 0, COARSE)
    seen = []
    trace = run_irekm(PriorSpec(), data, n_members=10, max_iter=2, seed=0, settings=COARSE, callback=seen.append)
    assert seen == trace.records


def test_run_prediction_failure_keeps_trace():
    data = generate_data(TRUTH, ANGLES, 1e-3, 0, COARSE)
    tight = SolverSettings(GridSpec(1, 1, 8, 8), max_iter=2)
    with pytest.raises(PredictionError) as info:
        run_irekm(PriorSpec(), data, n_members=10, seed=0, settings=tight, delta=0.0)
    assert info.value.trace is not None and info.value.trace.records == []
    assert info.value.failed_members


def test_run_validation():
    data = generate_data(TRUTH, ANGLES, 1e-3, 0, COARSE)
    with pytest.raises(ValueError):
        run_irekm(PriorSpec(), data, rho=1.0, settings=COARSE)
    with pytest.raises(ValueError):
        run_irekm(PriorSpec(), data, max_iter=0, settings=COARSE)
    with pytest.raises(ValueError):
        run_irekm(PriorSpec(), ObservationSet(ANGLES, data.d, 0.0), settings=COARSE)


@settings(max_examples=20, deadline=None)
@given(
    members=st.lists(
        st.tuples(st.floats(0.2, 0.9), st.floats(0, 0.15), st.floats(42, 43)), min_size=2, max_size=6
    ),
    shift=st.floats(-10, 10),
    gamma=st.floats(1e-3, 1e3),
)
def test_update_stays_in_box(members, shift, gamma):
    box = PriorSpec().box()
    e = Ensemble(box.clip(np.array(members)))
    w = np.arange(len(members), dtype=float)[:, None] * [1.0, -2.0]
    stats = ensemble_stats(e, w)
    new = update_ensemble(e, w, stats, w + shift, gamma, 0.5, box)
    assert box.contains(new.members)
