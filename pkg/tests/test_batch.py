import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from advsysid import batch, markov, simkit
from advsysid.batch import BatchOptions
from advsysid.markov import RegressorDataset
from advsysid.simkit import AttackModel, SystemModel

# 1 - (39/40)^19 evaluated in exact rational arithmetic
Q_P40_K20 = 0.381858789518871352856915333847


def dataset(U, Y, k=1):
    U = np.asarray(U, dtype=float).reshape(len(U), -1)
    Y = np.asarray(Y, dtype=float).reshape(len(Y), -1)
    return RegressorDataset(Y, U, np.arange(len(Y)), k)


def outlier_instance():
    return dataset([1, 1, 1, 1], [2, 2, 2, 100])


def breakpoint_scan(u, y):
    """Minimizer of sum |y - g u| over the breakpoints y/u (1-D LAD oracle)."""
    u, y = np.ravel(u), np.ravel(y)
    cands = np.unique(y / u)
    vals = [np.abs(y - g * u).sum() for g in cands]
    return cands[int(np.argmin(vals))]


def nilpotent_data(seed=0, k=4):
    A = np.diag([1.0, 1.0], k=1)
    sys = SystemModel(A, [[0.0, 1.0], [1.0, 0.0], [1.0, 1.0]],
                      [[1.0, -0.5, 0.3], [0.2, 0.1, -1.0]], [[0.7, 0.0], [0.1, -0.4]])
    T = 2 * sys.m * k
    traj = simkit.simulate(sys, AttackModel(), np.zeros(3), T + k - 1, 1.0, k,
                           simkit.make_rng(seed))
    return sys, markov.build_dataset(traj)


def attacked_data(seed, n=8, m=2, r=3, k=5, T=300, p=0.05):
    rng = simkit.make_rng(seed)
    sys = simkit.gen_system(n, m, r, 0.5, rng)
    att = AttackModel("iid_gaussian", p=p, mean=np.full(n, 200.0), cov_scale=400.0)
    traj = simkit.simulate(sys, att, None, T + k - 1, 5.0, k, rng)
    return sys, markov.build_dataset(traj)


# --- options ---------------------------------------------------------------

def test_options_defaults_and_schedule():
    o = BatchOptions()
    assert (o.smoothing_eps0, o.smoothing_decay, o.eps_min) == (1.0, 0.1, 1e-12)
    assert (o.max_outer, o.max_inner, o.rel_tol) == (12, 500, 1e-10)
    sched = o.eps_schedule()
    assert sched[0] == 1.0 and sched[-1] == 1e-12
    assert all(a > b for a, b in zip(sched, sched[1:]))


def test_options_validation():
    with pytest.raises(ValueError):
        BatchOptions(method="l3")
    with pytest.raises(ValueError):
        BatchOptions(eps_min=2.0)
    with pytest.raises(ValueError):
        BatchOptions(smoothing_decay=1.0)
    with pytest.raises(ValueError):
        BatchOptions(rel_tol=0.0)


# --- least squares ---------------------------------------------------------

def test_least_squares_single_sample():
    est = batch.least_squares(dataset([2.0], [6.0]))
    assert est.G[0, 0] == pytest.approx(3.0)


def test_least_squares_nilpotent_exact():
    sys, data = nilpotent_data()
    est = batch.least_squares(data)
    assert np.linalg.norm(est.G - markov.true_markov(sys, 4).G) <= 1e-8


def test_least_squares_duplicate_sample_invariance(rng):
    U = rng.standard_normal((20, 3))
    Y = rng.standard_normal((20, 2))
    a = batch.least_squares(dataset(U, Y, k=1)).G
    b = batch.least_squares(dataset(np.vstack([U, U]), np.vstack([Y, Y]), k=1)).G
    assert np.allclose(a, b, rtol=0, atol=1e-12)


def test_least_squares_rank_warning(rng):
    data = dataset(rng.standard_normal((2, 4)), rng.standard_normal((2, 1)), k=2)
    with pytest.warns(UserWarning, match="minimum-norm"):
        est = batch.least_squares(data)
    assert np.allclose(data.regressors @ est.G.T, data.targets)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        batch.least_squares(dataset(np.zeros((0, 1)), np.zeros((0, 1))))


# --- robust estimators -----------------------------------------------------

def test_l2_clean_scalar():
    rng = simkit.make_rng(0)
    u = rng.standard_normal(30)
    est = batch.l2_estimator(dataset(u, 3 * u))
    assert est.G[0, 0] == pytest.approx(3.0, abs=1e-8)


@pytest.mark.parametrize("fn", [batch.l1_estimator, batch.l2_estimator])
def test_outlier_instance_matches_scan(fn):
    data = outlier_instance()
    oracle = breakpoint_scan(data.regressors, data.targets)
    assert oracle == 2.0
    assert abs(fn(data).G[0, 0] - oracle) <= 1e-6


@pytest.mark.parametrize("fn", [batch.l1_estimator, batch.l2_estimator])
def test_clean_nilpotent_exact(fn):
    sys, data = nilpotent_data()
    assert np.linalg.norm(fn(data).G - markov.true_markov(sys, 4).G) <= 1e-7


def test_l1_l2_coincide_for_scalar_output():
    rng = simkit.make_rng(3)
    U = rng.standard_normal((80, 3))
    y = U @ [1.0, -2.0, 0.5] + np.where(rng.random(80) < 0.1, 50.0, 0.0)
    data = dataset(U, y, k=3)
    a = batch.l1_estimator(data).G
    b = batch.l2_estimator(data).G
    assert np.allclose(a, b, rtol=0, atol=1e-8)


def test_l1_row_permutation():
    _, data = attacked_data(5, T=120)
    perm = [2, 0, 1]
    permuted = RegressorDataset(data.targets[:, perm], data.regressors, data.times, data.k)
    a = batch.l1_estimator(data).G
    b = batch.l1_estimator(permuted).G
    assert np.allclose(a[perm], b, rtol=0, atol=1e-9)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_l2_beats_least_squares_objective(seed):
    _, data = attacked_data(seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ls = batch.least_squares(data)
    est = batch.l2_estimator(data)
    f_ls = batch.l2_objective(ls.G, data)
    assert batch.l2_objective(est.G, data) <= f_ls * (1 + 1e-6)
    assert est.method == "l2" and est.T == data.T


@pytest.mark.parametrize("method", ["l1", "l2"])
def test_stationarity_certificate(method):
    sigma = 5.0
    _, data = attacked_data(11)
    est = batch.estimate(data, BatchOptions(method=method))
    assert est.converged
    mk = data.regressors.shape[1]
    assert est.stationarity <= 1e-6 * data.T * sigma * np.sqrt(mk)


def test_estimate_dispatch():
    _, data = attacked_data(0, T=60)
    for m in ("least_squares", "l1", "l2"):
        assert batch.estimate(data, BatchOptions(method=m)).method == m


@given(st.integers(0, 2**31), st.floats(0.0, 1.0))
def test_l2_objective_convex(seed, lam):
    rng = simkit.make_rng(seed)
    data = dataset(rng.standard_normal((15, 4)), rng.standard_normal((15, 2)), k=2)
    G1, G2 = rng.standard_normal((2, 2, 4))
    mid = batch.l2_objective(lam * G1 + (1 - lam) * G2, data)
    assert mid <= lam * batch.l2_objective(G1, data) + (1 - lam) * batch.l2_objective(G2, data) + 1e-9


def test_smoothed_gradients_match_finite_differences(rng):
    U = rng.standard_normal((10, 4))
    Y = rng.standard_normal((10, 2))
    G = rng.standard_normal((2, 4))
    D = rng.standard_normal((2, 4))
    eps, h = 0.3, 1e-6
    f2 = lambda G: np.sqrt(((Y - U @ G.T) ** 2).sum(1) + eps).sum()
    f1 = lambda G: np.sqrt((Y - U @ G.T) ** 2 + eps).sum()
    for f, grad in ((f2, batch.l2_smoothed_grad), (f1, batch.l1_smoothed_grad)):
        fd = (f(G + h * D) - f(G - h * D)) / (2 * h)
        assert fd == pytest.approx(np.vdot(grad(U, Y - U @ G.T, eps), D), rel=1e-6)


# --- theory bounds ---------------------------------------------------------

def test_attack_window_prob_exact():
    exact = 1 - Fraction(39, 40) ** 19
    assert float(exact) == pytest.approx(Q_P40_K20, abs=1e-15)
    assert batch.attack_window_prob(1 / 40, 20) == pytest.approx(Q_P40_K20, abs=1e-14)


def test_attack_window_prob_edges():
    assert batch.attack_window_prob(0.0, 7) == 0.0
    assert batch.attack_window_prob(0.3, 1) == 0.0


def test_theory_bounds_no_attack():
    sys = simkit.gen_system(4, 2, 3, 0.6, simkit.make_rng(0))
    cert = simkit.verify_stability(sys)
    tb = batch.theory_bounds(sys, cert, 0.0, 10, 2, 10.0, 50.0)
    want = np.linalg.norm(sys.C, 2) * (50.0 / 10.0 + np.sqrt(2) * np.linalg.norm(sys.B, 2))
    assert tb.q == 0.0
    assert tb.nu == pytest.approx(want, rel=1e-12)
    mk = 20
    assert tb.T_star_scale == pytest.approx(10 * (mk * np.log(mk) + np.log(20.0)), rel=1e-12)
    assert tb.error_bound == pytest.approx(cert.rho ** 9 * want / (1 - cert.rho), rel=1e-12)


def test_theory_bounds_k1_and_violation():
    sys = simkit.gen_system(3, 1, 1, 0.5, simkit.make_rng(1))
    cert = simkit.verify_stability(sys)
    assert batch.theory_bounds(sys, cert, 0.4, 1, 1, 1.0, 1.0).q == 0.0
    with pytest.raises(batch.AssumptionViolation):
        batch.theory_bounds(sys, cert, 0.2, 10, 1, 1.0, 1.0)


def test_state_norm_bounds_scale_with_T():
    sys = simkit.gen_system(3, 1, 1, 0.5, simkit.make_rng(1))
    cert = simkit.verify_stability(sys)
    sq, tot = batch.state_norm_bounds(sys, cert, 1.0, 2.0, 100)
    _, tot2 = batch.state_norm_bounds(sys, cert, 1.0, 2.0, 200)
    assert tot2 == pytest.approx(2 * tot)
    assert sq == pytest.approx((tot / 100) ** 2)


def test_estimate_csv_roundtrip(tmp_path):
    _, data = attacked_data(2, T=40)
    est = batch.l2_estimator(data)
    path = tmp_path / "est.csv"
    batch.write_estimate_csv(est, path, seed=17)
    head = path.read_text().splitlines()[0]
    for key in ("method=l2", f"T={data.T}", "k=5", "seed=17", "stationarity="):
        assert key in head
    back = batch.read_estimate_csv(path)
    assert np.array_equal(back.G, est.G)
    assert back.stationarity == est.stationarity
