import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pvgpr import gpr
from pvgpr.errors import (
    ArtifactCorruptError,
    ConstantColumnError,
    DimensionMismatchError,
    TooFewPointsError,
)
from pvgpr.gpr import FitOptions, KernelHyperparams as HP


# ---------------------------------------------------------------- dense oracles
def dense_kernel(X1, X2, ls, sf2):
    """Matérn 5/2 entry-by-entry from the closed form."""
    K = np.empty((len(X1), len(X2)))
    for i, u in enumerate(X1):
        for j, v in enumerate(X2):
            r = math.sqrt(sum(((a - b) / l) ** 2 for a, b, l in zip(u, v, np.broadcast_to(ls, len(u)))))
            K[i, j] = sf2 * (1 + math.sqrt(5) * r + 5.0 / 3.0 * r * r) * math.exp(-math.sqrt(5) * r)
    return K


def dense_posterior(X, y, hp, Xq, include_noise=False):
    A = dense_kernel(X, X, hp.length_scale, hp.signal_var) + hp.sigma2 * np.eye(len(X))
    Ainv = np.linalg.inv(A)
    H = np.ones(len(X))
    beta = (H @ Ainv @ y) / (H @ Ainv @ H)
    r = y - beta * H
    _, logdet = np.linalg.slogdet(A)
    lml = -0.5 * r @ Ainv @ r - 0.5 * len(X) * math.log(2 * math.pi) - 0.5 * logdet
    Ks = dense_kernel(X, Xq, hp.length_scale, hp.signal_var)
    mean = beta + Ks.T @ Ainv @ r
    var = hp.signal_var - np.einsum("ij,ik,kj->j", Ks, Ainv, Ks)
    if include_noise:
        var = var + hp.sigma2
    return beta, lml, mean, var


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300)))


def raw_model(X, y, hp):
    """A TrainedGpr with identity standardisation, for oracle comparisons."""
    q = X.shape[1]
    std = gpr.Standardizer(np.zeros(q), np.ones(q), 0.0, 1.0, np.ones(q, bool))
    s = gpr._solve(X, y, hp)
    return gpr.TrainedGpr(std, X, y, hp, s.beta, s.L, s.alpha, s.jitter, s.lml)


# ---------------------------------------------------------------- kernel
def test_matern_anchor_values():
    hp = HP(0.3, 0.0, 0.0)
    ls = hp.length_scale
    assert gpr.matern52([1.0, 2.0], [1.0, 2.0], hp) == pytest.approx(1.0)
    assert gpr.matern52([0.0], [ls], hp) == pytest.approx(0.52399, abs=1e-4)
    assert gpr.matern52([0.0], [ls], hp) == pytest.approx((1 + math.sqrt(5) + 5 / 3) * math.exp(-math.sqrt(5)))
    assert gpr.matern52([0.0], [100 * ls], hp) < 1e-80
    hp2 = HP(0.0, 0.5, 0.0)
    assert gpr.matern52([0.0, 0.0], [0.0, 0.0], hp2) == pytest.approx(10.0)


def test_matern_ard_and_dimension_errors():
    hp = HP((0.0, 1.0), 0.0, 0.0)
    # r = sqrt((1/1)^2 + (10/10)^2) = sqrt 2
    r = math.sqrt(2)
    expected = (1 + math.sqrt(5) * r + 5 / 3 * r * r) * math.exp(-math.sqrt(5) * r)
    assert gpr.matern52([0, 0], [1, 10], hp) == pytest.approx(expected)
    with pytest.raises(DimensionMismatchError):
        gpr.matern52([0, 0], [1, 2, 3], hp)
    with pytest.raises(DimensionMismatchError):
        gpr.matern52([0, 0, 0], [1, 2, 3], hp)


def test_kernel_matrix_examples():
    hp = HP(0.2, 0.1, 0.0)
    assert gpr.build_kernel_matrix([[1.0, 2.0]], hp).tolist() == [[hp.signal_var]]
    K = gpr.build_kernel_matrix([[1.0], [1.0], [3.0]], hp)
    assert K[0, 1] == K[0, 0] == hp.signal_var
    ls = hp.length_scale
    K = gpr.build_kernel_matrix([[0.0], [ls], [2 * ls]], hp)
    assert K[0, 2] == pytest.approx(0.13867 * hp.signal_var, abs=1e-4 * hp.signal_var)
    assert np.array_equal(K, K.T)


def test_kernel_matrix_matches_dense():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(12, 3))
    for hp in (HP(0.1, 0.2, 0.0), HP((0.1, -0.2, 0.4), -0.1, 0.0)):
        np.testing.assert_allclose(gpr.build_kernel_matrix(X, hp),
                                   dense_kernel(X, X, hp.length_scale, hp.signal_var), rtol=1e-12)


def test_kernel_psd_on_random_sets():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n, q = rng.integers(2, 40), rng.integers(1, 5)
        X = rng.uniform(-3, 3, size=(n, q))
        hp = HP(rng.uniform(-1, 1), rng.uniform(-1, 1), 0.0)
        assert np.linalg.eigvalsh(gpr.build_kernel_matrix(X, hp)).min() >= -1e-10 * hp.signal_var


# ---------------------------------------------------------------- beta / likelihood
def test_beta_constant_output():
    X = np.linspace(0, 1, 6)[:, None]
    assert gpr.concentrated_beta(X, np.full(6, 3.5), HP(-0.5, 0.0, 0.1)) == pytest.approx(3.5)


def test_beta_identity_covariance_is_sample_mean():
    X = np.arange(5.0)[:, None] * 1e6  # all pairs far apart -> K ~ sigma_f^2 I
    y = np.array([1.0, 4.0, 2.0, 8.0, 5.0])
    hp = HP(0.0, -8.0, 1.0)
    assert gpr.concentrated_beta(X, y, hp) == pytest.approx(y.mean(), rel=1e-12)


def test_beta_three_point_explicit_inverse():
    X = np.array([[0.0], [0.7], [1.5]])
    y = np.array([1.0, -0.5, 2.0])
    hp = HP(0.0, 0.1, 0.2)
    A = dense_kernel(X, X, hp.length_scale, hp.signal_var) + hp.sigma2 * np.eye(3)
    Ainv = np.linalg.inv(A)
    one = np.ones(3)
    expected = (one @ Ainv @ y) / (one @ Ainv @ one)
    assert gpr.concentrated_beta(X, y, hp) == pytest.approx(expected, rel=1e-12)


def test_lml_single_point_standard_normal():
    # sigma_f^2 + sigma^2 = 1 up to the noise floor
    val = gpr.log_marginal_likelihood([[0.0]], [0.0], HP(0.0, 0.0, 0.0))
    assert val == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-7)
    assert val == pytest.approx(-0.91894, abs=1e-5)


def test_lml_two_point_hand_formula():
    X = np.array([[0.0], [1.0]])
    y = np.array([0.3, 1.1])
    hp = HP(0.0, 0.0, 0.25)
    k = (1 + math.sqrt(5) + 5 / 3) * math.exp(-math.sqrt(5))
    a, b = 1.0 + 0.25, k
    det = a * a - b * b
    inv = np.array([[a, -b], [-b, a]]) / det
    beta = (inv.sum(axis=0) @ y) / inv.sum()
    r = y - beta
    expected = -0.5 * r @ inv @ r - math.log(2 * math.pi) - 0.5 * math.log(det)
    assert gpr.log_marginal_likelihood(X, y, hp) == pytest.approx(expected, rel=1e-10)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 20), q=st.integers(1, 3), ard=st.booleans())
def test_cholesky_path_equals_dense(seed, n, q, ard):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-2, 2, size=(n, q))
    y = rng.normal(size=n)
    tl = tuple(rng.uniform(-0.5, 0.5, q)) if ard else rng.uniform(-0.5, 0.5)
    hp = HP(tl, rng.uniform(-0.5, 0.5), rng.uniform(0.05, 1.0))
    Xq = rng.uniform(-2.5, 2.5, size=(7, q))
    beta, lml, mean, var = dense_posterior(X, y, hp, Xq, include_noise=True)
    m = raw_model(X, y, hp)
    assert rel_err(m.beta, beta) < 1e-8
    assert rel_err(m.lml, lml) < 1e-8
    p = gpr.predict(m, Xq, include_noise=True)
    assert rel_err(p.mean, mean) < 1e-8
    assert rel_err(p.variance, var) < 1e-8


def test_five_point_posterior_matches_dense():
    X = np.array([[-2.0], [-1.0], [0.0], [1.2], [2.5]])
    y = np.sin(X[:, 0])
    hp = HP(0.1, 0.0, 0.01)
    Xq = np.linspace(-3, 3, 13)[:, None]
    _, _, mean, var = dense_posterior(X, y, hp, Xq)
    p = gpr.predict(raw_model(X, y, hp), Xq)
    np.testing.assert_allclose(p.mean, mean, rtol=1e-8)
    np.testing.assert_allclose(p.variance, var, rtol=1e-8)
    assert not p.includes_noise


def test_noiseless_interpolation_and_prior_reversion():
    X = np.array([[0.0], [1.0], [2.5], [4.0]])
    y = np.array([0.5, -1.0, 2.0, 0.0])
    hp = HP(0.0, 0.0, 0.0)
    m = raw_model(X, y, hp)
    p = gpr.predict(m, X)
    np.testing.assert_allclose(p.mean, y, atol=1e-3)
    np.testing.assert_allclose(p.variance, 0.0, atol=1e-6)
    far = gpr.predict(m, [[1e3]], include_noise=True)
    assert far.mean[0] == pytest.approx(m.beta)
    assert far.variance[0] == pytest.approx(hp.signal_var + hp.sigma2)


def test_predict_dimension_mismatch():
    rng = np.random.default_rng(3)
    m = gpr.fit(rng.normal(size=(10, 2)), rng.normal(size=10), FitOptions(n_starts=1, max_evals=50))
    with pytest.raises(DimensionMismatchError):
        gpr.predict(m, np.zeros((3, 3)))


# ---------------------------------------------------------------- fitting
def gp_draw(rng, X, hp):
    K = gpr.build_kernel_matrix(X, hp) + hp.sigma2 * np.eye(len(X))
    return np.linalg.cholesky(K) @ rng.normal(size=len(X))


def test_fit_at_least_matches_truth_likelihood():
    rng = np.random.default_rng(10)
    X = np.sort(rng.uniform(0, 10, 200))[:, None]
    truth = HP(math.log10(1.5), 0.0, 0.01)
    y = 3.0 + gp_draw(rng, X, truth)
    m = gpr.fit(X, y)
    s = m.standardizer
    truth_std = HP(truth.theta_l - math.log10(s.x_std[0]), truth.theta_f - math.log10(s.y_std),
                   truth.sigma2 / s.y_std ** 2)
    truth_lml = gpr.log_marginal_likelihood(s.transform(X), s.transform_y(y), truth_std)
    assert m.lml >= truth_lml - 1e-6


def test_fit_pure_noise_variance_bookkeeping():
    rng = np.random.default_rng(11)
    X = rng.uniform(0, 1, size=(100, 2))
    y = rng.normal(size=100)
    m = gpr.fit(X, y, FitOptions(n_starts=4))
    total = (m.hp.signal_var + m.hp.sigma2) * m.standardizer.y_std ** 2
    assert total == pytest.approx(1.0, rel=0.3)


def test_fit_deterministic():
    rng = np.random.default_rng(12)
    X = rng.normal(size=(40, 2))
    y = X[:, 0] ** 2 + 0.1 * rng.normal(size=40)
    opts = FitOptions(n_starts=3, seed=5)
    a, b = gpr.fit(X, y, opts), gpr.fit(X, y, opts)
    assert a.hp == b.hp
    assert a.beta == b.beta


def test_fit_report_records_every_start():
    rng = np.random.default_rng(13)
    X = rng.normal(size=(30, 1))
    m = gpr.fit(X, np.sin(X[:, 0]), FitOptions(n_starts=5))
    starts = m.fit_report["starts"]
    assert len(starts) == 5
    assert m.fit_report["lml_opt"] == max(s["lml"] for s in starts)


def test_fit_errors():
    rng = np.random.default_rng(14)
    with pytest.raises(TooFewPointsError):
        gpr.fit(rng.normal(size=(4, 2)), rng.normal(size=4))
    X = rng.normal(size=(10, 2))
    X[:, 1] = 7.0
    with pytest.raises(ConstantColumnError):
        gpr.fit(X, rng.normal(size=10))


def test_fit_drop_constant_column():
    rng = np.random.default_rng(15)
    X = rng.normal(size=(20, 2))
    X[:, 1] = 7.0
    y = np.sin(X[:, 0])
    m = gpr.fit(X, y, FitOptions(n_starts=2, constant_columns="drop"))
    assert m.X.shape == (20, 1)
    Xq = np.column_stack([X[:3, 0], [100.0, -5.0, 0.0]])
    np.testing.assert_allclose(gpr.predict(m, Xq).mean, gpr.predict(m, X[:3]).mean)


def test_fit_constant_output_reverts_to_constant():
    rng = np.random.default_rng(16)
    X = rng.normal(size=(25, 3))
    m = gpr.fit(X, np.full(25, 2.0))
    p = gpr.predict(m, rng.normal(size=(5, 3)))
    np.testing.assert_allclose(p.mean, 2.0, atol=1e-9)


def test_fit_ard_option():
    rng = np.random.default_rng(17)
    X = rng.uniform(0, 1, size=(40, 2))
    y = np.sin(6 * X[:, 0]) + 0.01 * rng.normal(size=40)
    m = gpr.fit(X, y, FitOptions(n_starts=2, ard=True))
    assert m.hp.ard and len(m.hp.theta_l) == 2
    # the irrelevant second input ends with the longer length scale
    assert m.hp.theta_l[1] > m.hp.theta_l[0]


def test_fit_subsampled_optimisation_conditions_on_all_points():
    rng = np.random.default_rng(18)
    X = rng.uniform(0, 5, size=(120, 1))
    y = np.sin(X[:, 0])
    m = gpr.fit(X, y, FitOptions(n_starts=2, max_opt_points=40))
    assert m.fit_report["n_opt_points"] == 40
    assert m.n_train == 120


def test_training_fit_beats_constant_predictor():
    rng = np.random.default_rng(19)
    X = rng.uniform(0, 4, size=(60, 2))
    y = np.cos(X[:, 0]) + X[:, 1] + 0.2 * rng.normal(size=60)
    m = gpr.fit(X, y, FitOptions(n_starts=3))
    pred = gpr.predict(m, X).mean
    beta_raw = m.standardizer.inverse_y(m.beta)
    assert np.sqrt(np.mean((pred - y) ** 2)) <= np.sqrt(np.mean((beta_raw - y) ** 2))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_noiseless_variance_bounded_by_signal(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(15, 2))
    hp = HP(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(1e-6, 1))
    p = gpr.predict(raw_model(X, rng.normal(size=15), hp), rng.normal(size=(20, 2)) * 3)
    assert np.all(p.variance >= 0)
    assert np.all(p.variance <= hp.signal_var + 1e-10)


@settings(max_examples=30, deadline=None)
@given(ys=st.lists(st.floats(-1e4, 1e4, allow_nan=False), min_size=2, max_size=30))
def test_standardizer_round_trip(ys):
    y = np.asarray(ys)
    s = gpr.Standardizer.fit(np.arange(len(y), dtype=float)[:, None], y)
    np.testing.assert_allclose(s.inverse_y(s.transform_y(y)), y, rtol=1e-12, atol=1e-12 * max(1, np.abs(y).max()))


def test_cholesky_invariants_after_fit():
    rng = np.random.default_rng(20)
    X = rng.normal(size=(50, 3))
    m = gpr.fit(X, X[:, 0] * X[:, 1], FitOptions(n_starts=2))
    A = gpr.build_kernel_matrix(m.X, m.hp) + (m.hp.sigma2 + m.jitter) * np.eye(50)
    assert np.linalg.norm(m.chol_L @ m.chol_L.T - A) / np.linalg.norm(A) <= 1e-8
    assert np.linalg.norm(A @ m.alpha - (m.y - m.beta)) <= 1e-8 * np.linalg.norm(m.y)


def test_jitter_escalation_on_duplicates():
    X = np.zeros((6, 1))
    L, jitter = gpr.jittered_cholesky(gpr.build_kernel_matrix(X, HP(0.0, 0.0, 0.0)))
    assert jitter > 0
    assert np.all(np.isfinite(L))


# ---------------------------------------------------------------- serialisation
def test_artifact_round_trip_and_corruption():
    rng = np.random.default_rng(21)
    X = rng.normal(size=(30, 2))
    m = gpr.fit(X, np.sin(X[:, 0]) + X[:, 1], FitOptions(n_starts=2))
    doc = json.loads(json.dumps(m.to_dict()))
    m2 = gpr.TrainedGpr.from_dict(doc)
    Xq = rng.normal(size=(8, 2))
    a, b = gpr.predict(m, Xq), gpr.predict(m2, Xq)
    np.testing.assert_array_equal(a.mean, b.mean)
    np.testing.assert_array_equal(a.variance, b.variance)

    tampered = json.loads(json.dumps(doc))
    tampered["y"][0] += 1.0
    with pytest.raises(ArtifactCorruptError):
        gpr.TrainedGpr.from_dict(tampered)
    tampered = json.loads(json.dumps(doc))
    del tampered["hyperparams"]
    with pytest.raises(ArtifactCorruptError):
        gpr.TrainedGpr.from_dict(tampered)


def test_conditioning_guard_lifts_noise_until_residual_holds():
    rng = np.random.default_rng(22)
    X = rng.uniform(-2, 2, size=(300, 2))
    y = rng.normal(size=300)  # rough targets with near-zero noise: alpha explodes
    hp0 = HP(0.5, 0.4, 1e-8)
    hp, s, raised = gpr._conditioned_solve(X, y, hp0)
    assert raised > 0
    assert hp.sigma2 == pytest.approx(1e-8 * 10 ** raised)
    assert (hp.theta_l, hp.theta_f) == (hp0.theta_l, hp0.theta_f)
    A = gpr.build_kernel_matrix(X, hp) + (hp.sigma2 + s.jitter) * np.eye(300)
    assert np.linalg.norm(A @ s.alpha - (y - s.beta)) <= 1e-8 * np.linalg.norm(y)
    # the noise just below the accepted one fails the tolerance
    lower = HP(0.5, 0.4, hp.sigma2 / 10)
    s_low = gpr._solve(X, y, lower)
    A_low = gpr.build_kernel_matrix(X, lower) + (lower.sigma2 + s_low.jitter) * np.eye(300)
    assert np.linalg.norm(A_low @ s_low.alpha - (y - s_low.beta)) > 1e-8 * np.linalg.norm(y)


def test_well_conditioned_fit_raises_nothing():
    rng = np.random.default_rng(23)
    X = rng.normal(size=(40, 2))
    m = gpr.fit(X, np.sin(X[:, 0]) + 0.1 * rng.normal(size=40), FitOptions(n_starts=2))
    assert m.fit_report["noise_decades_raised"] == 0
