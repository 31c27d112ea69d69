"""Mixture value types and densities against independent oracles."""

import numpy as np
import pytest
import scipy.stats

from hmix.errors import ContractError, ShapeError
from hmix.mixture import (
    B_MIN,
    HierarchicalMixture,
    LaplaceComponent,
    MixtureForecast,
    laplace_log_density,
    meta_mixture,
    meta_mode_stats,
    meta_stats_from_raw,
    mixture_nll,
    read_forecast_csv,
    responsibilities,
    write_forecast_csv,
)
from hmix.tensor import Tensor, finite_diff_check, tsum


def rng_for(seed):
    return np.random.Generator(np.random.PCG64(seed))


def random_mixture(rng, k=4, t=3, batch=()):
    mus = rng.normal(size=batch + (k, t, 2))
    bs = rng.uniform(0.2, 1.5, size=batch + (k, t, 2))
    logits = rng.normal(size=batch + (k,))
    return MixtureForecast(Tensor(mus), Tensor(bs), logits=Tensor(logits))


def oracle_component_logpdf(y, mu, b):
    return float(np.sum(scipy.stats.laplace.logpdf(y, loc=mu, scale=b)))


def oracle_mixture_nll(y, mus, bs, w):
    dens = [w[k] * np.exp(oracle_component_logpdf(y, mus[k], bs[k])) for k in range(len(w))]
    return -float(np.log(np.sum(dens)))


def test_laplace_log_density_frozen_value():
    # per coord: -log(2b) - |y-mu|/b; hand-computed for this fixture
    comp = LaplaceComponent(Tensor([[0.0, 0.0]]), Tensor([[0.5, 1.0]]))
    got = laplace_log_density(np.array([[0.3, -0.2]]), comp).item()
    want = (-np.log(1.0) - 0.6) + (-np.log(2.0) - 0.2)
    assert abs(got - want) < 1e-14
    assert abs(got - (-1.4931471805599454)) < 1e-14


@pytest.mark.parametrize("seed", range(8))
def test_laplace_log_density_matches_scipy(seed):
    rng = rng_for(seed)
    t = int(rng.integers(1, 5))
    mu = rng.normal(size=(t, 2))
    b = rng.uniform(0.1, 2.0, size=(t, 2))
    y = rng.normal(size=(t, 2))
    comp = LaplaceComponent(Tensor(mu), Tensor(b))
    got = laplace_log_density(y, comp).item()
    assert abs(got - oracle_component_logpdf(y, mu, b)) < 1e-10


@pytest.mark.parametrize("seed", range(8))
def test_mixture_nll_matches_brute_force(seed):
    rng = rng_for(seed)
    m = random_mixture(rng)
    y = rng.normal(size=(3, 2))
    got = mixture_nll(y, m).item()
    want = oracle_mixture_nll(y, m.mus.data, m.bs.data, m.weights.data)
    assert abs(got - want) < 1e-10


def test_mixture_nll_stable_for_far_targets():
    rng = rng_for(99)
    m = random_mixture(rng, k=3, t=1)
    y = np.array([[500.0, -500.0]])  # brute force would underflow to log(0)
    got = mixture_nll(y, m).item()
    assert np.isfinite(got)
    # scipy logsumexp oracle in log space
    lds = [oracle_component_logpdf(y, m.mus.data[k], m.bs.data[k]) for k in range(3)]
    want = -scipy.special.logsumexp(np.log(m.weights.data) + np.array(lds))
    assert abs(got - want) < 1e-9


def test_density_integrates_to_one_quadrature():
    rng = rng_for(5)
    m = random_mixture(rng, k=3, t=1)
    xs = np.linspace(-12, 12, 601)
    xx, yy = np.meshgrid(xs, xs, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel()], -1)[:, None, :]  # (N, t=1, 2)
    n = pts.shape[0]
    tiled = MixtureForecast(
        Tensor(np.broadcast_to(m.mus.data, (n,) + m.mus.shape).copy()),
        Tensor(np.broadcast_to(m.bs.data, (n,) + m.bs.shape).copy()),
        logits=Tensor(np.broadcast_to(m.logits.data, (n,) + m.logits.shape).copy()),
    )
    dens = np.exp(-mixture_nll(pts, tiled).data)
    integral = np.trapezoid(np.trapezoid(dens.reshape(601, 601), xs, axis=1), xs)
    assert abs(integral - 1.0) < 1e-3


def test_responsibilities_match_bayes_brute_force():
    rng = rng_for(6)
    m = random_mixture(rng)
    y = rng.normal(size=(3, 2))
    got = responsibilities(y, m).data
    dens = np.array([m.weights.data[k] * np.exp(oracle_component_logpdf(y, m.mus.data[k], m.bs.data[k]))
                     for k in range(m.n_modes)])
    want = dens / dens.sum()
    assert np.allclose(got, want, atol=1e-12)
    assert abs(got.sum() - 1.0) < 1e-12


def test_batched_matches_per_sample():
    rng = rng_for(7)
    m = random_mixture(rng, k=3, t=2, batch=(5,))
    ys = rng.normal(size=(5, 2, 2))
    batched = mixture_nll(ys, m).data
    for i in range(5):
        single = MixtureForecast(
            Tensor(m.mus.data[i]), Tensor(m.bs.data[i]), logits=Tensor(m.logits.data[i]))
        assert abs(batched[i] - mixture_nll(ys[i], single).item()) < 1e-12


def test_weights_from_logits_form_simplex_and_log_is_stable():
    logits = Tensor(np.array([0.0, -2000.0, 5.0]))
    m = MixtureForecast(Tensor(np.zeros((3, 1, 2))), Tensor(np.full((3, 1, 2), 0.5)), logits=logits)
    assert abs(float(m.weights.data.sum()) - 1.0) < 1e-12
    lw = m.log_weights().data
    assert np.all(np.isfinite(lw))
    assert lw[1] < -1000  # underflowed weight keeps a finite log through the logits path


def test_simplex_validation_rejects_bad_weights():
    mus = Tensor(np.zeros((2, 1, 2)))
    bs = Tensor(np.full((2, 1, 2), 0.5))
    with pytest.raises(ContractError):
        MixtureForecast(mus, bs, weights=Tensor([0.7, 0.7]))
    with pytest.raises(ContractError):
        MixtureForecast(mus, bs, weights=Tensor([1.5, -0.5]))


def test_scale_floor_validation():
    with pytest.raises(ContractError):
        LaplaceComponent(Tensor(np.zeros((1, 2))), Tensor([[B_MIN / 2, 0.5]]))


def test_hierarchy_flatten_preserves_density():
    rng = rng_for(8)
    ks, kp = 2, 3
    mus = rng.normal(size=(ks, kp, 2, 2))
    bs = rng.uniform(0.2, 1.0, size=(ks, kp, 2, 2))
    logits = rng.normal(size=(ks, kp))
    h = HierarchicalMixture(Tensor(mus), Tensor(bs), logits=Tensor(logits))
    y = rng.normal(size=(2, 2))
    flat_nll = mixture_nll(y, h.flatten()).item()
    # independent walk over the hierarchy
    total = 0.0
    for i in range(ks):
        for j in range(kp):
            total += h.weights.data[i, j] * np.exp(oracle_component_logpdf(y, mus[i, j], bs[i, j]))
    assert abs(flat_nll - (-np.log(total))) < 1e-10


def test_meta_weights_are_group_sums_of_one_simplex():
    rng = rng_for(9)
    h = HierarchicalMixture(
        Tensor(rng.normal(size=(3, 2, 1, 2))),
        Tensor(rng.uniform(0.3, 1.0, size=(3, 2, 1, 2))),
        logits=Tensor(rng.normal(size=(3, 2))),
    )
    assert abs(float(h.weights.data.sum()) - 1.0) < 1e-12
    assert np.allclose(h.meta_weights().data, h.weights.data.sum(-1), atol=1e-12)
    assert np.allclose(np.exp(h.meta_log_weights().data), h.weights.data.sum(-1), atol=1e-12)


def test_meta_stats_single_mode_group_frozen():
    # one group, one mode, weight 1, mu=0, b=0.7: mu_bar=0, b_bar^2 = 0.49
    stats = meta_stats_from_raw(
        Tensor(np.ones((1, 1))), Tensor(np.zeros((1, 1, 1, 2))),
        Tensor(np.full((1, 1, 1, 2), 0.7)))
    assert np.allclose(stats.mu_bar.data, 0.0)
    assert np.allclose(stats.b_bar.data, 0.7, atol=1e-12)


def test_meta_stats_two_mode_frozen():
    # K_sub=2, mu=+1/-1 (each coordinate), b=0, weights 0.5/0.5:
    # mu_bar = (1/2)(0.5*1 + 0.5*(-1)) = 0
    # b_bar^2 = (1/4)((0+1)+(0+1)) - 0 = 0.5
    mus = np.zeros((1, 2, 1, 2))
    mus[0, 0] = 1.0
    mus[0, 1] = -1.0
    stats = meta_stats_from_raw(
        Tensor(np.full((1, 2), 0.5)), Tensor(mus), Tensor(np.zeros((1, 2, 1, 2))))
    assert np.allclose(stats.mu_bar.data, 0.0, atol=1e-15)
    assert np.allclose(stats.b_bar.data, np.sqrt(0.5), atol=1e-15)


def test_meta_stats_verbatim_matches_independent_numpy():
    rng = rng_for(10)
    ks, kp, t = 3, 4, 2
    w = rng.dirichlet(np.ones(ks * kp)).reshape(ks, kp)
    mus = rng.normal(size=(ks, kp, t, 2))
    bs = rng.uniform(0.2, 1.0, size=(ks, kp, t, 2))
    stats = meta_stats_from_raw(Tensor(w), Tensor(mus), Tensor(bs))
    for i in range(ks):
        mu_bar = np.zeros((t, 2))
        second = np.zeros((t, 2))
        for j in range(kp):
            mu_bar += w[i, j] * mus[i, j] / kp
            second += (2 * bs[i, j] ** 2 + mus[i, j] ** 2) / (2 * kp)
        b_sq = np.maximum(second - mu_bar ** 2, B_MIN ** 2)
        assert np.allclose(stats.mu_bar.data[i], mu_bar, atol=1e-12)
        assert np.allclose(stats.b_bar.data[i], np.sqrt(b_sq), atol=1e-12)


def test_meta_stats_normalized_matches_total_variance():
    rng = rng_for(11)
    w = np.array([[0.3, 0.7]]) * 0.5  # group total 0.5; conditionals 0.3/0.7
    mus = np.zeros((1, 2, 1, 2))
    mus[0, 0], mus[0, 1] = 1.0, -1.0
    bs = np.zeros((1, 2, 1, 2))
    bs[0, 0], bs[0, 1] = 0.5, 0.2
    stats = meta_stats_from_raw(Tensor(w), Tensor(mus), Tensor(bs), normalized=True)
    cond = np.array([0.3, 0.7])
    mean = cond[0] * 1.0 + cond[1] * (-1.0)
    var = cond[0] * (2 * 0.5 ** 2 + 1.0) + cond[1] * (2 * 0.2 ** 2 + 1.0) - mean ** 2
    assert np.allclose(stats.mu_bar.data, mean, atol=1e-14)
    assert np.allclose(stats.b_bar.data ** 2, var / 2.0, atol=1e-14)


def test_meta_stats_clamp_engages():
    # single mode with large mean, tiny scale: verbatim b^2 - mu^2/2 goes negative
    stats = meta_stats_from_raw(
        Tensor(np.ones((1, 1))), Tensor(np.full((1, 1, 1, 2), 1.0)),
        Tensor(np.full((1, 1, 1, 2), 0.01)))
    assert np.allclose(stats.b_bar.data, B_MIN)


def test_meta_mixture_is_valid_k_meta_mixture():
    rng = rng_for(12)
    h = HierarchicalMixture(
        Tensor(rng.normal(size=(3, 2, 2, 2))),
        Tensor(rng.uniform(0.3, 1.0, size=(3, 2, 2, 2))),
        logits=Tensor(rng.normal(size=(3, 2))),
    )
    mm = meta_mixture(h)
    assert mm.n_modes == 3
    assert abs(float(mm.weights.data.sum()) - 1.0) < 1e-12
    stats = meta_mode_stats(h)
    assert np.allclose(mm.mus.data, stats.mu_bar.data)


def test_gradients_flow_through_nll_and_meta_stats():
    rng = rng_for(13)
    mus = Tensor(rng.normal(size=(2, 2, 1, 2)), requires_grad=True)
    raw_b = Tensor(rng.normal(size=(2, 2, 1, 2)), requires_grad=True)
    logits = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    y = rng.normal(size=(1, 2))

    def f():
        from hmix.tensor import softplus
        h = HierarchicalMixture(mus, softplus(raw_b) + B_MIN, logits=logits)
        stats = meta_mode_stats(h)
        core = mixture_nll(y, h.flatten())
        return core + tsum(stats.mu_bar) + tsum(stats.b_bar)

    report = finite_diff_check(f, [mus, raw_b, logits], tol=1e-4)
    assert report.passed, report


def test_forecast_csv_round_trip(tmp_path):
    rng = rng_for(14)
    h = HierarchicalMixture(
        Tensor(rng.normal(size=(2, 3, 4, 2))),
        Tensor(rng.uniform(0.2, 1.0, size=(2, 3, 4, 2))),
        logits=Tensor(rng.normal(size=(2, 3))),
    )
    path = tmp_path / "forecasts.csv"
    write_forecast_csv(path, [("scene_7", h)])
    back = read_forecast_csv(path)
    assert set(back) == {"scene_7"}
    assert np.array_equal(back["scene_7"].mus.data, h.mus.data)
    assert np.array_equal(back["scene_7"].bs.data, h.bs.data)
    assert np.array_equal(back["scene_7"].weights.data, h.weights.data)


def test_forecast_csv_deterministic_bytes(tmp_path):
    rng = rng_for(15)
    h = HierarchicalMixture(
        Tensor(rng.normal(size=(1, 2, 2, 2))),
        Tensor(rng.uniform(0.2, 1.0, size=(1, 2, 2, 2))),
        logits=Tensor(rng.normal(size=(1, 2))),
    )
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    write_forecast_csv(p1, [("s", h)])
    write_forecast_csv(p2, [("s", h)])
    assert p1.read_bytes() == p2.read_bytes()


def test_shape_errors_name_shapes():
    with pytest.raises(ShapeError):
        MixtureForecast(Tensor(np.zeros((2, 1, 2))), Tensor(np.full((3, 1, 2), 0.5)),
                        weights=Tensor([0.5, 0.5]))
    comp = LaplaceComponent(Tensor(np.zeros((2, 2))), Tensor(np.full((2, 2), 0.5)))
    with pytest.raises(ShapeError):
        laplace_log_density(np.zeros((5, 3)), comp)
