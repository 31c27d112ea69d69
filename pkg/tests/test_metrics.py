import numpy as np
import pytest

from hmix.errors import ContractError
from hmix.metrics import (MetricReport, confidence_order, evaluate_forecasts,
                          made_k, metrics_table, mfde_k, nll_k,
                          write_metrics_csv)
from hmix.mixture import MixtureForecast, mixture_nll
from hmix.tensor import Tensor


def rng_of(seed):
    return np.random.Generator(np.random.PCG64(seed))


def random_forecast(rng, k=6, t=4):
    mus = rng.normal(size=(k, t, 2))
    bs = rng.uniform(0.1, 2.0, size=(k, t, 2))
    logits = rng.normal(size=k)
    w = np.exp(logits - logits.max())
    w = w / w.sum()
    f = MixtureForecast(Tensor(mus), Tensor(bs), weights=Tensor(w))
    return f, mus, bs, w


def oracle_made(y, mus, w, k):
    # explicit enumeration: pick top-k by weight (ties -> lower index), then
    # the candidate whose endpoint lands closest, then its mean displacement
    order = sorted(range(len(w)), key=lambda i: (-w[i], i))[:k]
    best, best_fde = None, np.inf
    for i in order:
        fde = np.linalg.norm(mus[i][-1] - y[-1])
        if fde < best_fde:
            best, best_fde = i, fde
    return float(np.mean(np.linalg.norm(mus[best] - y, axis=-1))), best_fde


def oracle_nll(y, mus, bs, w, k):
    order = sorted(range(len(w)), key=lambda i: (-w[i], i))[:k]
    sub_w = np.array([w[i] for i in order])
    sub_w = sub_w / sub_w.sum()
    dens = []
    for wi, i in zip(sub_w, order):
        logp = np.sum(-np.log(2 * bs[i]) - np.abs(y - mus[i]) / bs[i])
        dens.append(np.log(wi) + logp)
    return -float(np.logaddexp.reduce(dens))


class TestAgainstBruteForce:
    def test_made_mfde_random(self):
        rng = rng_of(0)
        for _ in range(200):
            k_total = int(rng.integers(2, 8))
            f, mus, bs, w = random_forecast(rng, k=k_total)
            y = rng.normal(size=(4, 2))
            k = int(rng.integers(1, k_total + 1))
            ade, fde = oracle_made(y, mus, w, k)
            assert made_k(y, f, k) == pytest.approx(ade, rel=1e-10)
            assert mfde_k(y, f, k) == pytest.approx(fde, rel=1e-10)

    def test_nll_random(self):
        rng = rng_of(1)
        for _ in range(200):
            k_total = int(rng.integers(2, 8))
            f, mus, bs, w = random_forecast(rng, k=k_total)
            y = rng.normal(size=(4, 2))
            k = int(rng.integers(1, k_total + 1))
            assert nll_k(y, f, k) == pytest.approx(oracle_nll(y, mus, bs, w, k), rel=1e-10)


class TestEdgeCases:
    def test_exact_mode_zero_error(self):
        rng = rng_of(2)
        f, mus, bs, w = random_forecast(rng)
        i = int(np.argmax(w))
        y = mus[i]
        assert made_k(y, f, 1) == 0.0
        assert mfde_k(y, f, 1) == 0.0

    def test_k1_uses_most_confident(self):
        mus = np.array([[[5.0, 5.0]], [[0.0, 0.0]]])
        bs = np.full((2, 1, 2), 0.5)
        f = MixtureForecast(Tensor(mus), Tensor(bs), weights=Tensor(np.array([0.6, 0.4])))
        y = np.zeros((1, 2))
        # mode 1 sits on the truth but only mode 0 is in the top-1 set
        assert mfde_k(y, f, 1) == pytest.approx(np.sqrt(50))
        assert mfde_k(y, f, 2) == 0.0

    def test_tie_goes_to_lower_index(self):
        mus = np.array([[[1.0, 0.0]], [[0.0, 0.0]]])
        bs = np.full((2, 1, 2), 0.5)
        f = MixtureForecast(Tensor(mus), Tensor(bs), weights=Tensor(np.array([0.5, 0.5])))
        assert mfde_k(np.zeros((1, 2)), f, 1) == pytest.approx(1.0)

    def test_full_k_nll_matches_mixture_nll(self):
        rng = rng_of(3)
        f, mus, bs, w = random_forecast(rng, k=5)
        y = rng.normal(size=(4, 2))
        full = mixture_nll(Tensor(y), f)
        assert nll_k(y, f, 5) == pytest.approx(float(full.data), rel=1e-12)

    def test_mfde_monotone_in_k(self):
        # the endpoint minimum over a growing candidate set can only improve;
        # made_k has no such guarantee (the endpoint winner may have worse ADE)
        rng = rng_of(4)
        for _ in range(30):
            f, mus, bs, w = random_forecast(rng, k=6)
            y = rng.normal(size=(4, 2))
            fdes = [mfde_k(y, f, k) for k in range(1, 7)]
            assert all(a >= b - 1e-12 for a, b in zip(fdes[:-1], fdes[1:]))

    def test_k_out_of_range(self):
        f, *_ = random_forecast(rng_of(5))
        with pytest.raises(ContractError):
            made_k(np.zeros((4, 2)), f, 0)
        with pytest.raises(ContractError):
            made_k(np.zeros((4, 2)), f, 7)

    def test_confidence_order_stable(self):
        assert confidence_order(np.array([0.2, 0.4, 0.2, 0.2])).tolist() == [1, 0, 2, 3]


class TestReporting:
    def test_evaluate_means(self):
        rng = rng_of(6)
        pairs = []
        for _ in range(8):
            f, *_ = random_forecast(rng, k=6)
            pairs.append((rng.normal(size=(4, 2)), f))
        rep = evaluate_forecasts(pairs, n_params=123, macs=456)
        assert rep.n_scenes == 8
        manual = np.mean([made_k(y, f, 1) for y, f in pairs])
        assert rep.made_1 == pytest.approx(manual, rel=1e-12)
        assert rep.n_params == 123 and rep.macs == 456

    def test_k_clamped_to_mode_count(self):
        rng = rng_of(7)
        f, *_ = random_forecast(rng, k=3)
        rep = evaluate_forecasts([(rng.normal(size=(4, 2)), f)], 0, 0)
        assert rep.made_6 == pytest.approx(made_k(rng.normal(size=(4, 2)) * 0 + 0, f, 3), abs=1e6)
        assert np.isfinite(rep.nll_6)

    def test_table_columns(self):
        rep = MetricReport(1.0, 0.5, 2.0, 1.0, 3.0, 2.5, 10, 1000, 2000)
        text = metrics_table({"demo": rep})
        head = text.splitlines()[0]
        for col in ["mADE_1", "mADE_6", "mFDE_1", "mFDE_6", "NLL_3", "NLL_6", "#Prm", "MAC"]:
            assert col in head
        assert "demo" in text

    def test_csv_deterministic(self, tmp_path):
        rep = MetricReport(1.0, 0.5, 2.0, 1.0, 3.0, 2.5, 10, 1000, 2000)
        row = {"model": "m", **rep.row()}
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_metrics_csv(p1, [row])
        write_metrics_csv(p2, [row])
        assert p1.read_bytes() == p2.read_bytes()
        assert "made_1" in p1.read_text().splitlines()[0]

    def test_csv_append_keeps_single_header(self, tmp_path):
        rep = MetricReport(1.0, 0.5, 2.0, 1.0, 3.0, 2.5, 10, 1000, 2000)
        row = {"model": "m", **rep.row()}
        p = tmp_path / "a.csv"
        write_metrics_csv(p, [row])
        write_metrics_csv(p, [row], append=True)
        lines = p.read_text().splitlines()
        assert len(lines) == 3 and lines[0].startswith("model,")
