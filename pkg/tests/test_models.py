import numpy as np
import pytest

from hmix.errors import ConfigError, ShapeError
from hmix.layers import resolve_width
from hmix.losses import LossConfig, compute_loss
from hmix.mixture import B_MIN, HierarchicalMixture
from hmix.models import (DeepEnsemble, EnsembleSpec, GroupedTransformerForecaster,
                         HeadSpec, MLPForecaster, TransformerConfig, build_ensemble,
                         model_from_config, split_head)
from hmix.tensor import Tape, Tensor


def small_tf_config(groups=1, alpha=1.0, n_meta=2, n_sub=2, t_pred=3):
    return TransformerConfig(in_features=4, t_obs=5, head=HeadSpec(n_meta, n_sub, t_pred),
                             base_dim=8, alpha=alpha, groups=groups, heads=2, n_blocks=2)


class TestHeadSpec:
    def test_out_dim_formula(self):
        # per mode and step: 2 means + 2 raw scales; one logit per mode
        spec = HeadSpec(n_meta=2, n_sub=5, t_pred=1)
        assert spec.out_dim == 10 * 4 + 10

    def test_validation(self):
        with pytest.raises(ConfigError):
            HeadSpec(n_meta=0, n_sub=3, t_pred=1)

    def test_split_head_layout(self):
        spec = HeadSpec(n_meta=1, n_sub=2, t_pred=1)
        raw = np.arange(1.0, spec.out_dim + 1.0)
        h = split_head(Tensor(raw), spec)
        assert h.mus.shape == (1, 2, 1, 2)
        np.testing.assert_allclose(h.mus.data.ravel(), [1, 2, 3, 4])
        expected_b = np.logaddexp(0.0, np.array([5.0, 6, 7, 8])) + B_MIN
        np.testing.assert_allclose(h.bs.data.ravel(), expected_b, rtol=1e-12)
        np.testing.assert_allclose(h.logits.data.ravel(), [9, 10])

    def test_split_head_wrong_width(self):
        with pytest.raises(ShapeError):
            split_head(Tensor(np.zeros(7)), HeadSpec(1, 2, 1))


class TestMLP:
    def test_forward_shapes_and_validity(self):
        model = MLPForecaster(1, HeadSpec(2, 5, 1), seed=3)
        out = model.forward(np.linspace(0, 1, 7)[:, None])
        assert len(out) == 1
        h = out[0]
        assert isinstance(h, HierarchicalMixture)
        assert h.mus.shape == (7, 2, 5, 1, 2)
        np.testing.assert_allclose(h.weights.data.sum(axis=(-2, -1)), 1.0, atol=1e-12)
        assert (h.bs.data >= B_MIN).all()

    def test_param_count(self):
        model = MLPForecaster(1, HeadSpec(2, 5, 1), hidden=50)
        out_dim = model.head_spec.out_dim
        expected = (1 * 50 + 50) + (50 * 50 + 50) + (50 * out_dim + out_dim)
        assert model.param_count() == expected

    def test_deterministic_init(self):
        a = MLPForecaster(1, HeadSpec(1, 4, 1), seed=11)
        b = MLPForecaster(1, HeadSpec(1, 4, 1), seed=11)
        for p, q in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(p.data, q.data)

    def test_input_dim_checked(self):
        model = MLPForecaster(1, HeadSpec(1, 2, 1))
        with pytest.raises(ShapeError):
            model.forward(np.zeros((4, 3)))


class TestTransformer:
    def test_forward_shapes(self):
        model = GroupedTransformerForecaster(small_tf_config(groups=3), seed=0)
        out = model.forward(np.random.default_rng(0).normal(size=(4, 5, 4)))
        assert len(out) == 3
        for h in out:
            assert h.mus.shape == (4, 2, 2, 3, 2)
            np.testing.assert_allclose(h.weights.data.sum(axis=(-2, -1)), 1.0, atol=1e-12)

    def test_bad_feature_shape_names_dims(self):
        model = GroupedTransformerForecaster(small_tf_config(), seed=0)
        with pytest.raises(ShapeError, match="5, 4"):
            model.forward(np.zeros((2, 6, 4)))

    def test_same_seed_same_outputs(self):
        x = np.random.default_rng(1).normal(size=(2, 5, 4))
        a = GroupedTransformerForecaster(small_tf_config(groups=2), seed=9)
        b = GroupedTransformerForecaster(small_tf_config(groups=2), seed=9)
        ha, hb = a.forward(x)[1], b.forward(x)[1]
        np.testing.assert_array_equal(ha.mus.data, hb.mus.data)
        np.testing.assert_array_equal(ha.weights.data, hb.weights.data)

    def test_zeroing_other_head_block_leaves_member_alone(self):
        x = np.random.default_rng(2).normal(size=(2, 5, 4))
        model = GroupedTransformerForecaster(small_tf_config(groups=2), seed=5)
        before = [h.mus.data.copy() for h in model.forward(x)]
        model.head.blocks[1].data[...] = 0.0
        after = model.forward(x)
        np.testing.assert_array_equal(after[0].mus.data, before[0])
        assert not np.allclose(after[1].mus.data, before[1])

    def test_member_masks_partition_parameters(self):
        model = GroupedTransformerForecaster(small_tf_config(groups=3), seed=0)
        params = model.parameters()
        masks = [model.member_masks(g) for g in range(3)]
        for i, p in enumerate(params):
            total = sum(masks[g][i].astype(int) for g in range(3))
            np.testing.assert_array_equal(total, np.ones(p.shape, dtype=int))

    def test_gradient_isolation_exact(self):
        # HWTA loss on one member leaves the other members' parameters
        # with exactly zero gradient
        rng = np.random.default_rng(7)
        model = GroupedTransformerForecaster(small_tf_config(groups=3), seed=1)
        params = model.parameters()
        x = rng.normal(size=(4, 5, 4))
        y = rng.normal(size=(4, 3, 2))
        cfg = LossConfig(kind="hwta", gamma=0.6, use_kl_terms=False)
        for g in range(3):
            with Tape() as tape:
                h = model.forward(x)[g]
                rep = compute_loss(y, h, cfg)
                tape.backward(rep.total, params=params)
            own = model.member_masks(g)
            for i, p in enumerate(params):
                other = ~own[i]
                assert np.all(p.adjoint[other] == 0.0), f"member {g}, param {i}"
                assert np.any(p.adjoint[own[i]] != 0.0) or p.adjoint[own[i]].size == 0

    def test_mac_count_hand_formula(self):
        cfg = small_tf_config(groups=1)
        model = GroupedTransformerForecaster(cfg, seed=0)
        d = model.width_plan.dim
        t = cfg.t_obs
        expected = t * (1 * cfg.in_features) * d  # embedding (groups=1)
        for _ in range(cfg.n_blocks):
            attn = model.blocks[0]["attn"]
            expected += attn.mac_count(t)
            expected += t * d * (4 * d) + t * (4 * d) * d
        expected += 1 * d * cfg.head.out_dim
        assert model.mac_count() == expected


class TestEnsembles:
    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            EnsembleSpec(style="bagged")
        with pytest.raises(ConfigError):
            EnsembleSpec(style="single", members=3)
        with pytest.raises(ConfigError):
            EnsembleSpec(style="packed", members=2, alpha=0.0)

    def test_member_counts(self):
        base = small_tf_config(groups=1)
        single = build_ensemble(EnsembleSpec("single", 1), base, seed=0)
        deep = build_ensemble(EnsembleSpec("deep", 3), base, seed=0)
        packed = build_ensemble(EnsembleSpec("packed", 3), base, seed=0)
        assert single.members == 1 and deep.members == 3 and packed.members == 3
        x = np.random.default_rng(0).normal(size=(2, 5, 4))
        assert len(deep.forward(x)) == 3
        assert len(packed.forward(x)) == 3

    def test_deep_members_differ_in_init(self):
        deep = build_ensemble(EnsembleSpec("deep", 2), small_tf_config(), seed=4)
        p0 = deep.models[0].parameters()[0].data
        p1 = deep.models[1].parameters()[0].data
        assert not np.array_equal(p0, p1)

    def test_packed_param_savings(self):
        # acceptance direction: packed alpha=2 M=3 is smaller than the
        # deep M=3 ensemble of alpha=1 base models
        base = small_tf_config(groups=1)
        packed = build_ensemble(EnsembleSpec("packed", 3, alpha=2.0), base, seed=0)
        deep = build_ensemble(EnsembleSpec("deep", 3, alpha=1.0), base, seed=0)
        assert packed.param_count() < deep.param_count()

    def test_packed_grouped_layer_formula(self):
        # with alpha=1 and width unchanged, every grouped linear holds
        # exactly 1/G of the dense weight count (plus full bias)
        base = small_tf_config(groups=1)
        packed = build_ensemble(EnsembleSpec("packed", 2, alpha=1.0), base, seed=0)
        d = packed.width_plan.dim
        ffn = packed.blocks[0]["ffn1"]
        assert sum(b.size for b in ffn.blocks) == d * 4 * d // 2

    def test_sqrt_alpha_roughly_matches_single(self):
        base = small_tf_config(groups=1)
        m = 4
        packed = build_ensemble(EnsembleSpec("packed", m, alpha=float(np.sqrt(m))), base, seed=0)
        single = build_ensemble(EnsembleSpec("single", 1, alpha=1.0), base, seed=0)
        # compare a grouped weight matrix against the dense one: alpha^2/G == 1
        # exactly when the resolved width is exactly alpha*d0
        dp, ds = packed.width_plan.dim, single.width_plan.dim
        got = sum(b.size for b in packed.blocks[0]["ffn1"].blocks)
        want = ds * 4 * ds
        assert got == dp * 4 * dp // m
        assert abs(got - want) / want < 0.35  # rounding of the resolved width

    def test_width_plan_logged_fields(self):
        plan = resolve_width(8, 1.5, 3, 2)
        assert plan.dim % (3 * 2) == 0 and plan.dim >= 1.5 * 8


class TestConfigRoundTrip:
    def test_mlp(self):
        m = MLPForecaster(1, HeadSpec(2, 5, 1), seed=6)
        again = model_from_config(m.config_dict())
        assert again.config_dict() == m.config_dict()
        for p, q in zip(m.parameters(), again.parameters()):
            assert p.shape == q.shape

    def test_transformer(self):
        m = GroupedTransformerForecaster(small_tf_config(groups=2), seed=5)
        again = model_from_config(m.config_dict())
        assert again.config_dict() == m.config_dict()

    def test_deep(self):
        deep = build_ensemble(EnsembleSpec("deep", 2), small_tf_config(), seed=3)
        again = model_from_config(deep.config_dict())
        assert isinstance(again, DeepEnsemble)
        assert again.members == 2
        for p, q in zip(deep.parameters(), again.parameters()):
            assert p.shape == q.shape

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            model_from_config({"kind": "rnn"})
