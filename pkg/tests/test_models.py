import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sjmvi import tensor as T
from sjmvi.errors import ContractError, ShapeError
from sjmvi.models import (
    LatentVariableModel,
    Mlp,
    MlpSpec,
    ParamSet,
    RatioNet,
    build_mlp,
    discriminator_from_ratio,
    log1m_discriminator,
    log_discriminator,
    ratio_log,
)
from sjmvi.trainer import fit_log_ratio


class TestMlp:
    def test_linear_identity(self, rng):
        params, net = build_mlp(MlpSpec((3, 3), linear_only=True))
        params = params.replace({"W0": np.eye(3), "b0": np.zeros(3)})
        x = rng.standard_normal((5, 3))
        np.testing.assert_array_equal(net(params.const(), x).numpy(), x)

    def test_seeded_init_is_bit_identical(self):
        spec = MlpSpec((4, 8, 2), seed=11)
        assert build_mlp(spec)[0].equal(build_mlp(spec)[0])
        assert not build_mlp(spec)[0].equal(build_mlp(MlpSpec((4, 8, 2), seed=12))[0])

    def test_single_tanh_layer_at_zero(self, rng):
        params, net = build_mlp(MlpSpec((2, 3), final_activation=True))
        b = rng.standard_normal(3)
        params = params.replace({"b0": b})
        np.testing.assert_allclose(net(params.const(), np.zeros((1, 2))).numpy()[0], np.tanh(b))

    @pytest.mark.parametrize("widths", [(3,), (3, 0, 1)])
    def test_invalid_widths(self, widths):
        with pytest.raises(ContractError):
            MlpSpec(widths)

    def test_unknown_activation(self):
        with pytest.raises(ContractError):
            MlpSpec((2, 2), activation="gelu")

    def test_input_width_checked(self):
        params, net = build_mlp(MlpSpec((3, 2)))
        with pytest.raises(ShapeError):
            net(params.const(), np.zeros((4, 5)))

    def test_zero_last_layer(self):
        params, net = build_mlp(MlpSpec((3, 5, 2), zero_last=True))
        assert not params["W1"].any() and not params["b1"].any()

    def test_gradient(self, rng):
        params, net = build_mlp(MlpSpec((3, 4, 2), activation="tanh"))
        names, x = list(params), rng.standard_normal((6, 3))
        err = T.grad_check(lambda *ps: T.sum(net(dict(zip(names, ps)), x)), [params[k] for k in names])
        assert err < 1e-6


class TestParamSet:
    def test_shapes_are_fixed(self):
        ps = ParamSet({"w": np.zeros((2, 2))})
        with pytest.raises(ShapeError):
            ps.replace({"w": np.zeros(3)})
        with pytest.raises(ContractError):
            ps.replace({"v": np.zeros(1)})

    def test_arrays_are_read_only(self):
        ps = ParamSet({"w": np.zeros(2)})
        with pytest.raises(ValueError):
            ps["w"][0] = 1.0

    def test_size_and_equal(self):
        ps = ParamSet({"a": np.zeros((2, 3)), "b": np.ones(4)})
        assert ps.size == 10
        assert ps.equal(ParamSet({"a": np.zeros((2, 3)), "b": np.ones(4)}))
        assert not ps.equal(ps.replace({"b": np.full(4, 2.0)}))


class TestRatioNet:
    def test_zero_head_gives_unit_ratio(self, rng):
        net = RatioNet(2, 3)
        out = ratio_log(net, net.init_params(0).const(), rng.standard_normal((5, 2)), rng.standard_normal((5, 3)))
        np.testing.assert_array_equal(out.numpy(), np.zeros(5))

    def test_ignoring_conditioning(self, rng):
        net = RatioNet(2, 3, ignore_conditioning=True)
        params = net.init_params(0)
        params = params.replace({k: params[k] + rng.standard_normal(params[k].shape) for k in params})
        z = rng.standard_normal((4, 2))
        a = net(params.const(), z, rng.standard_normal((4, 3))).numpy()
        b = net(params.const(), z, rng.standard_normal((4, 3))).numpy()
        assert a.tobytes() == b.tobytes()

    def test_conditioning_required(self):
        net = RatioNet(2, 3)
        with pytest.raises(ContractError):
            net(net.init_params().const(), np.zeros((2, 2)), None)

    def test_batch_mismatch(self):
        net = RatioNet(2, 3)
        with pytest.raises(ShapeError):
            net(net.init_params().const(), np.zeros((2, 2)), np.zeros((3, 3)))

    def test_trained_matches_analytic_log_ratio(self):
        net = RatioNet(1, 0)
        params = fit_log_ratio(
            net,
            lambda g, n: g.standard_normal((n, 1)) + 1.0,
            lambda g, n: g.standard_normal((n, 1)),
            steps=2000,
            seed=0,
        )
        z = np.linspace(-1.0, 2.0, 31)[:, None]
        err = np.abs(net(params.const(), z, None).numpy() - (z[:, 0] - 0.5)).max()
        assert err < 0.1


class TestDiscriminator:
    def test_unit_ratio(self):
        assert discriminator_from_ratio(0.0).item() == 0.5

    def test_large_ratio_is_fake(self):
        assert discriminator_from_ratio(40.0).item() < 1e-15

    @pytest.mark.parametrize("s", [-2.0, 0.0, 2.0])
    def test_log_d_plus_softplus(self, s):
        assert log_discriminator(s).item() + T.softplus(s).item() == pytest.approx(0.0, abs=1e-15)

    def test_odds_equal_inverse_ratio(self):
        s = np.linspace(-20, 20, 401)
        log_odds = log_discriminator(s).numpy() - log1m_discriminator(s).numpy()
        assert np.max(np.abs(log_odds + s)) < 1e-10


class TestLatentVariableModel:
    def make(self, **kw):
        return LatentVariableModel(
            Mlp(MlpSpec((2, 5, 3), prefix="dec_")),
            Mlp(MlpSpec((3, 5, 2), prefix="enc_")),
            RatioNet(2, 3, prefix="a_"),
            RatioNet(3, 2, prefix="b_"),
            **kw,
        )

    def test_dimensions_and_groups(self):
        m = self.make()
        params = m.init_params(0)
        assert (m.data_dim, m.latent_dim) == (3, 2)
        assert set(params) == {"theta", "phi", "alpha", "beta"}

    def test_groups_use_distinct_streams(self):
        params = self.make().init_params(0)
        assert params["theta"]["dec_W0"].tobytes() != params["phi"]["enc_W1"].T.tobytes()

    def test_learned_scales(self):
        m = self.make(learn_scales=True, tau=0.2, t=0.3)
        params = m.init_params(0)
        assert np.exp(params["theta"]["log_tau"]) == pytest.approx(0.2)
        assert m.posterior(params["phi"].const()).scale_value == pytest.approx(0.3)


@given(st.floats(-30, 30))
def test_discriminator_in_unit_interval(s):
    d = discriminator_from_ratio(s).item()
    assert 0.0 <= d <= 1.0
