import json
import math
import warnings

import numpy as np
import pytest

from barmiss.errors import ConfigurationError
from barmiss.model import (
    EventMatrix,
    MissingnessSpec,
    NetworkModel,
    apply_missingness,
    make_rng,
    sigmoid,
    simulate_bar,
    softplus,
)


class TestScalarFunctions:
    def test_sigmoid_extremes_are_finite(self):
        x = np.array([-1e308, -800.0, 0.0, 800.0, 1e308])
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            s = sigmoid(x)
        np.testing.assert_array_equal(s, [0.0, 0.0, 0.5, 1.0, 1.0])

    def test_sigmoid_symmetry(self, rng):
        x = rng.uniform(-40, 40, 1000)
        np.testing.assert_allclose(sigmoid(x) + sigmoid(-x), 1.0, atol=1e-15)

    def test_scalar_in_float_out(self):
        assert isinstance(sigmoid(0.3), float)
        assert isinstance(softplus(0.3), float)

    def test_nan_propagates(self):
        assert math.isnan(sigmoid(float("nan")))

    def test_softplus_matches_log1p_exp(self, rng):
        x = rng.uniform(-20, 20, 200)
        np.testing.assert_allclose(softplus(x), np.log1p(np.exp(x)), rtol=1e-13)
        assert softplus(1000.0) == 1000.0

    def test_softplus_derivative_is_sigmoid(self):
        x, h = np.linspace(-5, 5, 41), 1e-6
        fd = (softplus(x + h) - softplus(x - h)) / (2 * h)
        np.testing.assert_allclose(fd, sigmoid(x), atol=1e-9)


class TestMakeRng:
    def test_same_keys_same_stream(self):
        assert make_rng(4, 1, 2).random() == make_rng(4, 1, 2).random()

    def test_keys_separate_streams(self):
        assert make_rng(4, 1).random() != make_rng(4, 2).random()

    def test_negative_seed_rejected(self):
        with pytest.raises(ConfigurationError):
            make_rng(-1)


class TestNetworkModel:
    def test_shape_validation(self):
        with pytest.raises(ConfigurationError):
            NetworkModel(np.zeros((2, 3)), np.zeros(2))
        with pytest.raises(ConfigurationError):
            NetworkModel(np.zeros((2, 2)), np.zeros(3))

    def test_ball_constraint(self):
        with pytest.raises(ConfigurationError):
            NetworkModel([[0.7, 0.6], [0, 0]], [0, 0], ball_constrained=True)
        NetworkModel([[0.5, -0.5], [0, 0]], [0, 0], ball_constrained=True)

    def test_arrays_are_read_only(self):
        m = NetworkModel.zeros(3)
        with pytest.raises(ValueError):
            m.A[0, 0] = 1.0

    def test_json_roundtrip(self, tmp_path, small_truth):
        path = tmp_path / "m.json"
        small_truth.to_json(path)
        back = NetworkModel.from_json(path)
        np.testing.assert_array_equal(back.A, small_truth.A)
        np.testing.assert_array_equal(back.nu, small_truth.nu)
        assert set(json.loads(path.read_text())) == {"M", "A", "nu", "meta"}

    def test_missing_nu_defaults_to_zero(self):
        m = NetworkModel.from_dict({"A": [[0.1, 0], [0, 0.2]]})
        np.testing.assert_array_equal(m.nu, [0, 0])


class TestEventMatrix:
    def test_rejects_non_binary(self):
        with pytest.raises(ConfigurationError):
            EventMatrix([[0, 2]])

    def test_default_node_ids(self):
        assert EventMatrix(np.zeros((3, 4))).node_ids == ("0", "1", "2")

    def test_csv_roundtrip(self, tmp_path, rng):
        x = EventMatrix(rng.integers(0, 2, (4, 9)), ["a", "b", "c", "d"])
        x.to_csv(tmp_path / "x.csv")
        back = EventMatrix.from_csv(tmp_path / "x.csv")
        np.testing.assert_array_equal(back.data, x.data)
        assert back.node_ids == x.node_ids

    def test_csv_layout_is_time_major(self, tmp_path):
        EventMatrix([[1, 0, 0], [0, 0, 1]], ["u", "v"]).to_csv(tmp_path / "x.csv")
        assert (tmp_path / "x.csv").read_text() == "u,v\n1,0\n0,0\n0,1\n"

    def test_permuted_keeps_labels_attached(self):
        x = EventMatrix([[1, 1], [0, 1], [0, 0]], ["a", "b", "c"])
        y = x.permuted([2, 0, 1])
        assert y.node_ids == ("c", "a", "b")
        np.testing.assert_array_equal(y.data[1], [1, 1])

    def test_malformed_csv(self, tmp_path):
        (tmp_path / "bad.csv").write_text("a,b\n1,x\n")
        with pytest.raises(ConfigurationError):
            EventMatrix.from_csv(tmp_path / "bad.csv")


class TestMissingnessSpec:
    def test_range(self):
        for bad in (0.0, -0.1, 1.2):
            with pytest.raises(ConfigurationError):
                MissingnessSpec(bad)

    def test_p_hat_defaults_to_p(self):
        np.testing.assert_array_equal(MissingnessSpec(0.6).p_hat, [0.6])

    def test_warns_at_or_below_inverse_pi(self):
        with pytest.warns(UserWarning):
            spec = MissingnessSpec(0.3)
        assert spec.below_threshold

    def test_per_node_vector(self):
        spec = MissingnessSpec([0.5, 0.9])
        np.testing.assert_array_equal(spec.p_vector(2), [0.5, 0.9])
        with pytest.raises(ConfigurationError):
            spec.p_vector(3)


class TestSimulation:
    def test_deterministic(self, small_truth):
        a = simulate_bar(small_truth, 50, seed=9)
        b = simulate_bar(small_truth, 50, seed=9)
        np.testing.assert_array_equal(a.data, b.data)

    def test_zero_model_is_fair_coin(self):
        x = simulate_bar(NetworkModel.zeros(4), 5000, seed=1)
        assert abs(x.data.mean() - 0.5) < 4 * 0.5 / math.sqrt(x.data.size)

    def test_single_node_stationary_rate(self):
        # two-state chain: P(1|0) = s(nu), P(1|1) = s(nu + a)
        nu, a = -0.5, 0.9
        up, stay = sigmoid(nu), sigmoid(nu + a)
        pi1 = up / (1 - stay + up)
        x = simulate_bar(NetworkModel([[a]], [nu]), 40000, seed=2, burn_in=100)
        assert abs(x.data.mean() - pi1) < 0.015

    def test_x0_length_checked(self, small_truth):
        with pytest.raises(ConfigurationError):
            simulate_bar(small_truth, 5, x0=np.zeros(2))

    def test_missingness_p_one_is_identity(self, small_truth):
        x = simulate_bar(small_truth, 30, seed=1)
        z, w = apply_missingness(x, MissingnessSpec(1.0), seed=5)
        np.testing.assert_array_equal(z.data, x.data)
        assert w.data.all()

    def test_thinning_rate_and_support(self):
        x = EventMatrix(np.ones((3, 20000), dtype=np.uint8))
        z, w = apply_missingness(x, MissingnessSpec([0.4, 0.5, 0.9]), seed=4)
        np.testing.assert_allclose(z.data.mean(axis=1), [0.4, 0.5, 0.9], atol=0.015)
        assert np.all(z.data <= x.data)
        np.testing.assert_array_equal(z.data, w.data & x.data)
