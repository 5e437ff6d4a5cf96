import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rlfolio import autodiff as ad
from rlfolio.autodiff import (AdamState, ComputationGraph, Tensor, adam_update,
                              finite_difference_check, load_params, save_params)
from rlfolio.errors import ContractError, GraphError


def scalar_graph(build, params):
    return ComputationGraph(build, params)


class TestForward:
    def test_square(self):
        x = Tensor(3.0, requires_grad=True)
        assert (x * x).item() == 9.0

    def test_softmax_of_zeros_is_uniform(self):
        out = ad.softmax(Tensor(np.zeros(24)))
        assert np.allclose(out.data, 1.0 / 24, atol=0)
        assert abs(out.data.sum() - 1.0) <= 1e-12

    def test_conv_all_ones(self):
        x = Tensor(np.ones((1, 24, 50)))
        k = Tensor(np.ones((1, 1, 1, 3)))
        out = ad.conv2d(x, k)
        assert out.shape == (1, 24, 48)
        assert np.all(out.data == 3.0)

    def test_conv_matches_direct_arithmetic(self, rng):
        x = Tensor(rng.standard_normal((2, 5, 9)))
        k = Tensor(rng.standard_normal((3, 2, 2, 4)))
        out = ad.conv2d(x, k).data
        expected = np.zeros((3, 4, 6))
        for f in range(3):
            for i in range(4):
                for j in range(6):
                    expected[f, i, j] = np.sum(x.data[:, i:i + 2, j:j + 4] * k.data[f])
        assert np.allclose(out, expected, atol=1e-12)

    def test_shape_mismatch_names_the_node(self):
        with pytest.raises(GraphError, match="matmul"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with pytest.raises(GraphError, match="conv2d"):
            ad.conv2d(Tensor(np.ones((2, 3, 3))), Tensor(np.ones((1, 1, 1, 1))))

    def test_log_rejects_nonpositive(self):
        with pytest.raises(GraphError, match="log"):
            ad.log(Tensor([1.0, 0.0]))


class TestBackward:
    def test_square_gradient(self):
        x = Tensor(3.0, requires_grad=True)
        y = x * x
        y.backward()
        assert float(x.grad) == 6.0

    def test_softmax_mean_gradient_sums_to_zero(self, rng):
        x = Tensor(rng.standard_normal((4, 7)), requires_grad=True)
        ad.tmean(ad.softmax(x, axis=-1)).backward()
        assert np.abs(x.grad.sum(axis=-1)).max() < 1e-12

    def test_non_scalar_output_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            (x * x).backward()

    def test_grad_accumulates_over_reuse(self):
        x = Tensor(2.0, requires_grad=True)
        y = x * x + x * 3.0
        y.backward()
        assert float(x.grad) == 7.0

    def test_backward_resets_previous_adjoints(self):
        x = Tensor(2.0, requires_grad=True)
        y = x * x
        y.backward()
        y.backward()
        assert float(x.grad) == 4.0


def random_mixed_graph(params):
    """Exercises every differentiable node kind in one scalar."""
    a, b, k = params["a"], params["b"], params["k"]
    conv = ad.conv2d(ad.tanh(a), k)
    act = ad.relu(conv) + ad.sigmoid(conv) * 0.3
    sm = ad.softmax(ad.matmul(b, act[0]), axis=-1)
    pieces = ad.concat([act[0, :, :2], sm], axis=1)
    pos = ad.log(ad.absolute(pieces) + 1.1)
    drop = ad.dropout(pos, 0.2, seed=99, train=True)
    return ad.tsum(drop) + ad.tmean(pieces) - ad.tsum(b * 0.5)


class TestFiniteDifference:
    def test_linear_graph_is_exact(self):
        params = {"x": Tensor(np.array([1.5, -2.0, 0.75]), requires_grad=True)}
        graph = scalar_graph(lambda p: ad.tsum(p["x"] * np.array([2.0, -1.0, 4.0])), params)
        report = finite_difference_check(graph)
        assert report.max_rel_error <= 1e-10
        assert report.n_checked == 3
        assert not report.excluded

    def test_mixed_graph_matches_central_differences(self, rng):
        params = {
            "a": Tensor(rng.standard_normal((2, 3, 6)) * 0.7, requires_grad=True),
            "b": Tensor(rng.standard_normal((3, 3)) * 0.7, requires_grad=True),
            "k": Tensor(rng.standard_normal((2, 2, 1, 3)) * 0.7, requires_grad=True),
        }
        graph = scalar_graph(random_mixed_graph, params)
        report = finite_difference_check(graph)
        assert report.max_rel_error <= 1e-4

    def test_relu_kink_excluded_not_failed(self):
        params = {"x": Tensor(np.array([0.0, 1.0]), requires_grad=True)}
        graph = scalar_graph(lambda p: ad.tsum(ad.relu(p["x"])), params)
        report = finite_difference_check(graph)
        assert ("x", (0,)) in report.excluded
        assert report.n_checked == 1
        assert report.max_rel_error <= 1e-10

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_random_small_graphs(self, seed):
        rng = np.random.default_rng(seed)
        params = {
            "w": Tensor(rng.standard_normal((3, 4)) * 0.8, requires_grad=True),
            "v": Tensor(rng.standard_normal((4, 2)) * 0.8, requires_grad=True),
        }

        def build(p):
            h = ad.tanh(ad.matmul(p["w"], p["v"]))
            s = ad.softmax(h, axis=0)
            return ad.tsum(ad.mul(s, h)) + ad.tmean(ad.sigmoid(p["v"]))

        report = finite_difference_check(scalar_graph(build, params))
        assert report.max_rel_error <= 1e-4


class TestDeterminismAndDropout:
    def test_identical_graph_inputs_seed_bit_identical(self, rng):
        x = rng.standard_normal((4, 5))

        def run():
            t = Tensor(x)
            out = ad.dropout(ad.tanh(t), 0.3, seed=7, train=True)
            return ad.tsum(out).item()

        assert run() == run()

    def test_dropout_eval_mode_is_identity(self):
        t = Tensor(np.arange(6.0).reshape(2, 3))
        out = ad.dropout(t, 0.5, seed=3, train=False)
        assert out is t

    def test_dropout_inverted_scaling(self):
        t = Tensor(np.ones(100_000))
        out = ad.dropout(t, 0.1, seed=0, train=True)
        kept = out.data[out.data > 0]
        assert np.allclose(kept, 1.0 / 0.9)
        assert abs(out.data.mean() - 1.0) < 0.01


class TestAdam:
    def test_zero_gradient_fixed_point(self):
        params = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
        state = AdamState.for_params(params)
        adam_update(params, {"w": np.zeros(2)}, state, lr=0.1)
        assert np.array_equal(params["w"].data, [1.0, -2.0])
        assert state.step_count == 1

    def test_first_step_magnitude_is_learning_rate(self, rng):
        g = rng.uniform(0.5, 2.0, size=8) * np.sign(rng.standard_normal(8))
        params = {"w": Tensor(np.zeros(8), requires_grad=True)}
        state = AdamState.for_params(params)
        adam_update(params, {"w": g.copy()}, state, lr=0.05)
        steps = -params["w"].data * np.sign(g)
        assert np.all(np.abs(steps - 0.05) <= 0.05 * 1e-6)

    def test_zero_learning_rate(self):
        params = {"w": Tensor(np.array([3.0]), requires_grad=True)}
        state = AdamState.for_params(params)
        adam_update(params, {"w": np.array([1.0])}, state, lr=0.0)
        assert params["w"].data[0] == 3.0

    def test_maximize_flips_direction(self):
        up = {"w": Tensor(np.zeros(1), requires_grad=True)}
        down = {"w": Tensor(np.zeros(1), requires_grad=True)}
        g = {"w": np.array([1.0])}
        adam_update(up, g, AdamState.for_params(up), lr=0.1, maximize=True)
        adam_update(down, g, AdamState.for_params(down), lr=0.1, maximize=False)
        assert up["w"].data[0] > 0 > down["w"].data[0]

    def test_shape_mismatch_rejected(self):
        params = {"w": Tensor(np.zeros(2), requires_grad=True)}
        with pytest.raises(ValueError, match="shape"):
            adam_update(params, {"w": np.zeros(3)}, AdamState.for_params(params), lr=0.1)


class TestCheckpoints:
    def test_round_trip_bit_identical(self, tmp_path, rng):
        params = {"a": Tensor(rng.standard_normal((3, 4))),
                  "b": Tensor(rng.standard_normal(7) * 1e-7)}
        path = tmp_path / "ckpt.json"
        save_params(params, path, header={"kind": "test", "answer": 42})
        loaded, header = load_params(path)
        assert header == {"kind": "test", "answer": 42}
        for name in params:
            assert np.array_equal(loaded[name], params[name].data)

    def test_format_version_embedded_and_checked(self, tmp_path):
        path = tmp_path / "ckpt.json"
        save_params({"a": Tensor(np.zeros(2))}, path)
        blob = json.loads(path.read_text())
        assert blob["format_version"] == ad.CHECKPOINT_FORMAT_VERSION
        blob["format_version"] = 999
        path.write_text(json.dumps(blob))
        with pytest.raises(ValueError, match="format_version"):
            load_params(path)

    def test_non_finite_parameters_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="non-finite"):
            save_params({"a": Tensor(np.array([np.nan]))}, tmp_path / "bad.json")
