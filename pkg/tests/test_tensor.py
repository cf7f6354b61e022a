import numpy as np
import pytest

from soundssl.tensor import (CheckpointError, NonFiniteError, ShapeError, Tensor, batchnorm,
                             checkpoint_bytes, conv2d, grad_check, load_checkpoint, matmul,
                             maxpool2d, no_grad, parse_checkpoint, relu, save_checkpoint,
                             set_nonfinite_trap, softmax_cross_entropy, state_checksum, tsum)
from soundssl.tensor.checkpoint import MAGIC

from _gradcases import CASES, run_case


class TestGradientSuite:
    @pytest.mark.parametrize("name", sorted(CASES))
    def test_central_differences(self, name):
        worst, tol = run_case(name)
        assert worst < tol, f"{name}: max relative error {worst:.3g} >= {tol}"


class TestGradCheck:
    def test_quadratic(self):
        report = grad_check(lambda x: tsum(x * x), np.ones(5))
        np.testing.assert_allclose(report.analytic[0], 2.0)
        np.testing.assert_allclose(report.numeric[0], 2.0, atol=1e-6)
        assert report.passed

    def test_linear_is_exact(self):
        c = np.array([0.5, -2.0, 3.0])
        report = grad_check(lambda x: tsum(x * c), np.zeros(3))
        np.testing.assert_allclose(report.numeric[0], c, rtol=1e-9)

    def test_detects_wrong_gradient(self):
        def bad(x):
            # forward x**2 but the tape sees 3 * x: gradient wrong by design
            out = Tensor._make((x.data ** 2).sum(), (x,), lambda g: (g * 3 * np.ones_like(x.data),), "bad")
            return out
        assert not grad_check(bad, np.ones(3)).passed

    def test_nonfinite_intermediate(self):
        with pytest.raises(NonFiniteError):
            grad_check(lambda x: tsum(x.log()), np.array([1e-7, 1.0]), step=1e-6)


class TestOps:
    def test_relu_backward_negative(self):
        x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
        tsum(relu(x)).backward()
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_matmul_shape(self):
        assert matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 4)))).shape == (2, 4)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 4\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 3))) + Tensor(np.zeros((4, 3)))

    def test_grad_shape_matches_value_shape(self):
        a = Tensor(np.ones((3, 1)), requires_grad=True)
        b = Tensor(np.ones((1, 4)), requires_grad=True)
        tsum(a * b).backward()
        assert a.grad.shape == (3, 1) and b.grad.shape == (1, 4)
        np.testing.assert_array_equal(a.grad, 4.0)

    def test_shared_subexpression_accumulates_once(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        y = x * x
        (y + y).backward()
        assert float(x.grad) == 12.0

    def test_nonfinite_trap(self):
        with pytest.raises(NonFiniteError):
            Tensor(np.array([0.0])).log()
        previous = set_nonfinite_trap(False)
        try:
            assert np.isneginf(Tensor(np.array([0.0])).log().data[0])
        finally:
            set_nonfinite_trap(previous)

    def test_no_grad(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            y = x * 2
        assert not y.requires_grad

    def test_conv_same_and_valid_shapes(self):
        x = Tensor(np.zeros((2, 1, 9, 7)))
        w = Tensor(np.zeros((4, 1, 3, 3)))
        assert conv2d(x, w).shape == (2, 4, 7, 5)
        assert conv2d(x, w, padding="same").shape == (2, 4, 9, 7)
        assert conv2d(x, w, stride=2, padding="same").shape == (2, 4, 5, 4)
        assert conv2d(x, w, stride=2).shape == (2, 4, 4, 3)

    def test_conv_matches_direct_correlation(self):
        rng = np.random.default_rng(0)
        x, w = rng.standard_normal((1, 2, 6, 5)), rng.standard_normal((3, 2, 3, 2))
        out = conv2d(Tensor(x), Tensor(w)).data
        ref = np.zeros((1, 3, 4, 4))
        for f in range(3):
            for i in range(4):
                for j in range(4):
                    ref[0, f, i, j] = np.sum(x[0, :, i:i + 3, j:j + 2] * w[f])
        np.testing.assert_allclose(out, ref, rtol=1e-12)

    def test_maxpool_drops_remainder(self):
        x = Tensor(np.arange(2 * 5 * 5, dtype=float).reshape(1, 2, 5, 5))
        out = maxpool2d(x, (2, 2))
        assert out.shape == (1, 2, 2, 2)
        assert out.data[0, 0, 0, 0] == 6.0

    def test_batchnorm_running_stats(self):
        x = np.array([[1.0], [3.0]])
        rm, rv = np.zeros(1), np.ones(1)
        out = batchnorm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), rm, rv, True)
        np.testing.assert_allclose(out.data[:, 0], np.array([-1, 1]) / np.sqrt(1 + 1e-3))
        np.testing.assert_allclose(rm, [0.01 * 2.0])
        np.testing.assert_allclose(rv, [0.99 + 0.01 * 1.0])

    def test_softmax_cross_entropy_value(self):
        logits = np.array([[0.0, np.log(3.0)]])
        loss = softmax_cross_entropy(Tensor(logits), [1])
        np.testing.assert_allclose(float(loss.data), -np.log(0.75))

    def test_forward_determinism(self):
        rng = np.random.default_rng(3)
        x, w = rng.standard_normal((4, 3, 16, 16)).astype(np.float32), rng.standard_normal((5, 3, 3, 3)).astype(np.float32)
        a = conv2d(Tensor(x), Tensor(w)).data
        b = conv2d(Tensor(x), Tensor(w)).data
        assert a.tobytes() == b.tobytes()


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        state = {"conv0.weight": rng.standard_normal((2, 1, 3, 3)).astype(np.float32),
                 "bn.running_var": np.array([1.5, 2.5], dtype=np.float32),
                 "scalar": np.array(3.0, dtype=np.float32)}
        path = save_checkpoint(tmp_path / "w.ckpt", state)
        loaded = load_checkpoint(path)
        assert list(loaded) == list(state)
        for k in state:
            assert loaded[k].tobytes() == state[k].tobytes() and loaded[k].shape == state[k].shape
        assert save_checkpoint(tmp_path / "w2.ckpt", loaded).read_bytes() == path.read_bytes()
        assert state_checksum(loaded) == state_checksum(state)

    def test_header_layout(self):
        blob = checkpoint_bytes({"a": np.zeros((2, 3), dtype=np.float32)})
        assert blob[:4] == MAGIC
        assert int.from_bytes(blob[4:8], "little") == 1
        assert int.from_bytes(blob[8:12], "little") == 1
        assert len(blob) == 12 + 2 + 1 + 4 + 8 + 24

    @pytest.mark.parametrize("mutate, message", [
        (lambda b: b"XXXX" + b[4:], "magic"),
        (lambda b: b[:4] + (2).to_bytes(4, "little") + b[8:], "version"),
        (lambda b: b[:-3], "truncated"),
        (lambda b: b + b"\0", "trailing"),
    ])
    def test_malformed(self, mutate, message):
        blob = checkpoint_bytes({"a": np.ones(3, dtype=np.float32)})
        with pytest.raises(CheckpointError, match=message):
            parse_checkpoint(mutate(blob))
