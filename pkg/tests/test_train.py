import csv

import numpy as np
import pytest

from soundssl.models import ConvBlock, EncoderConfig, HeadConfig, build_classifier, build_encoder
from soundssl.optim import Optimizer, OptimizerConfig, update
from soundssl.tensor import NonFiniteError, Tensor, checkpoint_bytes
from soundssl.train import TrainRunConfig, finetune, max_norm, predict

TINY = EncoderConfig((ConvBlock(4, 3, pool=(2, 2)), ConvBlock(8, 3, pool=(2, 2))), (1, 16, 16))


def stripes(n_per_class, seed=0):
    """Three classes: a bright band at the top, middle or bottom of a noisy image."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 0.3, (3 * n_per_class, 1, 16, 16)).astype(np.float32)
    y = np.repeat(np.arange(3), n_per_class)
    for i, c in enumerate(y):
        x[i, 0, 5 * c:5 * c + 5] += 0.6
    return x, y


class TestOptimizers:
    def test_sgd_step(self):
        p = np.array([1.0])
        update(OptimizerConfig("sgd", 0.1), p, np.array([2.0]), {})
        np.testing.assert_allclose(p, [0.8])

    def test_sgd_momentum_two_steps(self):
        p, state = np.array([1.0]), {}
        cfg = OptimizerConfig("sgd", 0.1, momentum=0.9)
        for _ in range(2):
            update(cfg, p, np.array([2.0]), state)
        # v1 = -0.2, v2 = 0.9 * v1 - 0.2 = -0.38
        np.testing.assert_allclose(p, [1.0 - 0.2 - 0.38])

    def test_adam_first_step_is_lr(self):
        p = np.array([1.0, -1.0, 3.0])
        update(OptimizerConfig("adam", 1e-3), p, np.array([5.0, -0.01, 2e3]), {})
        np.testing.assert_allclose(p, [1.0 - 1e-3, -1.0 + 1e-3, 3.0 - 1e-3], rtol=1e-6)

    def test_rmsprop_first_step(self):
        p = np.array([0.0])
        update(OptimizerConfig("rmsprop", 0.01), p, np.array([4.0]), {})
        np.testing.assert_allclose(p, [-0.01 / np.sqrt(0.1)], rtol=1e-6)

    @pytest.mark.parametrize("kind", ["sgd", "adam", "rmsprop"])
    def test_zero_gradient_leaves_parameters(self, kind):
        p = np.array([0.5, -2.0])
        state = {}
        cfg = OptimizerConfig(kind, 0.1, momentum=0.9 if kind == "sgd" else 0.0)
        for _ in range(3):
            update(cfg, p, np.zeros(2), state)
        np.testing.assert_array_equal(p, [0.5, -2.0])

    @pytest.mark.parametrize("kind", ["sgd", "adam", "rmsprop"])
    def test_vanishing_learning_rate(self, kind):
        p = np.array([0.5])
        update(OptimizerConfig(kind, 1e-12), p, np.array([3.0]), {})
        assert abs(p[0] - 0.5) < 1e-10

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            OptimizerConfig("sgd", 0.0)
        with pytest.raises(ValueError, match="unknown optimizer"):
            OptimizerConfig("lbfgs")

    def test_nonfinite_gradient(self):
        with pytest.raises(NonFiniteError):
            update(OptimizerConfig(), np.zeros(2), np.array([np.nan, 0.0]), {})

    def test_optimizer_skips_params_without_grad(self):
        a = Tensor(np.ones(2), requires_grad=True)
        b = Tensor(np.ones(2), requires_grad=True)
        a.grad = np.ones(2)
        opt = Optimizer({"a": a, "b": b}, OptimizerConfig("sgd", 0.5))
        opt.step()
        np.testing.assert_array_equal(a.data, [0.5, 0.5])
        np.testing.assert_array_equal(b.data, [1.0, 1.0])
        opt.zero_grad()
        assert a.grad is None


class TestMaxNorm:
    def test_uint8(self):
        out = max_norm(np.array([0, 51, 255], dtype=np.uint8))
        np.testing.assert_allclose(out, [0.0, 0.2, 1.0], rtol=1e-7)
        assert out.dtype == np.float32

    def test_float_out_of_range(self):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            max_norm(np.array([0.5, 1.5]))


class TestFinetune:
    def test_separable_toy_data(self, tmp_path):
        x, y = stripes(12)
        xv, yv = stripes(4, seed=1)
        model = build_classifier(build_encoder(TINY, 1), HeadConfig(3), 1)
        result = finetune(model, (x, y), (xv, yv), OptimizerConfig("adam", 0.01), TrainRunConfig(25, 6, 1))
        assert max(r["train_accuracy"] for r in result.curves) >= 0.99
        assert result.best_val_accuracy >= 0.99
        model.load_state_dict(result.best_state)
        assert (predict(model, xv) == yv).mean() == result.best_val_accuracy
        rows = list(csv.reader(open(result.write_curves(tmp_path / "c.csv"))))
        assert rows[0] == ["epoch", "train_loss", "train_accuracy", "val_balanced_accuracy"]
        assert len(rows) == 26

    def test_best_epoch_is_earliest_maximum(self):
        x, y = stripes(4)
        model = build_classifier(build_encoder(TINY, 2), HeadConfig(3), 2)
        result = finetune(model, (x, y), (x, y), OptimizerConfig("adam", 0.01), TrainRunConfig(8, 4, 2))
        bas = [r["val_balanced_accuracy"] for r in result.curves]
        assert result.best_epoch == bas.index(max(bas)) + 1

    def test_frozen_seed_is_bit_identical(self):
        x, y = stripes(4)
        states = []
        for _ in range(2):
            model = build_classifier(build_encoder(TINY, 3), HeadConfig(3), 3)
            r = finetune(model, (x, y), (x, y), OptimizerConfig("sgd", 0.05, momentum=0.9),
                         TrainRunConfig(3, 4, 3))
            states.append(checkpoint_bytes(r.best_state))
        assert states[0] == states[1]

    def test_divergence_names_epoch_and_batch(self):
        x, y = stripes(4)
        model = build_classifier(build_encoder(TINY, 3), HeadConfig(3), 3)
        with np.errstate(all="ignore"), pytest.raises(NonFiniteError, match=r"fine-tune epoch \d+, batch \d+"):
            finetune(model, (x, y), (x, y), OptimizerConfig("sgd", 1e30), TrainRunConfig(5, 4, 3))

    def test_run_config_validation(self):
        with pytest.raises(ValueError):
            TrainRunConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainRunConfig(batch_size=1)
