"""ADADELTA and checkpoint round-trip tests."""

import numpy as np
import pytest

from docstruct.errors import ContractError, LoadError
from docstruct.optim import (
    ParamRegistry,
    adadelta_step,
    load_checkpoint,
    save_checkpoint,
)


def _adadelta_scalar_oracle(grads, rho, eps, lr=1.0):
    """Hand-rolled scalar recurrence, kept independent of the implementation."""
    x, sq_g, sq_u = 0.0, 0.0, 0.0
    trajectory = []
    for g in grads:
        sq_g = rho * sq_g + (1 - rho) * g * g
        delta = np.sqrt((sq_u + eps) / (sq_g + eps)) * g
        x = x - lr * delta
        sq_u = rho * sq_u + (1 - rho) * delta * delta
        trajectory.append(x)
    return trajectory


class TestAdadelta:
    def test_zero_gradient_decays_accumulator(self):
        reg = ParamRegistry()
        p = reg.add("w", np.array([1.0, 2.0]))
        reg._sq_grad["w"][:] = 4.0
        adadelta_step(reg, rho=0.95, eps=1e-6)
        np.testing.assert_array_equal(p.data, [1.0, 2.0])
        np.testing.assert_allclose(reg._sq_grad["w"], [3.8, 3.8])

    def test_matches_scalar_recurrence(self):
        rho, eps = 0.95, 1e-6
        grads = [0.3, -0.7, 1.2, 0.05]
        expected = _adadelta_scalar_oracle(grads, rho, eps)
        reg = ParamRegistry()
        p = reg.add("x", np.array([0.0]))
        for g, want in zip(grads, expected):
            p.grad[:] = g
            adadelta_step(reg, rho=rho, eps=eps)
            np.testing.assert_allclose(p.data, [want], atol=1e-15)

    def test_identical_parameters_get_identical_updates(self):
        reg = ParamRegistry()
        a = reg.add("a", np.array([1.5]))
        b = reg.add("b", np.array([1.5]))
        for _ in range(3):
            a.grad[:] = 0.4
            b.grad[:] = 0.4
            adadelta_step(reg)
        assert a.data[0] == b.data[0]

    def test_lr_multiplier_scales_step(self):
        reg = ParamRegistry()
        fast = reg.add("fast", np.array([1.0]), lr_mult=1.0)
        slow = reg.add("slow", np.array([1.0]), lr_mult=0.1)
        fast.grad[:] = 1.0
        slow.grad[:] = 1.0
        adadelta_step(reg)
        step_fast = 1.0 - fast.data[0]
        step_slow = 1.0 - slow.data[0]
        np.testing.assert_allclose(step_slow, 0.1 * step_fast, rtol=1e-12)

    def test_missing_grad_rejected(self):
        reg = ParamRegistry()
        p = reg.add("w", np.zeros(2))
        p.grad = None
        with pytest.raises(ContractError):
            adadelta_step(reg)

    def test_duplicate_name_rejected(self):
        reg = ParamRegistry()
        reg.add("w", np.zeros(2))
        with pytest.raises(ContractError):
            reg.add("w", np.zeros(3))


class TestCheckpoint:
    def _make_registry(self, seed=0):
        rng = np.random.default_rng(seed)
        reg = ParamRegistry()
        reg.add("enc.w", rng.normal(size=(4, 3)))
        reg.add("enc.b", rng.normal(size=3))
        reg.add("head.w", rng.normal(size=(3, 2)), lr_mult=0.1)
        return reg

    def test_round_trip_bit_identical(self, tmp_path):
        reg = self._make_registry()
        # advance optimizer state so it is non-trivial
        for _, p in reg.items():
            p.grad[:] = 0.3
        adadelta_step(reg)
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(reg, path)

        other = self._make_registry(seed=99)
        load_checkpoint(other, path)
        for name, p in reg.items():
            assert np.array_equal(p.data, other[name].data)
            assert np.array_equal(reg._sq_grad[name], other._sq_grad[name])
            assert np.array_equal(reg._sq_update[name], other._sq_update[name])

    def test_little_endian_header(self, tmp_path):
        reg = self._make_registry()
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(reg, path)
        raw = open(path, "rb").read()
        assert raw[:4] == b"DSCK"
        assert int.from_bytes(raw[4:8], "little") == 1

    def test_unknown_parameter_rejected(self, tmp_path):
        reg = self._make_registry()
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(reg, path)
        fresh = ParamRegistry()
        fresh.add("enc.w", np.zeros((4, 3)))
        with pytest.raises(LoadError):
            load_checkpoint(fresh, path)

    def test_truncated_file_rejected(self, tmp_path):
        reg = self._make_registry()
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(reg, path)
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[: len(raw) // 2])
        with pytest.raises(LoadError):
            load_checkpoint(self._make_registry(), path)

    def test_grad_norm_by_prefix(self):
        reg = self._make_registry()
        reg["enc.w"].grad[:] = 2.0
        assert reg.grad_norm("enc.w") == pytest.approx(np.sqrt(12 * 4.0))
        assert reg.grad_norm("head") == 0.0
