import math

import numpy as np
import pytest

from rangefuse.errors import ConfigError
from rangefuse.tensor import AdamW, WarmupCosine
from rangefuse.tensor.nn import Parameter
from rangefuse.tensor.optim import adamw_step


def adamw_reference(theta, grads, lrs, wd, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar-loop AdamW with decoupled decay."""
    theta = np.array(theta, dtype=np.float64)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, (g, lr) in enumerate(zip(grads, lrs), start=1):
        for i in range(theta.size):
            m.flat[i] = b1 * m.flat[i] + (1 - b1) * g.flat[i]
            v.flat[i] = b2 * v.flat[i] + (1 - b2) * g.flat[i] ** 2
            mhat = m.flat[i] / (1 - b1**t)
            vhat = v.flat[i] / (1 - b2**t)
            theta.flat[i] = theta.flat[i] * (1 - lr * wd) - lr * mhat / (math.sqrt(vhat) + eps)
    return theta


class TestSchedule:
    @pytest.fixture
    def eighty_epochs(self):
        return WarmupCosine(total_epochs=80, warmup_epochs=4, peak=1e-3, final=1e-5)

    def test_start_is_zero(self, eighty_epochs):
        assert eighty_epochs.lr_at(0) == 0.0

    def test_warmup_end_is_peak(self, eighty_epochs):
        assert eighty_epochs.lr_at(4) == pytest.approx(1e-3, rel=1e-12)

    def test_final_epoch(self, eighty_epochs):
        assert eighty_epochs.lr_at(80) == pytest.approx(1e-5, rel=1e-12)

    def test_warmup_is_linear(self, eighty_epochs):
        for e in (0.5, 1.0, 2.5, 3.9):
            assert eighty_epochs.lr_at(e) == pytest.approx(1e-3 * e / 4, rel=1e-12)

    def test_cosine_midpoint(self, eighty_epochs):
        assert eighty_epochs.lr_at(42) == pytest.approx((1e-3 + 1e-5) / 2, rel=1e-12)

    def test_monotone_decay_after_warmup(self, eighty_epochs):
        lrs = [eighty_epochs.lr_at(e) for e in np.linspace(4, 80, 200)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_no_warmup(self):
        s = WarmupCosine(total_epochs=10, warmup_epochs=0, peak=0.1, final=0.0)
        assert s.lr_at(0) == pytest.approx(0.1)
        assert s.lr_at(10) == pytest.approx(0.0, abs=1e-15)

    def test_all_warmup(self):
        s = WarmupCosine(total_epochs=2, warmup_epochs=2, peak=0.1, final=0.0)
        assert s.lr_at(1) == pytest.approx(0.05)
        assert s.lr_at(2) == pytest.approx(0.1)

    @pytest.mark.parametrize("epoch", [-0.1, 80.5])
    def test_out_of_range(self, eighty_epochs, epoch):
        with pytest.raises(ConfigError):
            eighty_epochs.lr_at(epoch)

    @pytest.mark.parametrize("kwargs", [{"total_epochs": 0}, {"warmup_epochs": -1}, {"total_epochs": 2, "warmup_epochs": 3}])
    def test_bad_schedule(self, kwargs):
        with pytest.raises(ConfigError):
            WarmupCosine(**kwargs)


class TestAdamW:
    def test_zero_grad_zero_decay_unchanged(self, rng):
        p = Parameter(rng.normal(size=(3, 4)))
        before = p.data.copy()
        opt = AdamW([p], weight_decay=0.0)
        for _ in range(5):
            p.grad = np.zeros_like(p.data)
            opt.step(1e-2)
        np.testing.assert_array_equal(p.data, before)

    def test_missing_grad_counts_as_zero(self, rng):
        p = Parameter(rng.normal(size=5))
        before = p.data.copy()
        AdamW([p], weight_decay=0.0).step(1e-2)
        np.testing.assert_array_equal(p.data, before)

    def test_zero_lr_unchanged(self, rng):
        p = Parameter(rng.normal(size=5))
        before = p.data.copy()
        opt = AdamW([p], weight_decay=0.5)
        p.grad = rng.normal(size=5)
        opt.step(0.0)
        np.testing.assert_array_equal(p.data, before)

    def test_matches_reference(self, rng):
        theta = rng.normal(size=(2, 3))
        grads = [rng.normal(size=(2, 3)) for _ in range(6)]
        lrs = [1e-3 * (k + 1) for k in range(6)]
        p = Parameter(theta.copy())
        opt = AdamW([p], weight_decay=0.003)
        for g, lr in zip(grads, lrs):
            p.grad = g
            opt.step(lr)
        np.testing.assert_allclose(p.data, adamw_reference(theta, grads, lrs, 0.003), rtol=1e-12, atol=1e-15)

    def test_first_step_moves_by_lr(self, rng):
        # bias correction makes the first update lr * sign(g)
        p = Parameter(np.zeros(4))
        opt = AdamW([p], weight_decay=0.0)
        p.grad = np.array([2.0, -3.0, 0.5, -0.01])
        opt.step(0.1)
        np.testing.assert_allclose(p.data, -0.1 * np.sign(p.grad), rtol=1e-6)

    def test_decay_is_decoupled(self):
        p = Parameter(np.full(3, 2.0))
        opt = AdamW([p], weight_decay=0.1)
        p.grad = np.zeros(3)
        opt.step(0.5)
        np.testing.assert_allclose(p.data, 2.0 * (1 - 0.05))

    def test_minimizes_quadratic(self, rng):
        target = rng.normal(size=6)
        p = Parameter(np.zeros(6))
        opt = AdamW([p], weight_decay=0.0)
        for _ in range(2000):
            p.grad = 2 * (p.data - target)
            opt.step(1e-2)
        np.testing.assert_allclose(p.data, target, atol=1e-3)

    def test_float32_stays_float32(self, rng):
        p = Parameter(rng.normal(size=3).astype(np.float32))
        opt = AdamW([p])
        p.grad = np.ones(3, dtype=np.float32)
        opt.step(1e-3)
        assert p.data.dtype == np.float32

    def test_zero_grad_clears(self, rng):
        p = Parameter(rng.normal(size=3))
        p.grad = np.ones(3)
        AdamW([p]).zero_grad()
        assert p.grad is None


class TestFunctionalStep:
    def test_uses_schedule(self, rng):
        p = Parameter(np.zeros(2))
        opt = AdamW([p], WarmupCosine(total_epochs=80, warmup_epochs=4), weight_decay=0.0)
        lr = adamw_step([p], [np.ones(2)], opt, epoch=4)
        assert lr == pytest.approx(1e-3)
        np.testing.assert_allclose(p.data, -1e-3, rtol=1e-6)

    def test_shape_mismatch(self):
        p = Parameter(np.zeros(2))
        with pytest.raises(ConfigError):
            adamw_step([p], [np.ones(3)], AdamW([p]), epoch=1)

    def test_epoch_outside_schedule(self):
        p = Parameter(np.zeros(2))
        with pytest.raises(ConfigError):
            adamw_step([p], [np.ones(2)], AdamW([p]), epoch=100)
