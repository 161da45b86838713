"""Adam, the row-sparse Adam table and learning-rate schedules."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from splitfield.autodiff import GraphError, Tensor
from splitfield.optim import Adam, AdamState, RowAdam, adam_update, attack_lr, exp_decay_lr


def reference_adam(x, grads, lr=0.01, b1=0.9, b2=0.999, eps=1e-8):
    m = v = np.zeros_like(x)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return x


class TestAdam:
    """Bias-corrected Adam."""

    def test_first_step_is_signed_lr(self):
        x = np.array([1.0, -2.0, 3.0])
        adam_update(x, np.array([0.3, -5.0, 0.0]), AdamState((3,), lr=0.1))
        assert_allclose(x, [0.9, -1.9, 3.0], atol=1e-6)

    def test_matches_reference_sequence(self, rng):
        grads = [rng.normal(size=(2, 3)) for _ in range(25)]
        x0 = rng.normal(size=(2, 3))
        p = Tensor(x0.copy(), requires_grad=True)
        opt = Adam([p], lr=0.05)
        for g in grads:
            p.grad = g
            opt.step()
        assert_allclose(p.value, reference_adam(x0, grads, lr=0.05), rtol=1e-12)

    def test_lr_override(self):
        x = np.zeros(1)
        adam_update(x, np.ones(1), AdamState((1,), lr=0.1), lr_t=0.5)
        assert_allclose(x, [-0.5], atol=1e-6)

    def test_missing_grad_counts_as_zero(self):
        p = Tensor(np.ones(2), requires_grad=True)
        opt = Adam([p])
        opt.step()
        assert_allclose(p.value, np.ones(2))
        assert opt.states[0].t == 1

    def test_shape_mismatch(self):
        p = Tensor(np.ones(2), requires_grad=True)
        p.grad = np.ones(2)
        opt = Adam([p])
        opt.states[0] = AdamState((3,))
        with pytest.raises(GraphError):
            opt.step()


class TestRowAdam:
    """Only rows present in a step move, and each row keeps its own step count."""

    def test_untouched_rows_fixed(self, rng):
        table = rng.normal(size=(5, 3))
        before = table.copy()
        RowAdam(3, lr=0.1).step(table, np.array([1, 3]), np.ones((2, 3)))
        assert_allclose(table[[0, 2, 4]], before[[0, 2, 4]])
        assert_allclose(table[[1, 3]], before[[1, 3]] - 0.1, atol=1e-6)

    def test_duplicate_rows_sum(self):
        table = np.zeros((2, 1))
        opt = RowAdam(1, lr=1.0)
        opt.step(table, np.array([0, 0]), np.array([[1.0], [-3.0]]))
        assert_allclose(table[0], [1.0], atol=1e-6)

    def test_row_matches_dense_reference(self, rng):
        grads = [rng.normal(size=(1, 2)) for _ in range(10)]
        table = np.zeros((4, 2))
        opt = RowAdam(2, lr=0.02)
        for i, g in enumerate(grads):
            opt.step(table, np.array([2]), g)
            if i % 2:
                opt.step(table, np.array([0]), g)  # other rows do not advance row 2's clock
        assert_allclose(table[2], reference_adam(np.zeros(2), [g[0] for g in grads], lr=0.02), rtol=1e-12)

    def test_table_growth(self):
        opt = RowAdam(3)
        table = np.zeros((2, 3))
        opt.step(table, np.array([1]), np.ones((1, 3)))
        table = np.vstack([table, np.zeros((4, 3))])
        opt.step(table, np.array([5]), np.ones((1, 3)))
        assert opt.t.tolist() == [0, 1, 0, 0, 0, 1]


class TestSchedules:
    """Learning-rate schedules hit their endpoints."""

    def test_exp_decay_endpoints(self):
        assert exp_decay_lr(0.01, 0, 100) == 0.01
        assert_allclose(exp_decay_lr(0.01, 100, 100), 0.001)
        assert_allclose(exp_decay_lr(0.01, 50, 100), 0.01 * 0.1**0.5)

    @pytest.mark.parametrize(
        "scheme,t,expected", [("pow01", 200, 0.001), ("pow0001", 200, 1e-5), ("inv10", 4, 2.5), ("inv10", 0, 10.0), ("inv10", 200, 0.05)]
    )
    def test_attack_schemes(self, scheme, t, expected):
        assert_allclose(attack_lr(scheme, 0.01, t, 200), expected)

    def test_unknown_scheme(self):
        with pytest.raises(ValueError):
            attack_lr("cosine", 0.01, 1, 10)
