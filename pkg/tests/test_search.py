"""Bilevel optimization against closed-form oracles on a two-scalar problem.

The toy problem: inner loss 0.5*w^2 - a*w, outer loss 0.5*(w' - 1)^2 with
w' = w - eps*(w - a).  The exact hypergradient is d/da outer = eps*(w'-1),
which the finite-difference pipeline must reproduce.
"""

import numpy as np
import numpy.testing as npt
import pytest

from skelnas import tensor as tc
from skelnas.search import (
    SearchConfig,
    SearchState,
    alpha_hypergradient,
    lr_at,
    run_search,
    search_step,
    virtual_step,
)
from skelnas.supernet import SuperNet, init_alpha, mean_edge_entropy


def scalar(v):
    return tc.Tensor(np.array([v], dtype=np.float64), requires_grad=True)


def toy_problem(w0, a0):
    w = tc.Parameter(np.array([w0], dtype=np.float64), "w")
    a = tc.Tensor(np.array([a0], dtype=np.float64), requires_grad=True)

    def train_loss():
        # 0.5*w^2 - a*w
        wt = w.tensor
        return tc.tensor_sum(tc.sub(tc.mul(wt, wt) * 0.5, tc.mul(a, wt)))

    def val_loss():
        diff = w.tensor - 1.0
        return tc.tensor_sum(tc.mul(diff, diff) * 0.5)

    return w, a, train_loss, val_loss


def test_virtual_step_hand_gradient():
    # L = (w - 2)^2 at w=0: gradient -4, so w' = 0 - 0.1*(-4) = 0.4
    w = tc.Parameter(np.array([0.0]), "w")

    def loss():
        d = w.tensor - 2.0
        return tc.tensor_sum(tc.mul(d, d))

    (stepped,) = virtual_step([w], loss, epsilon=0.1)
    npt.assert_allclose(stepped, [0.4], rtol=1e-12)
    npt.assert_array_equal(w.data, [0.0])  # original untouched
    assert w.tensor.grad is None


def test_virtual_step_epsilon_zero_is_bitwise_copy():
    w = tc.Parameter(np.array([1.25, -3.5]), "w")
    (stepped,) = virtual_step([w], lambda: tc.tensor_sum(w.tensor), epsilon=0.0)
    assert np.array_equal(stepped, w.data)
    assert stepped is not w.data


def test_virtual_step_displacement_linear_in_epsilon():
    # dyadic values keep every float operation exact
    w = tc.Parameter(np.array([0.5]), "w")

    def loss():
        d = w.tensor - 2.0
        return tc.tensor_sum(tc.mul(d, d))

    (s1,) = virtual_step([w], loss, epsilon=0.125)
    (s2,) = virtual_step([w], loss, epsilon=0.25)
    npt.assert_array_equal(s2 - w.data, 2.0 * (s1 - w.data))


def test_virtual_step_never_touches_momentum():
    w = tc.Parameter(np.array([1.0]), "w")
    w.momentum_buffer = np.array([0.625])
    virtual_step([w], lambda: tc.tensor_sum(tc.mul(w.tensor, w.tensor)), 0.1)
    npt.assert_array_equal(w.momentum_buffer, [0.625])


def test_hypergradient_epsilon_zero_is_plain_validation_gradient():
    w, a, train_loss, val_loss = toy_problem(0.3, 0.8)
    (got,) = alpha_hypergradient([w], [a], train_loss, val_loss, epsilon=0.0)
    # val loss does not depend on a directly
    npt.assert_array_equal(got, [0.0])

    # and with a val loss that does: L_val = a*w -> dL/da = w exactly
    def val_loss2():
        return tc.tensor_sum(tc.mul(a, w.tensor))

    (got2,) = alpha_hypergradient([w], [a], train_loss, val_loss2, epsilon=0.0)
    npt.assert_array_equal(got2, w.data)


@pytest.mark.parametrize("eps", [0.05, 0.1, 0.2, 0.3, 0.5])
@pytest.mark.parametrize("w0", [-1.0, -0.3, 0.0, 0.6, 2.0])
def test_hypergradient_matches_closed_form_on_grid(eps, w0):
    a0 = 0.4
    w, a, train_loss, val_loss = toy_problem(w0, a0)
    (got,) = alpha_hypergradient([w], [a], train_loss, val_loss, epsilon=eps)
    w_prime = w0 - eps * (w0 - a0)
    expected = eps * (w_prime - 1.0)
    npt.assert_allclose(got, [expected], rtol=1e-2)
    npt.assert_array_equal(w.data, [w0])  # weights restored bitwise


def test_hypergradient_second_term_scales_linearly():
    # L_train = a*w (grad_a = w), L_val = 3*w: v is constant so h is fixed
    # and the whole correction term is exactly linear in epsilon
    w = tc.Parameter(np.array([0.9], dtype=np.float64), "w")
    a = tc.Tensor(np.array([0.2], dtype=np.float64), requires_grad=True)

    def train_loss():
        return tc.tensor_sum(tc.mul(a, w.tensor))

    def val_loss():
        return tc.tensor_sum(w.tensor * 3.0)

    (h1,) = alpha_hypergradient([w], [a], train_loss, val_loss, epsilon=0.125)
    (h2,) = alpha_hypergradient([w], [a], train_loss, val_loss, epsilon=0.25)
    npt.assert_allclose(h2, 2.0 * h1, atol=1e-10)


def test_hypergradient_zero_validation_gradient_direction():
    # v = 0: the correction is defined as zero
    w, a, train_loss, _ = toy_problem(1.0, 0.4)

    def flat_val_loss():
        return tc.tensor_sum(w.tensor * 0.0)

    (got,) = alpha_hypergradient([w], [a], train_loss, flat_val_loss, epsilon=0.3)
    npt.assert_array_equal(got, [0.0])


def test_first_second_order_consistency_as_epsilon_shrinks():
    net = SuperNet(num_cells=3, C_init=4, num_classes=2, seed=0, dtype=np.float64)
    alphas = init_alpha(0, noise_scale=0.1, dtype=np.float64)
    rng = np.random.default_rng(4)
    X = rng.standard_normal((4, 3, 8, 6))
    y = np.array([0, 1, 0, 1])
    Xv = rng.standard_normal((4, 3, 8, 6))
    yv = np.array([1, 0, 1, 0])
    params = net.params()

    def train_loss():
        return net.loss(X, y, alphas, train=True)

    def val_loss():
        return net.loss(Xv, yv, alphas, train=True)

    base = alpha_hypergradient(params, alphas.tensors(), train_loss, val_loss, 0.0)
    diffs = []
    for eps in (1e-2, 1e-3, 1e-4):
        got = alpha_hypergradient(params, alphas.tensors(), train_loss, val_loss, eps)
        diffs.append(
            sum(float(np.linalg.norm(g - b)) for g, b in zip(got, base))
        )
    assert diffs[0] > diffs[1] > diffs[2]


def descent_toy_state(w0, a0, gamma, eps):
    w, a, train_loss, val_loss = toy_problem(w0, a0)
    (grad_a,) = alpha_hypergradient([w], [a], train_loss, val_loss, epsilon=eps)
    a.data -= gamma * grad_a
    loss = train_loss()
    loss.backward()
    tc.sgd_momentum_step([w], lr=eps, momentum=0.0)
    a.zero_grad()
    return w, a


def test_one_toy_step_descends_validation_loss():
    w0, a0, eps, gamma = 0.0, 0.4, 0.1, 0.05

    def val_at(w_val, eps_val, a_val):
        w_prime = w_val - eps_val * (w_val - a_val)
        return 0.5 * (w_prime - 1.0) ** 2

    before = val_at(w0, eps, a0)
    w, a = descent_toy_state(w0, a0, gamma, eps)
    after = val_at(float(w.data[0]), eps, float(a.data[0]))
    assert after < before


def make_desk_problem(seed=0, n=24, dtype=np.float32):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 3, 8, 6)).astype(dtype)
    y = (np.arange(n) % 2).astype(np.int64)
    return X, y


def test_search_step_gamma_zero_keeps_alpha_and_steps_omega():
    net = SuperNet(num_cells=3, C_init=4, num_classes=2, seed=1)
    alphas = init_alpha(1)
    cfg = SearchConfig(lr_alpha=0.0, lr_omega=0.05, epochs=1, batch_size=4, seed=0)
    state = SearchState(net, alphas, cfg)
    X, y = make_desk_problem()
    before_alpha = alphas.snapshot()
    before_w = [p.data.copy() for p in net.params()]
    search_step(state, (X[:4], y[:4]), (X[4:8], y[4:8]))
    after_alpha = alphas.snapshot()
    assert np.array_equal(before_alpha[0], after_alpha[0])
    assert np.array_equal(before_alpha[1], after_alpha[1])
    moved = any(
        not np.array_equal(b, p.data) for b, p in zip(before_w, net.params())
    )
    assert moved


def test_alpha_phase_leaves_omega_buffers_bitwise_unchanged():
    net = SuperNet(num_cells=3, C_init=4, num_classes=2, seed=2)
    alphas = init_alpha(2)
    X, y = make_desk_problem(1)
    params = net.params()
    before = [p.data.copy() for p in params]

    def train_loss():
        return net.loss(X[:4], y[:4], alphas, train=True)

    def val_loss():
        return net.loss(X[4:8], y[4:8], alphas, train=True)

    alpha_hypergradient(params, alphas.tensors(), train_loss, val_loss, epsilon=0.05)
    for b, p in zip(before, params):
        assert np.array_equal(b, p.data), p.name
        assert p.momentum_buffer is None


def run_tiny_search(seed=0, epochs=2, csv_path=None):
    net = SuperNet(num_cells=3, C_init=4, num_classes=2, seed=seed)
    alphas = init_alpha(seed)
    cfg = SearchConfig(
        epochs=epochs, batch_size=4, lr_omega=0.05, lr_alpha=0.05, seed=seed
    )
    X, y = make_desk_problem(3)
    history, best = run_search(
        net, alphas, cfg, (X[:16], y[:16]), (X[16:], y[16:]), csv_path=csv_path
    )
    return history, best, alphas


def test_run_search_zero_epochs_returns_initial_alpha():
    net = SuperNet(num_cells=3, C_init=4, num_classes=2, seed=5)
    alphas = init_alpha(5)
    before = alphas.snapshot()
    cfg = SearchConfig(epochs=0, batch_size=4, seed=5)
    X, y = make_desk_problem(5)
    history, best = run_search(net, alphas, cfg, (X[:16], y[:16]), (X[16:], y[16:]))
    assert np.array_equal(best[0], before[0])
    assert np.array_equal(best[1], before[1])
    assert len(history) == 1


def test_run_search_deterministic_trajectories():
    h1, b1, a1 = run_tiny_search(seed=7)
    h2, b2, a2 = run_tiny_search(seed=7)
    assert len(h1) == len(h2)
    for (n1, r1), (n2, r2) in zip(h1, h2):
        assert np.array_equal(n1, n2)
        assert np.array_equal(r1, r2)
    assert np.array_equal(a1.normal.data, a2.normal.data)


def test_run_search_writes_metrics_csv(tmp_path):
    csv_path = tmp_path / "metrics.csv"
    run_tiny_search(seed=9, csv_path=csv_path)
    lines = csv_path.read_text().splitlines()
    assert lines[0] == (
        "epoch,step,train_loss,val_loss,val_top1,"
        "mean_edge_entropy_normal,mean_edge_entropy_reduce,lr_omega,lr_alpha"
    )
    assert len(lines) == 3  # header + 2 epochs


def test_lr_schedule_endpoints():
    cfg = SearchConfig(lr_omega=0.1, lr_min=0.001, epochs=10)
    assert lr_at(cfg, 0.0) == pytest.approx(0.1)
    assert lr_at(cfg, 1.0) == pytest.approx(0.001)
    step_cfg = SearchConfig(lr_omega=0.1, lr_min=1e-5, decay="step")
    assert lr_at(step_cfg, 0.1) == pytest.approx(0.1)
    assert lr_at(step_cfg, 0.6) == pytest.approx(0.01)
    assert lr_at(step_cfg, 0.9) == pytest.approx(0.001)


def test_alpha_rows_still_normalized_after_steps():
    _, _, alphas = run_tiny_search(seed=11, epochs=1)
    from skelnas.supernet import softmax_matrix

    for _, t in alphas.items():
        npt.assert_allclose(softmax_matrix(t.data).sum(axis=1), 1.0, atol=1e-6)


def test_entropy_decreases_on_tiny_search():
    _, _, alphas = run_tiny_search(seed=13, epochs=3)
    assert mean_edge_entropy(alphas.normal) < np.log(8.0)
