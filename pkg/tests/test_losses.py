"""Loss tests: cross-entropy, transducer DP vs enumeration, analytic grads."""

import numpy as np
import pytest

from epswitch import losses
from epswitch import netkit as nk


def random_lattice(rng, T, U, K):
    """Normalized log-distributions over a (T, U+1, K) grid."""
    z = rng.normal(size=(T, U + 1, K))
    return nk.log_softmax(z)


# ---------------------------------------------------------------------------
# cross-entropy


def test_ce_loss_matches_manual():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(6, 4))
    labels = rng.integers(0, 4, size=6)
    loss = losses.ce_loss(nk.Var(logits), labels)
    lp = nk.log_softmax(logits)
    want = -lp[np.arange(6), labels].mean()
    assert float(loss.value) == pytest.approx(want, abs=1e-12)


def test_ce_loss_gradient_is_softmax_minus_onehot_over_T():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(5, 3))
    labels = np.array([0, 2, 1, 1, 0])
    v = nk.Var(logits)
    losses.ce_loss(v, labels).backward()
    p = nk.softmax(logits)
    onehot = np.zeros_like(p)
    onehot[np.arange(5), labels] = 1.0
    np.testing.assert_allclose(v.grad, (p - onehot) / 5, atol=1e-12)


def test_ce_loss_perfect_prediction_is_near_zero():
    logits = np.full((3, 4), -50.0)
    labels = [1, 2, 0]
    for t, l in enumerate(labels):
        logits[t, l] = 50.0
    loss = losses.ce_loss(nk.Var(logits), labels)
    assert float(loss.value) < 1e-12


def test_ce_loss_validation():
    with pytest.raises(losses.LossError):
        losses.ce_loss(nk.Var(np.zeros((3, 4))), [0, 1])
    with pytest.raises(losses.LossError):
        losses.ce_loss(nk.Var(np.zeros((3, 4))), [0, 1, 4])
    with pytest.raises(losses.LossError):
        losses.ce_loss(nk.Var(np.zeros((3, 4))), [0, 1, -1])


# ---------------------------------------------------------------------------
# transducer loss: known values


def test_rnnt_known_value_t1_u0():
    # single frame, empty target: loss is -log p_blank at (0, 0)
    p = np.log(np.array([[[0.3, 0.7]]]))
    loss = losses.rnnt_loss_dp(p, [], blank=1)
    assert loss == pytest.approx(-np.log(0.7), abs=1e-12)


def test_rnnt_known_value_uniform_t2_u1():
    # two frames, one label, uniform over {label, blank}: two alignments,
    # each with probability (1/2)^3, so the loss is ln 4
    lp = np.log(np.full((2, 2, 2), 0.5))
    loss = losses.rnnt_loss_dp(lp, [0], blank=1)
    assert loss == pytest.approx(np.log(4.0), abs=1e-12)
    bf = losses.rnnt_loss_bruteforce(lp, [0], blank=1)
    assert bf == pytest.approx(np.log(4.0), abs=1e-12)


def test_rnnt_known_value_hand_summed_t2_u1_nonuniform():
    # enumerate by hand: paths are (y, b, b) and (b, y, b)
    rng = np.random.default_rng(2)
    lp = random_lattice(rng, 2, 1, 3)
    blank = 2
    y = 0
    p_path1 = lp[0, 0, y] + lp[0, 1, blank] + lp[1, 1, blank]
    p_path2 = lp[0, 0, blank] + lp[1, 0, y] + lp[1, 1, blank]
    want = -np.logaddexp(p_path1, p_path2)
    assert losses.rnnt_loss_dp(lp, [y], blank) == pytest.approx(want, abs=1e-12)


def test_rnnt_alignment_count_is_binomial():
    # with all log-probs equal to log(c), every alignment has the same
    # probability and the total is C(T+U-1 choose U) * c^(T+U)
    from math import comb, log
    for T, U in [(3, 2), (4, 1), (2, 4), (5, 0)]:
        K = 3
        c = 1.0 / K
        lp = np.full((T, U + 1, K), log(c))
        targets = [0] * 0 + [(i % 2) for i in range(U)]
        # avoid blank in targets; blank = K-1 = 2, labels alternate 0/1
        loss = losses.rnnt_loss_dp(lp, targets, blank=K - 1)
        want = -(log(comb(T + U - 1, U)) + (T + U) * log(c))
        assert loss == pytest.approx(want, abs=1e-10), (T, U)


# ---------------------------------------------------------------------------
# transducer loss: DP vs brute force


def test_rnnt_dp_matches_bruteforce_randomized():
    rng = np.random.default_rng(3)
    for trial in range(200):
        K = int(rng.integers(2, 6))
        T = int(rng.integers(1, 7))
        U = int(rng.integers(0, min(5, 12 - T) + 1))
        blank = K - 1
        targets = list(rng.integers(0, blank, size=U))
        lp = random_lattice(rng, T, U, K)
        a = losses.rnnt_loss_dp(lp, targets, blank)
        b = losses.rnnt_loss_bruteforce(lp, targets, blank)
        assert a == pytest.approx(b, rel=1e-12, abs=1e-12), trial


def test_bruteforce_guard():
    lp = np.zeros((10, 4, 4))
    with pytest.raises(losses.LossError, match="guard"):
        losses.rnnt_loss_bruteforce(lp, [0, 1, 2], blank=3)


# ---------------------------------------------------------------------------
# validation contract


def test_lattice_validation_errors():
    lp = np.log(np.full((3, 3, 4), 0.25))
    with pytest.raises(losses.LossError):
        losses.rnnt_loss_dp(lp, [0], blank=3)          # U axis mismatch
    with pytest.raises(losses.LossError):
        losses.rnnt_loss_dp(lp, [0, 3], blank=3)       # blank in targets
    with pytest.raises(losses.LossError):
        losses.rnnt_loss_dp(lp, [0, 9], blank=3)       # out of range
    with pytest.raises(losses.LossError):
        losses.rnnt_loss_dp(lp[0], [0, 1], blank=3)    # not 3-D
    with pytest.raises(losses.LossError):
        losses.rnnt_loss_dp(lp, [0, 1], blank=9)       # blank out of range


def test_eos_allowed_only_in_final_slot():
    eos, blank = 2, 3
    lp = np.log(np.full((3, 3, 4), 0.25))
    with pytest.raises(losses.LossError):
        losses.rnnt_loss_dp(lp, [0, eos], blank, eos=eos)
    loss = losses.rnnt_loss_dp(lp, [0, eos], blank, eos=eos, allow_final_eos=True)
    assert np.isfinite(loss)
    lp2 = np.log(np.full((3, 4, 4), 0.25))
    with pytest.raises(losses.LossError):
        losses.rnnt_loss_dp(lp2, [eos, 0, 1], blank, eos=eos, allow_final_eos=True)


def test_log_floor_applied():
    # a -inf entry is clamped to the floor rather than poisoning the DP
    lp = np.log(np.full((2, 2, 2), 0.5))
    lp[0, 0, 0] = -np.inf
    loss = losses.rnnt_loss_dp(lp, [0], blank=1)
    assert np.isfinite(loss)
    lp_floor = lp.copy()
    lp_floor[0, 0, 0] = losses.LOG_FLOOR
    assert loss == pytest.approx(losses.rnnt_loss_dp(lp_floor, [0], blank=1))


# ---------------------------------------------------------------------------
# analytic gradient


def fd_lattice_grad(lp, targets, blank, eps=1e-6):
    g = np.zeros_like(lp)
    flat = lp.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = losses.rnnt_loss_dp(lp, targets, blank)
        flat[i] = orig - eps
        lo = losses.rnnt_loss_dp(lp, targets, blank)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * eps)
    return g


def test_rnnt_grad_matches_finite_differences():
    rng = np.random.default_rng(4)
    for trial in range(20):
        K = int(rng.integers(2, 5))
        T = int(rng.integers(1, 5))
        U = int(rng.integers(0, 4))
        blank = K - 1
        targets = list(rng.integers(0, blank, size=U))
        lp = random_lattice(rng, T, U, K)
        analytic = losses.rnnt_grad(lp, targets, blank)
        numeric = fd_lattice_grad(lp.copy(), targets, blank)
        np.testing.assert_allclose(analytic, numeric, atol=1e-6,
                                   err_msg=f"trial {trial}")


def test_rnnt_grad_total_mass():
    # summing the gradient over symbols at each lattice node gives minus the
    # node occupancy; over the whole grid it sums to -(T + U) total emissions
    rng = np.random.default_rng(5)
    T, U, K = 4, 2, 4
    lp = random_lattice(rng, T, U, K)
    g = losses.rnnt_grad(lp, [0, 1], blank=K - 1)
    assert g.sum() == pytest.approx(-(T + U), abs=1e-9)


def test_rnnt_loss_var_backward_routes_grad():
    rng = np.random.default_rng(6)
    lp = random_lattice(rng, 3, 2, 4)
    v = nk.Var(lp)
    loss = losses.rnnt_loss_var(v, [0, 1], blank=3)
    loss.backward(np.asarray(2.0))
    want = 2.0 * losses.rnnt_grad(lp, [0, 1], blank=3)
    np.testing.assert_allclose(v.grad, want, atol=1e-12)


# ---------------------------------------------------------------------------
# multitask combination


def test_multitask_loss_weights():
    a = nk.Var(np.asarray(2.0))
    b = nk.Var(np.asarray(10.0))
    out = losses.multitask_loss(a, b, 0.75)
    assert float(out.value) == pytest.approx(0.75 * 2 + 0.25 * 10)
    out.backward(np.asarray(1.0))
    assert float(a.grad) == pytest.approx(0.75)
    assert float(b.grad) == pytest.approx(0.25)


def test_multitask_loss_extremes_and_validation():
    a = nk.Var(np.asarray(3.0))
    b = nk.Var(np.asarray(5.0))
    assert float(losses.multitask_loss(a, b, 1.0).value) == pytest.approx(3.0)
    assert float(losses.multitask_loss(a, b, 0.0).value) == pytest.approx(5.0)
    with pytest.raises(losses.LossError):
        losses.multitask_loss(a, b, 1.5)
    with pytest.raises(losses.LossError):
        losses.multitask_loss(a, b, -0.1)
