"""Training losses: frame cross-entropy, exact transducer loss, multitask mix.

The transducer loss is computed three ways: a log-space forward DP, an
alpha/beta analytic gradient, and an exponential path enumeration kept as an
independent oracle for small lattices.
"""

from __future__ import annotations

import numpy as np

from . import netkit as nk

LOG_FLOOR = -60.0
_BRUTEFORCE_MAX = 12


class LossError(Exception):
    pass


# ---------------------------------------------------------------------------
# frame-level cross-entropy


def ce_loss(logits: nk.Var, labels) -> nk.Var:
    """Mean over frames of -log p(label_t) from (T, C) logits.

    Gradient w.r.t. the logits is (softmax - onehot) / T.
    """
    labels = np.asarray(labels, dtype=np.int64)
    lv = logits.value
    if lv.ndim != 2 or labels.shape != (lv.shape[0],):
        raise LossError(
            f"ce_loss: logits {lv.shape} vs labels {labels.shape}")
    T, C = lv.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= C:
        raise LossError("ce_loss: label index out of range")
    logp = nk.log_softmax(lv)
    loss = -float(logp[np.arange(T), labels].mean())
    p = np.exp(logp)

    def bw(g):
        d = p.copy()
        d[np.arange(T), labels] -= 1.0
        return (float(g) * d / T,)

    return nk.Var(loss, (logits,), bw)


# ---------------------------------------------------------------------------
# transducer loss


def _validate_lattice(log_probs, targets, blank, allow_final_eos, eos):
    lp = np.asarray(log_probs, dtype=np.float64)
    targets = list(int(t) for t in targets)
    if lp.ndim != 3:
        raise LossError(f"lattice must be (T, U+1, K), got {lp.shape}")
    T, U1, K = lp.shape
    U = len(targets)
    if T < 1:
        raise LossError("lattice needs T >= 1")
    if U1 != U + 1:
        raise LossError(f"lattice U axis {U1} != len(targets)+1 = {U + 1}")
    if not 0 <= blank < K:
        raise LossError(f"blank id {blank} out of range for K={K}")
    for i, t in enumerate(targets):
        if not 0 <= t < K:
            raise LossError(f"target[{i}]={t} out of range for K={K}")
        if t == blank:
            raise LossError(f"target[{i}] is the blank symbol")
        if eos is not None and t == eos:
            if not (allow_final_eos and i == U - 1):
                raise LossError(f"target[{i}] is the reserved </s> symbol")
    return np.maximum(lp, LOG_FLOOR), targets


def rnnt_forward_alphas(log_probs, targets, blank):
    """Forward DP over the (T, U+1) grid; returns (alphas, log-likelihood)."""
    lp = log_probs
    T, U1, _ = lp.shape
    U = U1 - 1
    alpha = np.full((T, U1), -np.inf)
    alpha[0, 0] = 0.0
    for t in range(T):
        for u in range(U1):
            if t == 0 and u == 0:
                continue
            terms = []
            if t > 0:
                terms.append(alpha[t - 1, u] + lp[t - 1, u, blank])
            if u > 0:
                terms.append(alpha[t, u - 1] + lp[t, u - 1, targets[u - 1]])
            alpha[t, u] = np.logaddexp.reduce(terms) if terms else -np.inf
    log_lik = alpha[T - 1, U] + lp[T - 1, U, blank]
    return alpha, float(log_lik)


def rnnt_loss_dp(log_probs, targets, blank, *, eos=None, allow_final_eos=False):
    """Exact transducer negative log-likelihood via the forward recursion.

    ``log_probs[t, u, k]`` is the output log-distribution at encoder step t
    having emitted u target symbols; every valid alignment interleaves T
    blanks with the U target symbols and ends in a blank.
    """
    lp, tgt = _validate_lattice(log_probs, targets, blank, allow_final_eos, eos)
    _, log_lik = rnnt_forward_alphas(lp, tgt, blank)
    return -log_lik


def rnnt_loss_bruteforce(log_probs, targets, blank, *, eos=None,
                         allow_final_eos=False):
    """Oracle: enumerate every alignment and sum path probabilities.

    Guarded to T + U <= 12; use the DP for anything larger.
    """
    lp, tgt = _validate_lattice(log_probs, targets, blank, allow_final_eos, eos)
    T, _, _ = lp.shape
    U = len(tgt)
    if T + U > _BRUTEFORCE_MAX:
        raise LossError(
            f"bruteforce guard: T+U = {T + U} > {_BRUTEFORCE_MAX}; use rnnt_loss_dp")

    total = -np.inf

    def walk(t, u, acc):
        nonlocal total
        if t == T - 1 and u == U:
            total = np.logaddexp(total, acc + lp[t, u, blank])
            # the final blank ends the path; no further moves from here
        if t < T - 1:
            walk(t + 1, u, acc + lp[t, u, blank])
        if u < U:
            walk(t, u + 1, acc + lp[t, u, tgt[u]])

    walk(0, 0, 0.0)
    if not np.isfinite(total):
        raise LossError("no alignment has finite probability")
    return -float(total)


def rnnt_backward_betas(log_probs, targets, blank):
    """Backward DP; beta[t, u] = log P of completing from node (t, u)."""
    lp = log_probs
    T, U1, _ = lp.shape
    U = U1 - 1
    beta = np.full((T, U1), -np.inf)
    beta[T - 1, U] = lp[T - 1, U, blank]
    for t in range(T - 1, -1, -1):
        for u in range(U, -1, -1):
            if t == T - 1 and u == U:
                continue
            terms = []
            if t < T - 1:
                terms.append(lp[t, u, blank] + beta[t + 1, u])
            if u < U:
                terms.append(lp[t, u, targets[u]] + beta[t, u + 1])
            beta[t, u] = np.logaddexp.reduce(terms) if terms else -np.inf
    return beta


def rnnt_grad(log_probs, targets, blank, *, eos=None, allow_final_eos=False):
    """Gradient of the transducer loss w.r.t. ``log_probs`` (alpha/beta)."""
    lp, tgt = _validate_lattice(log_probs, targets, blank, allow_final_eos, eos)
    T, U1, K = lp.shape
    U = U1 - 1
    alpha, log_lik = rnnt_forward_alphas(lp, tgt, blank)
    beta = rnnt_backward_betas(lp, tgt, blank)

    grad = np.zeros((T, U1, K))
    for t in range(T):
        for u in range(U1):
            if not np.isfinite(alpha[t, u]):
                continue
            # blank transition (or the terminating blank at (T-1, U))
            if t < T - 1:
                occ = alpha[t, u] + lp[t, u, blank] + beta[t + 1, u] - log_lik
                grad[t, u, blank] -= np.exp(occ)
            elif u == U:
                grad[t, u, blank] -= np.exp(alpha[t, u] + lp[t, u, blank] - log_lik)
            # label emission
            if u < U:
                occ = alpha[t, u] + lp[t, u, tgt[u]] + beta[t, u + 1] - log_lik
                grad[t, u, tgt[u]] -= np.exp(occ)
    return grad


def rnnt_loss_var(log_probs: nk.Var, targets, blank, *, eos=None,
                  allow_final_eos=False) -> nk.Var:
    """Tape-connected transducer loss; backward routes through rnnt_grad."""
    loss = rnnt_loss_dp(log_probs.value, targets, blank, eos=eos,
                        allow_final_eos=allow_final_eos)
    grad = None

    def bw(g):
        nonlocal grad
        if grad is None:
            grad = rnnt_grad(log_probs.value, targets, blank, eos=eos,
                             allow_final_eos=allow_final_eos)
        return (float(g) * grad,)

    return nk.Var(loss, (log_probs,), bw)


# ---------------------------------------------------------------------------
# multitask combination


def multitask_loss(l_asr: nk.Var, l_ep: nk.Var, lam: float) -> nk.Var:
    """lam * L_asr + (1 - lam) * L_ep."""
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise LossError(f"multitask weight {lam} outside [0, 1]")
    return nk.add(nk.scale(l_asr, lam), nk.scale(l_ep, 1.0 - lam))
