"""The numerical core: tape-based autodiff and the transducer loss.

Shows (1) a finite-difference gradient check on a small LSTM stack, and
(2) the lattice dynamic program for the transducer loss agreeing with an
exhaustive sum over every blank/label alignment.

Run:  python3 demos/02_losses_and_gradients.py
"""

import numpy as np

from epswitch import losses as ls
from epswitch import netkit as nk

# --- gradient check ---------------------------------------------------------

rng = np.random.default_rng(0)
D, H, T = 3, 4, 5
store = nk.ParamStore()
store.add("x", rng.normal(size=(T, D)))
store.add("W", rng.normal(size=(4 * H, D + H)) * 0.4)
store.add("b", rng.normal(size=(4 * H,)) * 0.4)


def objective(s):
    h = nk.lstm_layer(s.leaf("x"), s.leaf("W"), s.leaf("b"))
    sq = nk.mul(h, h)
    return nk.Var(np.sum(sq.value), (sq,),
                  lambda g: (g * np.ones_like(sq.value),))


rep = nk.grad_check(objective, store)
print(f"LSTM grad check: passed={rep.passed} "
      f"max rel err={rep.max_rel_err:.2e} (worst: {rep.worst_param})")

# --- transducer loss --------------------------------------------------------

T, U, V = 3, 2, 4          # frames, target length, real vocabulary
blank = V                  # blank is the last symbol
lp = nk.log_softmax(rng.normal(size=(T, U + 1, V + 1)))
targets = [1, 3]

dp = ls.rnnt_loss_dp(lp, targets, blank=blank)
brute = ls.rnnt_loss_bruteforce(lp, targets, blank=blank)
print(f"\ntransducer loss: dp={dp:.12f} brute-force={brute:.12f} "
      f"diff={abs(dp - brute):.2e}")

# the gradient w.r.t. the lattice log-probs sums to -(T + U): one emission
# per grid step, T blanks plus U labels
g = ls.rnnt_grad(lp, targets, blank=blank)
print(f"gradient mass: {g.sum():.6f} (expected {-(T + U)})")
