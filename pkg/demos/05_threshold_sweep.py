"""Sweep endpoint thresholds and trace the accuracy/latency frontier.

Each grid point fixes (theta_EOQ, theta_eos, wait) and measures word error
rate plus endpoint latency percentiles on held-out utterances. The selected
operating point is the lowest-latency one whose WER fits the budget; the
trade-off curve is the Pareto lower envelope over all points.

Run:  python3 demos/05_threshold_sweep.py     (a few minutes)
"""

from epswitch import corpus as cp
from epswitch import evalkit as ek
from epswitch import models as md
from epswitch import trainer as tr

train_recs = cp.generate_synthetic_corpus(cp.SynthConfig(n_utterances=48),
                                          seed=0)
heldout = cp.generate_synthetic_corpus(cp.SynthConfig(n_utterances=24),
                                       seed=999)
res = tr.train(tr.TrainConfig(arm="E3", steps=1200, batch_size=8, seed=0),
               train_recs)
system = md.InferenceSystem.joint(res.stores["joint"], res.model_config)

grid = dict(theta_eoq_grid=[0.7, 0.9], theta_eos_grid=[0.3, 0.6],
            wait_ms_grid=[0, 60, 120, 240])
budget = 30.0
try:
    result = ek.sweep(system, heldout, theta_vad=0.5, wer_budget=budget, **grid)
except ek.BudgetError as err:
    # this small demo model may not reach the budget; relax it to the best
    # WER the grid achieved and rerun the selection
    budget = err.best_point.wer.wer
    print(f"budget 30.0 infeasible; relaxing to best grid WER {budget:.2f}\n")
    result = ek.sweep(system, heldout, theta_vad=0.5, wer_budget=budget, **grid)

print(f"{'eoq':>4} {'eos':>4} {'wait':>5} {'wer':>6} {'ep50':>6} {'ep90':>6}")
for p in result.points:
    t = p.thresholds
    print(f"{t.theta_eoq:4.1f} {t.theta_eos:4.1f} {t.wait_ms:5d} "
          f"{p.wer.wer:6.2f} {p.latency.ep50:6.0f} {p.latency.ep90:6.0f}")

sel = result.selected
print(f"\nselected under WER budget {budget:.1f}: eoq={sel.thresholds.theta_eoq} "
      f"eos={sel.thresholds.theta_eos} wait={sel.thresholds.wait_ms}ms "
      f"-> wer={sel.wer.wer:.2f} ep50={sel.latency.ep50:.0f}ms")

print("\ntrade-off curve (wer, best ep50 at that wer or below):")
for wer_value, ep50 in ek.tradeoff_curve(result.points):
    print(f"  {wer_value:6.2f}  {ep50:6.0f}ms")
