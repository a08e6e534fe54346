"""Train the experiment arms on a miniature corpus.

Four arms share one architecture:
  B1 - two separate models (ASR-only and endpointer-only)
  E1 - joint model, endpointer fed raw audio frames
  E2 - joint model, endpointer fed the shared ASR latent
  E3 - joint model, the endpointer input is switched at random per utterance
       between audio frames and the shared latent during training

Run:  python3 demos/03_training_arms.py     (about a minute)
"""

from epswitch import corpus as cp
from epswitch import models as md
from epswitch import trainer as tr

synth = cp.SynthConfig(n_utterances=24, max_words=2)
records = cp.generate_synthetic_corpus(synth, seed=0)
model = md.ModelConfig(d_in=8, d_enc=8, ep_hidden=8, vocab_size=8,
                       embed_dim=4, joint_dim=8, shared_blocks=1,
                       asr_blocks=1, ep_lstm_layers=1)

for arm in ("B1", "E1", "E2", "E3"):
    cfg = tr.TrainConfig(arm=arm, steps=60, batch_size=4, seed=0)
    res = tr.train(cfg, records, model)
    first, last = res.report.loss_multi[0], res.report.loss_multi[-1]
    sw = res.report.switch_counts
    print(f"{arm}: loss {first:7.3f} -> {last:7.3f}   "
          f"switch draws audio={sw['audio']:3d} latent={sw['latent']:3d}   "
          f"stores={sorted(res.stores)}")

# the switch arm with the switch pinned to the latent side is E2 exactly
a = tr.train(tr.TrainConfig(arm="E2", steps=20, batch_size=4, seed=0),
             records, model)
b = tr.train(tr.TrainConfig(arm="E3", switch_prob=0.0, steps=20,
                            batch_size=4, seed=0), records, model)
print("\nE2 loss curve == E3(switch pinned) loss curve:",
      a.report.loss_multi == b.report.loss_multi)
