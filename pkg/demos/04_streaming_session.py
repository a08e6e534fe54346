"""Stream one utterance through a trained joint model, frame by frame.

The session runs a two-state machine. Before speech onset only the
endpointer sees frames; once the speech posterior crosses the gate, frames
also flow into the streaming recognizer. An end-of-query endpoint is
declared by whichever signal comes first - the acoustic final-silence
posterior or the decoder's end-of-sentence cost - plus a fixed wait.

Run:  python3 demos/04_streaming_session.py     (about a minute)
"""

from epswitch import corpus as cp
from epswitch import models as md
from epswitch import runtime as rt
from epswitch import trainer as tr

synth = cp.SynthConfig(n_utterances=24, max_words=2)
records = cp.generate_synthetic_corpus(synth, seed=0)
res = tr.train(tr.TrainConfig(arm="E3", steps=300, batch_size=8, seed=0),
               records)
system = md.InferenceSystem.joint(res.stores["joint"], res.model_config)

rec = records[0]
th = rt.Thresholds(theta_vad=0.5, theta_eoq=0.8, theta_eos=0.4, wait_ms=120)
trace = rt.run_session(rec, rt.Mode.SHORT_QUERY, th, system)

print(f"utterance {rec.id}  reference tokens {rec.target_tokens}")
print(f"{'t_ms':>5} {'state':>8} {'filt':>4} {'p_speech':>8} {'p_final':>7} "
      f"{'eos_cost':>8} {'eoq_ac':>6} {'eoq_dec':>7} {'endpoint':>8}")
for row in trace.rows:
    cost = "-" if row.eos_cost is None else f"{row.eos_cost:.3f}"
    print(f"{row.t_ms:5d} {row.fsm_state.name:>8} {str(row.filtered):>4} "
          f"{row.posterior[0]:8.3f} {row.posterior[3]:7.3f} {cost:>8} "
          f"{str(row.fired_acoustic):>6} {str(row.fired_decoder):>7} "
          f"{str(row.endpoint):>8}")

print(f"\nhypothesis: {trace.hypothesis}")
if trace.event:
    print(f"endpoint: {trace.event.source.name} signal at "
          f"{trace.event.fire_ms}ms, endpoint at {trace.event.endpoint_ms}ms")
