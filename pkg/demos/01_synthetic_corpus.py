"""Generate a tiny synthetic corpus and inspect one utterance.

Each utterance is a sequence of feature frames with word segments laid out
between silence blocks. Every frame carries one of four ground-truth classes
(speech, initial / intermediate / final silence) derived from the segments.

Run:  python3 demos/01_synthetic_corpus.py
"""

import collections

from epswitch import corpus as cp

cfg = cp.SynthConfig(n_utterances=4, max_words=2, silence_fraction=0.35)
records = cp.generate_synthetic_corpus(cfg, seed=0)

rec = records[0]
print(f"utterance {rec.id}: {len(rec.frames)} frames @ {rec.frame_period_ms}ms,"
      f" tokens={rec.target_tokens}")
for seg in rec.segments:
    print(f"  word [{seg.start_ms}ms, {seg.end_ms}ms) tokens={seg.token_ids}")

labels = cp.label_frames(rec)
glyph = {cp.SpeechClass.SPEECH: "#",
         cp.SpeechClass.INITIAL_SILENCE: ".",
         cp.SpeechClass.INTERMEDIATE_SILENCE: "-",
         cp.SpeechClass.FINAL_SILENCE: "_"}
print("frame classes:", "".join(glyph[c] for c in labels.labels))
print(f"speech fraction: {labels.speech_fraction():.3f}")

counts = collections.Counter()
for r in records:
    counts.update(cp.label_frames(r).labels)
total = sum(counts.values())
print("\ncorpus class mix:")
for cls, n in sorted(counts.items(), key=lambda kv: int(kv[0])):
    print(f"  {cls.name:21s} {n:4d} ({n / total:5.1%})")

path = "/tmp/epswitch_demo_corpus.jsonl"
cp.write_corpus(records, path)
again, meta = cp.read_corpus(path)
print(f"\nround-trip through {path}: {len(again)} utterances, "
      f"feature dim {meta.d_in}")
