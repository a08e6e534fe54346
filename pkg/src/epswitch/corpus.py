"""Utterance data model, frame labeling, synthetic corpus generation, and I/O.

Utterances carry timed feature frames plus word segments with token targets.
Frame labels (speech / initial / intermediate / final silence) are derived
from segment geometry. The synthetic generator produces class-conditional
Gaussian features so that both the frame classifier and the toy transducer
have something real to learn.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np


class CorpusError(Exception):
    pass


class ValidationError(CorpusError):
    pass


class FormatError(CorpusError):
    pass


class ConfigError(CorpusError):
    pass


class SpeechClass(IntEnum):
    """Four-way frame classification; values are the softmax indices."""

    SPEECH = 0
    INITIAL_SILENCE = 1
    INTERMEDIATE_SILENCE = 2
    FINAL_SILENCE = 3


@dataclass
class FeatureFrame:
    t_index: int
    t_ms: int
    features: np.ndarray
    domain_id: int | None = None


@dataclass
class WordSegment:
    start_ms: int
    end_ms: int
    token_ids: list


@dataclass
class UtteranceRecord:
    id: str
    frames: list
    segments: list
    target_tokens: list
    frame_period_ms: int

    @property
    def num_frames(self):
        return len(self.frames)

    @property
    def duration_ms(self):
        return self.num_frames * self.frame_period_ms

    def feature_matrix(self):
        return np.stack([f.features for f in self.frames])

    def validate(self):
        if self.frame_period_ms <= 0:
            raise ValidationError(f"{self.id}: non-positive frame_period_ms")
        for f in self.frames:
            if f.t_ms != f.t_index * self.frame_period_ms:
                raise ValidationError(
                    f"{self.id}: frame {f.t_index} t_ms {f.t_ms} != "
                    f"{f.t_index * self.frame_period_ms}")
        dims = {f.features.shape for f in self.frames}
        if len(dims) > 1:
            raise ValidationError(f"{self.id}: inconsistent feature dims {dims}")
        _check_segments(self.segments, self.id)
        for seg in self.segments:
            if seg.start_ms < 0 or seg.end_ms > self.duration_ms:
                raise ValidationError(
                    f"{self.id}: segment [{seg.start_ms}, {seg.end_ms}) outside "
                    f"[0, {self.duration_ms})")
        flat = [t for seg in self.segments for t in seg.token_ids]
        if flat != list(self.target_tokens):
            raise ValidationError(
                f"{self.id}: target_tokens do not match segment token_ids")


@dataclass
class FrameLabelSeq:
    labels: list

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return self.labels[i]

    def as_ids(self):
        return np.array([int(c) for c in self.labels], dtype=np.int64)

    def speech_fraction(self):
        if not self.labels:
            return 0.0
        return sum(1 for c in self.labels if c == SpeechClass.SPEECH) / len(self.labels)


def _check_segments(segments, utt_id):
    for k, seg in enumerate(segments):
        if seg.start_ms >= seg.end_ms:
            raise ValidationError(
                f"{utt_id}: segment {k} has start {seg.start_ms} >= end {seg.end_ms}")
    for k in range(1, len(segments)):
        prev, cur = segments[k - 1], segments[k]
        if cur.start_ms < prev.end_ms:
            raise ValidationError(
                f"{utt_id}: segments {k - 1} and {k} overlap or are unsorted "
                f"([{prev.start_ms},{prev.end_ms}) vs [{cur.start_ms},{cur.end_ms}))")


def label_frames(utt: UtteranceRecord) -> FrameLabelSeq:
    """Derive per-frame speech classes from segment geometry.

    A frame is speech iff it has positive-duration overlap with any segment.
    Silence runs before / between / after speech are initial / intermediate /
    final; an all-silence utterance is entirely initial silence.
    """
    _check_segments(utt.segments, utt.id)
    delta = utt.frame_period_ms
    n = utt.num_frames
    speech = np.zeros(n, dtype=bool)
    for seg in utt.segments:
        # frame f covers [f*delta, (f+1)*delta)
        lo = seg.start_ms // delta
        hi = (seg.end_ms - 1) // delta
        speech[max(lo, 0):min(hi, n - 1) + 1] = True

    labels = []
    if not speech.any():
        labels = [SpeechClass.INITIAL_SILENCE] * n
        return FrameLabelSeq(labels)
    first = int(np.argmax(speech))
    last = n - 1 - int(np.argmax(speech[::-1]))
    for f in range(n):
        if speech[f]:
            labels.append(SpeechClass.SPEECH)
        elif f < first:
            labels.append(SpeechClass.INITIAL_SILENCE)
        elif f > last:
            labels.append(SpeechClass.FINAL_SILENCE)
        else:
            labels.append(SpeechClass.INTERMEDIATE_SILENCE)
    return FrameLabelSeq(labels)


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass
class SynthConfig:
    """Knobs for the synthetic corpus generator."""

    n_utterances: int = 100
    d_in: int = 8
    vocab_size: int = 8
    frame_period_ms: int = 30
    min_words: int = 1
    max_words: int = 3
    min_tokens_per_word: int = 1
    max_tokens_per_word: int = 2
    min_frames_per_token: int = 3
    max_frames_per_token: int = 5
    silence_fraction: float = 0.40
    min_initial_silence: int = 1
    min_gap_frames: int = 1
    min_final_silence: int = 6
    noise_scale: float = 0.30
    class_mean_scale: float = 1.5
    acoustic_seed: int = 0
    domain_id: int | None = None

    def validate(self):
        if self.n_utterances <= 0:
            raise ConfigError("n_utterances must be positive")
        if self.d_in <= 0:
            raise ConfigError("d_in must be positive")
        if self.vocab_size <= 0:
            raise ConfigError("vocab_size must be positive")
        if self.frame_period_ms <= 0:
            raise ConfigError("frame_period_ms must be positive")
        if not 0.0 <= self.silence_fraction < 1.0:
            raise ConfigError("silence_fraction must be in [0, 1)")
        if self.min_words <= 0 or self.max_words < self.min_words:
            raise ConfigError("bad word-count range")
        if self.min_tokens_per_word <= 0 or self.max_tokens_per_word < self.min_tokens_per_word:
            raise ConfigError("bad tokens-per-word range")
        if self.min_frames_per_token <= 0 or self.max_frames_per_token < self.min_frames_per_token:
            raise ConfigError("bad frames-per-token range")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be non-negative")


def _class_means(cfg: SynthConfig):
    # tied to acoustic_seed, not the generation seed, so corpora drawn with
    # different seeds (train vs held-out) share one feature distribution
    rng = np.random.default_rng([cfg.acoustic_seed, 53])
    token_means = rng.normal(0.0, cfg.class_mean_scale, (cfg.vocab_size, cfg.d_in))
    silence_means = rng.normal(0.0, cfg.class_mean_scale, (3, cfg.d_in))
    return token_means, silence_means


def generate_synthetic_corpus(cfg: SynthConfig, seed: int):
    """Generate ``cfg.n_utterances`` records, deterministic in (cfg, seed).

    Features are class-conditional Gaussians: one mean vector per vocabulary
    token and one per silence class, with a one-frame crossfade at region
    boundaries. Token targets are emitted only inside speech segments.
    """
    cfg.validate()
    rng = np.random.default_rng([int(seed), 17])
    token_means, silence_means = _class_means(cfg)
    sil_mean_by_class = {
        SpeechClass.INITIAL_SILENCE: silence_means[0],
        SpeechClass.INTERMEDIATE_SILENCE: silence_means[1],
        SpeechClass.FINAL_SILENCE: silence_means[2],
    }

    records = []
    for k in range(cfg.n_utterances):
        n_words = int(rng.integers(cfg.min_words, cfg.max_words + 1))
        words = []
        prev_tok = None
        for _ in range(n_words):
            n_tok = int(rng.integers(cfg.min_tokens_per_word, cfg.max_tokens_per_word + 1))
            toks = []
            for _ in range(n_tok):
                # avoid immediate repeats: identical class means across a
                # token boundary would make the segmentation unidentifiable
                if prev_tok is None or cfg.vocab_size == 1:
                    tok = int(rng.integers(0, cfg.vocab_size))
                else:
                    tok = int(rng.integers(0, cfg.vocab_size - 1))
                    if tok >= prev_tok:
                        tok += 1
                toks.append(tok)
                prev_tok = tok
            frames = [int(rng.integers(cfg.min_frames_per_token,
                                       cfg.max_frames_per_token + 1))
                      for _ in range(n_tok)]
            words.append((toks, frames))
        speech_frames = sum(sum(fr) for _, fr in words)

        sf = cfg.silence_fraction
        target_sil = int(round(speech_frames * sf / (1.0 - sf)))
        n_gaps = n_words - 1
        mins = [cfg.min_initial_silence] + [cfg.min_gap_frames] * n_gaps + [cfg.min_final_silence]
        leftover = target_sil - sum(mins)
        alloc = np.array(mins, dtype=np.int64)
        if leftover > 0:
            alloc += rng.multinomial(leftover, np.full(len(mins), 1.0 / len(mins)))

        # frame-level plan: (class, token or None) per frame
        plan = []
        plan += [(SpeechClass.INITIAL_SILENCE, None)] * int(alloc[0])
        segments = []
        delta = cfg.frame_period_ms
        for w, (toks, frs) in enumerate(words):
            start_f = len(plan)
            for tok, nfr in zip(toks, frs):
                plan += [(SpeechClass.SPEECH, tok)] * nfr
            end_f = len(plan)
            segments.append(WordSegment(start_ms=start_f * delta,
                                        end_ms=end_f * delta,
                                        token_ids=list(toks)))
            if w < n_gaps:
                plan += [(SpeechClass.INTERMEDIATE_SILENCE, None)] * int(alloc[1 + w])
        plan += [(SpeechClass.FINAL_SILENCE, None)] * int(alloc[-1])

        means = np.empty((len(plan), cfg.d_in))
        for f, (cls, tok) in enumerate(plan):
            means[f] = token_means[tok] if cls == SpeechClass.SPEECH else sil_mean_by_class[cls]
        # one-frame crossfade at region boundaries
        raw = means.copy()
        for f in range(1, len(plan)):
            if plan[f][:2] != plan[f - 1][:2]:
                means[f] = 0.5 * (raw[f] + raw[f - 1])

        feats = means + cfg.noise_scale * rng.standard_normal(means.shape)
        frames = [FeatureFrame(t_index=f, t_ms=f * delta, features=feats[f],
                               domain_id=cfg.domain_id)
                  for f in range(len(plan))]
        target_tokens = [t for seg in segments for t in seg.token_ids]
        rec = UtteranceRecord(id=f"utt{k:05d}", frames=frames, segments=segments,
                              target_tokens=target_tokens,
                              frame_period_ms=cfg.frame_period_ms)
        rec.validate()
        records.append(rec)
    return records


# ---------------------------------------------------------------------------
# serialization (JSON lines with a header line)

_CORPUS_VERSION = 1


@dataclass
class CorpusMeta:
    d_in: int
    vocab_size: int
    frame_period_ms: int


def write_corpus(records, path, meta: CorpusMeta | None = None):
    """Write a JSONL corpus file: header line, then one record per line."""
    if meta is None:
        if not records:
            raise CorpusError("cannot infer header from an empty corpus")
        first = records[0]
        vocab = max((t for r in records for t in r.target_tokens), default=-1) + 1
        meta = CorpusMeta(d_in=first.frames[0].features.shape[0],
                          vocab_size=vocab,
                          frame_period_ms=first.frame_period_ms)
    with open(path, "w") as fh:
        header = {"version": _CORPUS_VERSION, "d_in": meta.d_in,
                  "vocab_size": meta.vocab_size,
                  "frame_period_ms": meta.frame_period_ms}
        fh.write(json.dumps(header) + "\n")
        for rec in records:
            line = {
                "id": rec.id,
                "frames": [f.features.tolist() for f in rec.frames],
                "segments": [{"start_ms": s.start_ms, "end_ms": s.end_ms,
                              "token_ids": s.token_ids} for s in rec.segments],
                "target_tokens": rec.target_tokens,
            }
            dom = {f.domain_id for f in rec.frames}
            if dom != {None}:
                line["domain_id"] = rec.frames[0].domain_id
            fh.write(json.dumps(line) + "\n")


def read_corpus(path):
    """Read a JSONL corpus; returns (records, meta)."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: line 1: missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line 1: bad header: {exc}") from exc
    for key in ("version", "d_in", "vocab_size", "frame_period_ms"):
        if key not in header:
            raise FormatError(f"{path}: line 1: header missing {key!r}")
    if header["version"] != _CORPUS_VERSION:
        raise FormatError(f"{path}: line 1: unsupported version {header['version']}")
    meta = CorpusMeta(d_in=header["d_in"], vocab_size=header["vocab_size"],
                      frame_period_ms=header["frame_period_ms"])

    records = []
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: line {lineno}: {exc}") from exc
        try:
            feats = obj["frames"]
            domain_id = obj.get("domain_id")
            frames = []
            for f, vec in enumerate(feats):
                arr = np.asarray(vec, dtype=np.float64)
                if arr.shape != (meta.d_in,):
                    raise FormatError(
                        f"{path}: line {lineno}: frame {f} has dim "
                        f"{arr.shape} != header d_in {meta.d_in}")
                frames.append(FeatureFrame(t_index=f,
                                           t_ms=f * meta.frame_period_ms,
                                           features=arr, domain_id=domain_id))
            segments = [WordSegment(start_ms=s["start_ms"], end_ms=s["end_ms"],
                                    token_ids=list(s["token_ids"]))
                        for s in obj["segments"]]
            rec = UtteranceRecord(id=obj["id"], frames=frames, segments=segments,
                                  target_tokens=list(obj["target_tokens"]),
                                  frame_period_ms=meta.frame_period_ms)
            rec.validate()
        except FormatError:
            raise
        except (KeyError, TypeError, ValidationError) as exc:
            raise FormatError(f"{path}: line {lineno}: {exc}") from exc
        records.append(rec)
    return records, meta
