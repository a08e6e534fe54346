"""Streaming inference: frame-filtering state machines and EOQ fusion.

Two session modes. Short query: EP-only filtering until speech onset, then
joint ASR+EP until an endpoint is declared by the acoustic or decoder signal
(whichever fires first) plus a mandatory wait. Continuous: the session moves
back to EP-only filtering whenever the speech posterior drops.

The onset frame itself is forwarded to the ASR (no lookback buffer), so a
session with the VAD threshold at zero filters nothing.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .corpus import SpeechClass
from .models import SwitchSource


class SessionError(Exception):
    pass


class Mode(Enum):
    SHORT_QUERY = "short"
    CONTINUOUS = "continuous"


class FsmState(Enum):
    EP_ONLY = "ep_only"
    ASR_EP = "asr_ep"
    END = "end"


class EoqSource(Enum):
    ACOUSTIC = "acoustic"
    DECODER = "decoder"


@dataclass(frozen=True)
class Thresholds:
    theta_vad: float = 0.5
    theta_eoq: float = 0.7
    theta_eos: float = 0.7
    wait_ms: int = 60

    def __post_init__(self):
        if not 0.0 <= self.theta_vad <= 1.0:
            raise SessionError(f"theta_vad {self.theta_vad} outside [0, 1]")
        if not 0.0 <= self.theta_eoq <= 1.0:
            raise SessionError(f"theta_eoq {self.theta_eoq} outside [0, 1]")
        if self.theta_eos < 0:
            raise SessionError(f"theta_eos {self.theta_eos} must be >= 0")
        if self.wait_ms < 0:
            raise SessionError(f"wait_ms {self.wait_ms} must be >= 0")


@dataclass(frozen=True)
class EoqEvent:
    source: EoqSource
    fire_ms: int
    endpoint_ms: int


@dataclass
class TraceRow:
    t_ms: int
    fsm_state: FsmState
    source: SwitchSource
    posterior: np.ndarray      # 4-vector, SpeechClass order
    eos_cost: float | None
    filtered: bool
    fired_acoustic: bool
    fired_decoder: bool
    endpoint: bool


@dataclass
class SessionTrace:
    utt_id: str
    mode: Mode
    rows: list
    hypothesis: list
    event: EoqEvent | None


def declare_endpoint(posterior, decoder_cost, th: Thresholds, now_ms,
                     pending: EoqEvent | None):
    """EOQ fusion: first signal starts the mandatory wait, later ones don't.

    Returns (pending, endpoint_reached, fired_acoustic, fired_decoder).
    Threshold comparisons are strict.
    """
    fired_a = float(posterior[SpeechClass.FINAL_SILENCE]) > th.theta_eoq
    fired_d = decoder_cost is not None and decoder_cost < th.theta_eos
    if pending is None and (fired_a or fired_d):
        source = EoqSource.ACOUSTIC if fired_a else EoqSource.DECODER
        pending = EoqEvent(source=source, fire_ms=now_ms,
                           endpoint_ms=now_ms + th.wait_ms)
    reached = pending is not None and now_ms >= pending.endpoint_ms
    return pending, reached, fired_a, fired_d


class Session:
    """One streaming session over a SessionModels bundle."""

    def __init__(self, session_models, mode: Mode, th: Thresholds):
        self.m = session_models
        self.mode = mode
        self.th = th
        self.state = FsmState.EP_ONLY
        self.pending: EoqEvent | None = None
        self.last_cost: float | None = None
        self.event: EoqEvent | None = None
        self.asr_active_ever = False
        self.hypothesis = []

    def step(self, frame) -> TraceRow:
        if self.state == FsmState.END:
            raise SessionError("step after session end")
        th = self.th
        t_ms = frame.t_ms
        fired_a = fired_d = endpoint = False
        asr_ran = False

        if self.state == FsmState.EP_ONLY:
            post = self.m.ep_step(frame.features, SwitchSource.AUDIO_FRAMES)
            source = SwitchSource.AUDIO_FRAMES
            row_state = FsmState.EP_ONLY
            if float(post[SpeechClass.SPEECH]) > th.theta_vad:
                # speech onset: this frame goes to the ASR as well
                filtered = False
                self._advance_asr(frame)
                asr_ran = True
                next_state = FsmState.ASR_EP
            else:
                filtered = True
                next_state = FsmState.EP_ONLY
        else:
            row_state = FsmState.ASR_EP
            latent = self.m.enc_step(frame.features)
            if self.m.ep_active_source == SwitchSource.SHARED_LATENT:
                post = self.m.ep_step(latent, SwitchSource.SHARED_LATENT)
                source = SwitchSource.SHARED_LATENT
            else:
                post = self.m.ep_step(frame.features, SwitchSource.AUDIO_FRAMES)
                source = SwitchSource.AUDIO_FRAMES
            toks, cost = self.m.asr_step(latent)
            self.hypothesis.extend(toks)
            if cost is not None:
                self.last_cost = cost
            filtered = False
            asr_ran = True
            next_state = FsmState.ASR_EP
            if (self.mode == Mode.CONTINUOUS
                    and float(post[SpeechClass.SPEECH]) < th.theta_vad):
                next_state = FsmState.EP_ONLY

        if self.mode == Mode.SHORT_QUERY and asr_ran:
            self.pending, reached, fired_a, fired_d = declare_endpoint(
                post, self.last_cost, th, t_ms, self.pending)
            if reached:
                endpoint = True
                next_state = FsmState.END
                self.event = EoqEvent(self.pending.source,
                                      self.pending.fire_ms,
                                      self.pending.endpoint_ms)

        self.state = next_state
        return TraceRow(t_ms=t_ms, fsm_state=row_state, source=source,
                        posterior=np.asarray(post, dtype=np.float64),
                        eos_cost=self.last_cost if asr_ran else None,
                        filtered=filtered, fired_acoustic=fired_a,
                        fired_decoder=fired_d, endpoint=endpoint)

    def _advance_asr(self, frame):
        latent = self.m.enc_step(frame.features)
        toks, cost = self.m.asr_step(latent)
        self.hypothesis.extend(toks)
        if cost is not None:
            self.last_cost = cost
        self.asr_active_ever = True

    def finish(self):
        """End-of-audio: flush the odd latent and settle a pending wait."""
        if self.state != FsmState.END:
            toks, cost = self.m.asr_flush()
            self.hypothesis.extend(toks)
            if (self.mode == Mode.SHORT_QUERY and self.pending is not None
                    and self.event is None):
                # the wait elapses after the audio runs out
                self.event = EoqEvent(self.pending.source,
                                      self.pending.fire_ms,
                                      self.pending.endpoint_ms)


def run_session(utt, mode: Mode, th: Thresholds, system) -> SessionTrace:
    """Drive a full utterance through the state machine.

    ``system`` is anything with a ``new_session()`` factory (an
    InferenceSystem or a scripted test double).
    """
    sess = Session(system.new_session(), mode, th)
    rows = []
    for frame in utt.frames:
        if sess.state == FsmState.END:
            break
        rows.append(sess.step(frame))
    sess.finish()
    return SessionTrace(utt_id=utt.id, mode=mode, rows=rows,
                        hypothesis=list(sess.hypothesis), event=sess.event)


# ---------------------------------------------------------------------------
# trace export

TRACE_COLUMNS = ["t_ms", "fsm_state", "source", "p_speech", "p_initial",
                 "p_intermediate", "p_final", "eos_cost", "filtered",
                 "fired_acoustic", "fired_decoder", "endpoint"]


def _fmt(x):
    return format(float(x), ".9g")


def export_trace(trace: SessionTrace, path):
    """Write the per-frame trace as CSV with 9-significant-digit floats."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for r in trace.rows:
            w.writerow([
                r.t_ms,
                r.fsm_state.value,
                r.source.value,
                _fmt(r.posterior[SpeechClass.SPEECH]),
                _fmt(r.posterior[SpeechClass.INITIAL_SILENCE]),
                _fmt(r.posterior[SpeechClass.INTERMEDIATE_SILENCE]),
                _fmt(r.posterior[SpeechClass.FINAL_SILENCE]),
                "" if r.eos_cost is None else _fmt(r.eos_cost),
                int(r.filtered),
                int(r.fired_acoustic),
                int(r.fired_decoder),
                int(r.endpoint),
            ])


def read_trace(path):
    """Parse an exported trace back into plain dict rows (for tests/plots)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != TRACE_COLUMNS:
            raise SessionError(f"{path}: unexpected columns {reader.fieldnames}")
        rows = []
        for rec in reader:
            rows.append({
                "t_ms": int(rec["t_ms"]),
                "fsm_state": rec["fsm_state"],
                "source": rec["source"],
                "p_speech": float(rec["p_speech"]),
                "p_initial": float(rec["p_initial"]),
                "p_intermediate": float(rec["p_intermediate"]),
                "p_final": float(rec["p_final"]),
                "eos_cost": None if rec["eos_cost"] == "" else float(rec["eos_cost"]),
                "filtered": bool(int(rec["filtered"])),
                "fired_acoustic": bool(int(rec["fired_acoustic"])),
                "fired_decoder": bool(int(rec["fired_decoder"])),
                "endpoint": bool(int(rec["endpoint"])),
            })
    return rows


class ScriptedSessionModels:
    """Test double: replays scripted posteriors and decoder costs.

    ``posteriors`` are consumed one per frame; ``asr_script`` entries
    (tokens, eos_cost) are consumed one per ASR-active frame.
    """

    def __init__(self, posteriors, asr_script=None,
                 ep_active_source=SwitchSource.SHARED_LATENT):
        self.posteriors = list(posteriors)
        self.asr_script = list(asr_script or [])
        self.ep_active_source = ep_active_source
        self._p = 0
        self._a = 0

    def ep_step(self, x, source):
        post = self.posteriors[self._p]
        self._p += 1
        return np.asarray(post, dtype=np.float64)

    def enc_step(self, frame):
        return np.zeros(1)

    def asr_step(self, latent):
        if self._a < len(self.asr_script):
            entry = self.asr_script[self._a]
            self._a += 1
            return list(entry[0]), entry[1]
        return [], None

    def asr_flush(self):
        return [], None


class ScriptedSystem:
    """Factory wrapper so scripted doubles plug into run_session."""

    def __init__(self, posteriors, asr_script=None,
                 ep_active_source=SwitchSource.SHARED_LATENT):
        self._args = (posteriors, asr_script, ep_active_source)

    def new_session(self):
        return ScriptedSessionModels(*self._args)
