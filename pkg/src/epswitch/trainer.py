"""Training loops for the four experiment arms plus checkpoint plumbing.

Arms:
  B1 - separate single-task models (EP on frame CE, ASR on transducer loss)
  E1 - one joint model, multitask loss, EP fed raw audio, no layer sharing
       in the EP gradient path
  E2 - shared encoder layers, EP always fed the shared latents
  E3 - shared layers plus the switch connection (per-utterance random source)

E2 is literally E3 with the switch pinned to the latent side, including the
random draws, so pinning reproduces E2 bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import corpus as cp
from . import losses
from . import models as md
from . import netkit as nk

ARMS = ("B1", "E1", "E2", "E3")


class TrainerError(Exception):
    pass


class DivergenceError(TrainerError):
    def __init__(self, step, value):
        super().__init__(f"non-finite loss at step {step}: {value}")
        self.step = step


@dataclass
class TrainConfig:
    arm: str = "E3"
    lam: float = 0.98
    learning_rate: float = 1e-3
    batch_size: int = 8
    steps: int = 2000
    seed: int = 0
    switch_prob: float = 0.5  # P(audio frames) for the E3 switch
    append_eos: bool = True

    def validate(self):
        if self.arm not in ARMS:
            raise TrainerError(f"unknown arm {self.arm!r}; expected one of {ARMS}")
        if not 0.0 <= self.lam <= 1.0:
            raise TrainerError(f"lam {self.lam} outside [0, 1]")
        if not 0.0 <= self.switch_prob <= 1.0:
            raise TrainerError(f"switch_prob {self.switch_prob} outside [0, 1]")
        if self.steps <= 0 or self.batch_size <= 0:
            raise TrainerError("steps and batch_size must be positive")
        if self.learning_rate <= 0:
            raise TrainerError("learning_rate must be positive")


@dataclass
class TrainReport:
    arm: str
    steps: int
    loss_multi: list = field(default_factory=list)
    loss_asr: list = field(default_factory=list)
    loss_ep: list = field(default_factory=list)
    switch_counts: dict = field(default_factory=lambda: {"audio": 0, "latent": 0})


@dataclass
class TrainResult:
    stores: dict                 # "joint" for E1-E3; "ep" and "asr" for B1
    report: TrainReport
    model_config: md.ModelConfig
    train_config: TrainConfig


class Adam:
    """Adam with fixed hyperparameters; state per parameter name."""

    def __init__(self, store: nk.ParamStore, lr=1e-3, beta1=0.9, beta2=0.999,
                 eps=1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(v) for n, v in store.params.items()}
        self.v = {n: np.zeros_like(v) for n, v in store.params.items()}

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in self.store.params.items():
            g = self.store.grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def append_eos_targets(utt: cp.UtteranceRecord, eos_id: int):
    """Targets with </s> appended as the final supervision token."""
    return list(utt.target_tokens) + [eos_id]


def strip_eos(tokens, eos_id):
    return [t for t in tokens if t != eos_id]


def _speech_onset(label_ids) -> int:
    """Index of the first speech frame, or 0 when the utterance has none."""
    hits = np.flatnonzero(np.asarray(label_ids) == int(cp.SpeechClass.SPEECH))
    return int(hits[0]) if hits.size else 0


def default_model_config(meta: cp.CorpusMeta | None = None) -> md.ModelConfig:
    if meta is None:
        return md.ModelConfig()
    return md.ModelConfig(d_in=meta.d_in, vocab_size=meta.vocab_size)


def _check_corpus(records, mcfg: md.ModelConfig):
    if not records:
        raise TrainerError("empty training corpus")
    for rec in records:
        if rec.frames[0].features.shape[0] != mcfg.d_in:
            raise TrainerError(
                f"{rec.id}: feature dim {rec.frames[0].features.shape[0]} != "
                f"model d_in {mcfg.d_in}")
        for t in rec.target_tokens:
            if not 0 <= t < mcfg.vocab_size:
                raise TrainerError(
                    f"{rec.id}: token {t} outside model vocab {mcfg.vocab_size}")


def _asr_loss(store, mcfg, frames, targets, latents=None):
    if latents is None:
        latents = md.shared_encode(store, mcfg, frames)
    enc = md.asr_encode(store, mcfg, latents)
    logits = md.transducer_lattice_logits(store, mcfg, enc, targets)
    lp = nk.log_softmax_v(logits)
    return losses.rnnt_loss_var(lp, targets, mcfg.blank_id, eos=mcfg.eos_id,
                                allow_final_eos=True)


def _ep_loss(store, mcfg, frames, label_ids, source, latents=None):
    if source == md.SwitchSource.AUDIO_FRAMES:
        ep_in = frames
    else:
        ep_in = latents if latents is not None else md.shared_encode(store, mcfg, frames)
    logits = md.ep_forward_logits(store, mcfg, ep_in, source)
    return losses.ce_loss(logits, label_ids)


class _BatchSampler:
    """Deterministic shuffled epochs over utterance indices."""

    def __init__(self, n, batch_size, rng):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self.order = []

    def next_batch(self):
        out = []
        while len(out) < self.batch_size:
            if not self.order:
                self.order = list(self.rng.permutation(self.n))
            out.append(int(self.order.pop(0)))
        return out


def train(cfg: TrainConfig, records, mcfg: md.ModelConfig | None = None) -> TrainResult:
    """Train the configured arm on ``records``; deterministic in (cfg, corpus)."""
    cfg.validate()
    if mcfg is None:
        mcfg = md.ModelConfig(
            d_in=records[0].frames[0].features.shape[0] if records else 8)
    _check_corpus(records, mcfg)

    feats = [rec.feature_matrix() for rec in records]
    label_ids = [cp.label_frames(rec).as_ids() for rec in records]
    targets = [append_eos_targets(rec, mcfg.eos_id) if cfg.append_eos
               else list(rec.target_tokens) for rec in records]
    # ASR branch starts at speech onset, like the deployed frame filter does;
    # the endpointer still sees (and is scored on) every frame
    asr_starts = [_speech_onset(ids) for ids in label_ids]

    if cfg.arm == "B1":
        return _train_separate(cfg, mcfg, feats, label_ids, targets, asr_starts)
    return _train_joint(cfg, mcfg, feats, label_ids, targets, asr_starts)


def _train_joint(cfg, mcfg, feats, label_ids, targets, asr_starts):
    store = md.init_params(mcfg, cfg.seed)
    adam = Adam(store, lr=cfg.learning_rate)
    rng_batch = np.random.default_rng([cfg.seed, 101])
    rng_switch = np.random.default_rng([cfg.seed, 202])
    sampler = _BatchSampler(len(feats), cfg.batch_size, rng_batch)
    # the switch is drawn even for E2 (probability pinned to the latent side)
    # so that pinning E3 reproduces E2 bit-exactly
    p_audio = {"E1": None, "E2": 0.0, "E3": cfg.switch_prob}[cfg.arm]
    report = TrainReport(arm=cfg.arm, steps=cfg.steps)

    for step in range(cfg.steps):
        idxs = sampler.next_batch()
        store.zero_grads()
        total = None
        asr_sum = 0.0
        ep_sum = 0.0
        for i in idxs:
            if cfg.arm == "E1":
                source = md.SwitchSource.AUDIO_FRAMES
            else:
                source = md.sample_switch(rng_switch, p_audio)
            report.switch_counts[source.value] += 1
            l_asr = _asr_loss(store, mcfg, feats[i][asr_starts[i]:], targets[i])
            l_ep = _ep_loss(store, mcfg, feats[i], label_ids[i], source)
            l = losses.multitask_loss(l_asr, l_ep, cfg.lam)
            l = nk.scale(l, 1.0 / len(idxs))
            total = l if total is None else nk.add(total, l)
            asr_sum += float(l_asr.value)
            ep_sum += float(l_ep.value)
        value = float(total.value)
        if not np.isfinite(value):
            raise DivergenceError(step, value)
        total.backward()
        adam.step()
        report.loss_multi.append(value)
        report.loss_asr.append(asr_sum / len(idxs))
        report.loss_ep.append(ep_sum / len(idxs))
    return TrainResult(stores={"joint": store}, report=report,
                       model_config=mcfg, train_config=cfg)


def _train_separate(cfg, mcfg, feats, label_ids, targets, asr_starts):
    ep_store = md.init_params(mcfg, cfg.seed)
    asr_store = md.init_params(mcfg, cfg.seed + 10_000)
    adam_ep = Adam(ep_store, lr=cfg.learning_rate)
    adam_asr = Adam(asr_store, lr=cfg.learning_rate)
    rng_batch = np.random.default_rng([cfg.seed, 101])
    sampler = _BatchSampler(len(feats), cfg.batch_size, rng_batch)
    report = TrainReport(arm="B1", steps=cfg.steps)

    for step in range(cfg.steps):
        idxs = sampler.next_batch()
        ep_store.zero_grads()
        asr_store.zero_grads()
        ep_total = None
        asr_total = None
        for i in idxs:
            l_ep = _ep_loss(ep_store, mcfg, feats[i], label_ids[i],
                            md.SwitchSource.AUDIO_FRAMES)
            l_asr = _asr_loss(asr_store, mcfg, feats[i][asr_starts[i]:],
                              targets[i])
            l_ep = nk.scale(l_ep, 1.0 / len(idxs))
            l_asr = nk.scale(l_asr, 1.0 / len(idxs))
            ep_total = l_ep if ep_total is None else nk.add(ep_total, l_ep)
            asr_total = l_asr if asr_total is None else nk.add(asr_total, l_asr)
        ep_val = float(ep_total.value)
        asr_val = float(asr_total.value)
        if not (np.isfinite(ep_val) and np.isfinite(asr_val)):
            raise DivergenceError(step, (ep_val, asr_val))
        ep_total.backward()
        asr_total.backward()
        adam_ep.step()
        adam_asr.step()
        report.loss_ep.append(ep_val)
        report.loss_asr.append(asr_val)
        report.loss_multi.append(asr_val + ep_val)
    return TrainResult(stores={"ep": ep_store, "asr": asr_store},
                       report=report, model_config=mcfg, train_config=cfg)


# ---------------------------------------------------------------------------
# checkpoints and evaluation helpers


def save_checkpoint(store, mcfg, path, arm=None):
    meta = {"arm": arm} if arm else None
    md.save_checkpoint(store, mcfg, path, meta=meta)


def load_checkpoint(path, expect_cfg=None):
    return md.load_checkpoint(path, expect_cfg)


def build_system(result: TrainResult) -> md.InferenceSystem:
    """Wire a trained result into a streaming inference system."""
    arm = result.train_config.arm
    if arm == "B1":
        return md.InferenceSystem.separate(result.stores["ep"],
                                           result.stores["asr"],
                                           result.model_config)
    source = (md.SwitchSource.AUDIO_FRAMES if arm == "E1"
              else md.SwitchSource.SHARED_LATENT)
    return md.InferenceSystem.joint(result.stores["joint"],
                                    result.model_config,
                                    ep_active_source=source)


def ep_pathway_ce(store, mcfg, records, source: md.SwitchSource) -> float:
    """Mean per-frame cross-entropy of the endpointer on one input pathway."""
    total = 0.0
    n = 0
    for rec in records:
        frames = rec.feature_matrix()
        labels = cp.label_frames(rec).as_ids()
        if source == md.SwitchSource.SHARED_LATENT:
            ep_in = md.shared_encode(store, mcfg, frames)
        else:
            ep_in = frames
        logits = md.ep_forward_logits(store, mcfg, ep_in, source)
        lp = nk.log_softmax(logits.value)
        total += -lp[np.arange(len(labels)), labels].sum()
        n += len(labels)
    return total / n


def ep_frame_accuracy(store, mcfg, records, source: md.SwitchSource) -> float:
    correct = 0
    n = 0
    for rec in records:
        frames = rec.feature_matrix()
        labels = cp.label_frames(rec).as_ids()
        if source == md.SwitchSource.SHARED_LATENT:
            ep_in = md.shared_encode(store, mcfg, frames)
        else:
            ep_in = frames
        post = md.ep_forward(store, mcfg, ep_in, source)
        correct += int((post.argmax(axis=1) == labels).sum())
        n += len(labels)
    return correct / n


def train_config_to_dict(cfg: TrainConfig):
    return asdict(cfg)


def train_config_from_dict(d) -> TrainConfig:
    return TrainConfig(**d)
