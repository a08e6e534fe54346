"""Model architecture: shared encoder, ASR trunk, toy transducer, endpointer.

The endpointer has two input projections (one for raw audio frames, one for
shared-encoder latents) feeding a single shared LSTM stack, so one set of
recurrent weights serves both switch sources. The transducer prediction
network embeds the previous two non-blank tokens; the output vocabulary is
the token set plus reserved </s> and blank symbols.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from enum import Enum

import numpy as np

from . import netkit as nk


class ModelError(Exception):
    pass


class SwitchSource(Enum):
    AUDIO_FRAMES = "audio"
    SHARED_LATENT = "latent"


@dataclass(frozen=True)
class ModelConfig:
    d_in: int = 8
    d_enc: int = 16
    ep_hidden: int = 16
    vocab_size: int = 8
    embed_dim: int = 8
    joint_dim: int = 16
    conv_kernel: int = 3
    shared_blocks: int = 2
    asr_blocks: int = 2
    ep_lstm_layers: int = 3

    @property
    def eos_id(self):
        return self.vocab_size

    @property
    def blank_id(self):
        return self.vocab_size + 1

    @property
    def n_symbols(self):
        # tokens + </s> + blank
        return self.vocab_size + 2

    @property
    def sos_row(self):
        # sentinel embedding row for start-of-sequence context
        return self.vocab_size + 1

    @property
    def n_embed_rows(self):
        # tokens + </s> + start sentinel
        return self.vocab_size + 2


def param_shapes(cfg: ModelConfig):
    """Full parameter layout: name -> shape."""
    shapes = {}
    shapes["enc/in_proj/W"] = (cfg.d_enc, cfg.d_in)
    shapes["enc/in_proj/b"] = (cfg.d_enc,)
    for i in range(cfg.shared_blocks):
        shapes[f"enc/block{i}/pw/W"] = (cfg.d_enc, cfg.d_enc)
        shapes[f"enc/block{i}/pw/b"] = (cfg.d_enc,)
        shapes[f"enc/block{i}/dw/K"] = (cfg.conv_kernel, cfg.d_enc)
    shapes["trunk/proj/W"] = (cfg.d_enc, 2 * cfg.d_enc)
    shapes["trunk/proj/b"] = (cfg.d_enc,)
    for i in range(cfg.asr_blocks):
        shapes[f"trunk/block{i}/pw/W"] = (cfg.d_enc, cfg.d_enc)
        shapes[f"trunk/block{i}/pw/b"] = (cfg.d_enc,)
        shapes[f"trunk/block{i}/dw/K"] = (cfg.conv_kernel, cfg.d_enc)
    shapes["dec/embed"] = (cfg.n_embed_rows, cfg.embed_dim)
    shapes["join/We"] = (cfg.joint_dim, cfg.d_enc)
    shapes["join/Wp"] = (cfg.joint_dim, 2 * cfg.embed_dim)
    shapes["join/b1"] = (cfg.joint_dim,)
    shapes["join/Wo"] = (cfg.n_symbols, cfg.joint_dim)
    shapes["join/b2"] = (cfg.n_symbols,)
    h = cfg.ep_hidden
    shapes["ep/proj_audio/W"] = (h, cfg.d_in)
    shapes["ep/proj_audio/b"] = (h,)
    shapes["ep/proj_latent/W"] = (h, cfg.d_enc)
    shapes["ep/proj_latent/b"] = (h,)
    for i in range(cfg.ep_lstm_layers):
        shapes[f"ep/lstm{i}/W"] = (4 * h, 2 * h)
        shapes[f"ep/lstm{i}/b"] = (4 * h,)
    shapes["ep/head/W"] = (4, h)
    shapes["ep/head/b"] = (4,)
    return shapes


EP_PARAM_PREFIX = "ep/"
ASR_ONLY_PREFIXES = ("trunk/", "dec/", "join/")
SHARED_PREFIX = "enc/"


def init_params(cfg: ModelConfig, seed: int) -> nk.ParamStore:
    """Deterministic small random init; biases zero, LSTM forget bias +1."""
    rng = np.random.default_rng([int(seed), 29])
    store = nk.ParamStore()
    for name, shape in param_shapes(cfg).items():
        if name.endswith("/b") or name.endswith("b1") or name.endswith("b2"):
            value = np.zeros(shape)
        else:
            fan_in = shape[-1] if len(shape) > 1 else shape[0]
            value = rng.normal(0.0, 1.0 / np.sqrt(fan_in), shape)
        if "/lstm" in name and name.endswith("/b"):
            h = shape[0] // 4
            value = np.zeros(shape)
            value[h:2 * h] = 1.0
        store.add(name, value)
    return store


def validate_store(store: nk.ParamStore, cfg: ModelConfig):
    """Check every expected parameter exists with the right shape."""
    for name, shape in param_shapes(cfg).items():
        if name not in store:
            raise ModelError(f"missing parameter {name!r}")
        actual = store.params[name].shape
        if actual != shape:
            raise ModelError(
                f"parameter {name!r} has shape {actual}, expected {shape}")


# ---------------------------------------------------------------------------
# tape-mode forward (training)


def _causal_block(store, prefix, x: nk.Var) -> nk.Var:
    h = nk.dense_forward(x, store.leaf(f"{prefix}/pw/W"), store.leaf(f"{prefix}/pw/b"))
    h = nk.causal_conv(h, store.leaf(f"{prefix}/dw/K"))
    return nk.add(x, nk.tanh_v(h))


def causal_block_forward(store, prefix, xs) -> nk.Var:
    """Standalone causal block on a (T, D) sequence (testing surface)."""
    x = xs if isinstance(xs, nk.Var) else nk.constant(xs)
    if x.value.ndim != 2 or x.value.shape[0] == 0:
        raise ModelError(f"causal block needs a nonempty (T, D) input")
    return _causal_block(store, prefix, x)


def shared_encode(store, cfg: ModelConfig, frames) -> nk.Var:
    """Raw frames (T, d_in) -> causal latents (T, d_enc)."""
    x = frames if isinstance(frames, nk.Var) else nk.constant(frames)
    if x.value.ndim != 2 or x.value.shape[0] == 0:
        raise ModelError("shared_encode: need a nonempty (T, d_in) input")
    if x.value.shape[1] != cfg.d_in:
        raise ModelError(
            f"shared_encode: input dim {x.value.shape[1]} != d_in {cfg.d_in}")
    h = nk.dense_forward(x, store.leaf("enc/in_proj/W"), store.leaf("enc/in_proj/b"))
    for i in range(cfg.shared_blocks):
        h = _causal_block(store, f"enc/block{i}", h)
    return h


def asr_encode(store, cfg: ModelConfig, latents: nk.Var) -> nk.Var:
    """Latents (T, d_enc) -> reduced encoder states (ceil(T/2), d_enc)."""
    if latents.value.shape[0] == 0:
        raise ModelError("asr_encode: empty input")
    s = nk.stack_pairs(latents)
    h = nk.dense_forward(s, store.leaf("trunk/proj/W"), store.leaf("trunk/proj/b"))
    for i in range(cfg.asr_blocks):
        h = _causal_block(store, f"trunk/block{i}", h)
    return h


def ep_forward_logits(store, cfg: ModelConfig, inputs, source: SwitchSource) -> nk.Var:
    """Endpointer logits (T, 4) for either switch source."""
    x = inputs if isinstance(inputs, nk.Var) else nk.constant(inputs)
    if x.value.ndim != 2 or x.value.shape[0] == 0:
        raise ModelError("ep_forward: need a nonempty (T, D) input")
    expect = cfg.d_in if source == SwitchSource.AUDIO_FRAMES else cfg.d_enc
    if x.value.shape[1] != expect:
        raise ModelError(
            f"ep_forward: input dim {x.value.shape[1]} != {expect} for {source.value}")
    proj = "ep/proj_audio" if source == SwitchSource.AUDIO_FRAMES else "ep/proj_latent"
    h = nk.dense_forward(x, store.leaf(f"{proj}/W"), store.leaf(f"{proj}/b"))
    for i in range(cfg.ep_lstm_layers):
        h = nk.lstm_layer(h, store.leaf(f"ep/lstm{i}/W"), store.leaf(f"ep/lstm{i}/b"))
    return nk.dense_forward(h, store.leaf("ep/head/W"), store.leaf("ep/head/b"))


def ep_forward(store, cfg: ModelConfig, inputs, source: SwitchSource):
    """Per-frame 4-way posteriors (T, 4), rows summing to 1."""
    logits = ep_forward_logits(store, cfg, inputs, source)
    return nk.softmax(logits.value)


def prediction_context_ids(targets, cfg: ModelConfig):
    """Context ids (U+1, 2): the two most recent tokens, start = sentinel."""
    tgt = list(int(t) for t in targets)
    for t in tgt:
        if not 0 <= t <= cfg.eos_id:
            raise ModelError(f"token id {t} out of range")
    sos = cfg.sos_row
    U = len(tgt)
    ids = np.empty((U + 1, 2), dtype=np.int64)
    for u in range(U + 1):
        ids[u, 0] = tgt[u - 2] if u >= 2 else sos
        ids[u, 1] = tgt[u - 1] if u >= 1 else sos
    return ids


def transducer_lattice_logits(store, cfg: ModelConfig, enc: nk.Var, targets) -> nk.Var:
    """Joint logits over the whole lattice: (T', U+1, V+2)."""
    ids = prediction_context_ids(targets, cfg)
    pred = nk.embed_rows(store.leaf("dec/embed"), ids)
    return nk.joiner_lattice(enc, pred,
                             store.leaf("join/We"), store.leaf("join/Wp"),
                             store.leaf("join/b1"),
                             store.leaf("join/Wo"), store.leaf("join/b2"))


def joint_logits(store, cfg: ModelConfig, enc_u, prev_tokens):
    """Single-step joiner logits (V+2,) in plain numpy (streaming path)."""
    enc_u = np.asarray(enc_u, dtype=np.float64)
    if enc_u.shape != (cfg.d_enc,):
        raise ModelError(f"joint_logits: enc vector shape {enc_u.shape}")
    p2, p1 = prev_tokens
    for t in (p2, p1):
        if t != cfg.sos_row and not 0 <= t <= cfg.eos_id:
            raise ModelError(f"joint_logits: token id {t} out of range")
    emb = store.params["dec/embed"]
    pred = np.concatenate([emb[p2], emb[p1]])
    h = np.tanh(store.params["join/We"] @ enc_u
                + store.params["join/Wp"] @ pred
                + store.params["join/b1"])
    return store.params["join/Wo"] @ h + store.params["join/b2"]


def sample_switch(rng, p_audio=0.5) -> SwitchSource:
    """Draw the endpointer input source; Bernoulli(p_audio) for raw frames."""
    return (SwitchSource.AUDIO_FRAMES if rng.random() < p_audio
            else SwitchSource.SHARED_LATENT)


# ---------------------------------------------------------------------------
# streaming inference (plain numpy, one frame at a time)


class _CausalBlockStream:
    """Streaming causal block; keeps the last k-1 post-dense rows."""

    def __init__(self, store, prefix, dim, kernel):
        self.W = store.params[f"{prefix}/pw/W"]
        self.b = store.params[f"{prefix}/pw/b"]
        self.K = store.params[f"{prefix}/dw/K"]
        self.hist = np.zeros((kernel - 1, dim))

    def step(self, x):
        h = self.W @ x + self.b
        conv = self.K[0] * h
        for j in range(1, self.K.shape[0]):
            conv += self.K[j] * self.hist[j - 1]
        if self.hist.shape[0]:
            self.hist = np.vstack([h[None, :], self.hist[:-1]])
        return x + np.tanh(conv)


class StreamingEncoder:
    """Shared encoder, one raw frame in, one latent out."""

    def __init__(self, store, cfg: ModelConfig):
        self.W = store.params["enc/in_proj/W"]
        self.b = store.params["enc/in_proj/b"]
        self.blocks = [_CausalBlockStream(store, f"enc/block{i}", cfg.d_enc,
                                          cfg.conv_kernel)
                       for i in range(cfg.shared_blocks)]

    def step(self, frame):
        h = self.W @ np.asarray(frame, dtype=np.float64) + self.b
        for blk in self.blocks:
            h = blk.step(h)
        return h


class StreamingEp:
    """Endpointer with persistent LSTM state across switch transitions."""

    def __init__(self, store, cfg: ModelConfig):
        self.store = store
        self.cfg = cfg
        h = cfg.ep_hidden
        self.states = [(np.zeros(h), np.zeros(h)) for _ in range(cfg.ep_lstm_layers)]

    def step(self, x, source: SwitchSource):
        cfg = self.cfg
        x = np.asarray(x, dtype=np.float64)
        expect = cfg.d_in if source == SwitchSource.AUDIO_FRAMES else cfg.d_enc
        if x.shape != (expect,):
            raise ModelError(
                f"ep step: input dim {x.shape} != {expect} for {source.value}")
        proj = "ep/proj_audio" if source == SwitchSource.AUDIO_FRAMES else "ep/proj_latent"
        h = self.store.params[f"{proj}/W"] @ x + self.store.params[f"{proj}/b"]
        for i in range(cfg.ep_lstm_layers):
            h, self.states[i] = nk.lstm_cell_step(
                h, self.states[i],
                self.store.params[f"ep/lstm{i}/W"],
                self.store.params[f"ep/lstm{i}/b"])
        logits = (self.store.params["ep/head/W"] @ h
                  + self.store.params["ep/head/b"])
        return nk.softmax(logits)


class StreamingAsr:
    """ASR trunk + greedy transducer decoder fed one latent at a time.

    Latents are buffered in pairs (time-reduction factor 2); each reduced
    step runs the trunk blocks and a greedy emission loop. ``</s>`` never
    enters the hypothesis; its cost at the last joint distribution is
    reported for decoder-based end-of-query detection.
    """

    MAX_SYMBOLS_PER_STEP = 8

    def __init__(self, store, cfg: ModelConfig):
        self.store = store
        self.cfg = cfg
        self.Wp = store.params["trunk/proj/W"]
        self.bp = store.params["trunk/proj/b"]
        self.blocks = [_CausalBlockStream(store, f"trunk/block{i}", cfg.d_enc,
                                          cfg.conv_kernel)
                       for i in range(cfg.asr_blocks)]
        self.pending = None
        self.context = (cfg.sos_row, cfg.sos_row)
        self.hypothesis = []

    def _reduced_step(self, pair):
        h = self.Wp @ pair + self.bp
        for blk in self.blocks:
            h = blk.step(h)
        emitted = []
        logits = None
        for _ in range(self.MAX_SYMBOLS_PER_STEP):
            logits = joint_logits(self.store, self.cfg, h, self.context)
            k = int(np.argmax(logits))
            if k == self.cfg.blank_id or k == self.cfg.eos_id:
                break
            emitted.append(k)
            self.context = (self.context[1], k)
        self.hypothesis.extend(emitted)
        eos_cost = float(-nk.log_softmax(logits)[self.cfg.eos_id])
        return emitted, eos_cost

    def step(self, latent):
        latent = np.asarray(latent, dtype=np.float64)
        if self.pending is None:
            self.pending = latent
            return [], None
        pair = np.concatenate([self.pending, latent])
        self.pending = None
        return self._reduced_step(pair)

    def flush(self):
        """Zero-pad and process a dangling odd latent, if any."""
        if self.pending is None:
            return [], None
        pair = np.concatenate([self.pending, np.zeros_like(self.pending)])
        self.pending = None
        return self._reduced_step(pair)


class SessionModels:
    """Per-session bundle of streaming components over immutable stores."""

    def __init__(self, ep_store, asr_store, cfg: ModelConfig,
                 ep_active_source: SwitchSource):
        self.ep_active_source = ep_active_source
        self._ep = StreamingEp(ep_store, cfg)
        self._enc = StreamingEncoder(asr_store, cfg)
        self._asr = StreamingAsr(asr_store, cfg)

    def ep_step(self, x, source):
        return self._ep.step(x, source)

    def enc_step(self, frame):
        return self._enc.step(frame)

    def asr_step(self, latent):
        return self._asr.step(latent)

    def asr_flush(self):
        return self._asr.flush()


class InferenceSystem:
    """Immutable checkpoint bundle; spawns independent streaming sessions."""

    def __init__(self, ep_store, asr_store, cfg: ModelConfig,
                 ep_active_source: SwitchSource):
        validate_store(ep_store, cfg)
        validate_store(asr_store, cfg)
        self.ep_store = ep_store
        self.asr_store = asr_store
        self.cfg = cfg
        self.ep_active_source = ep_active_source

    @classmethod
    def joint(cls, store, cfg, ep_active_source=SwitchSource.SHARED_LATENT):
        return cls(store, store, cfg, ep_active_source)

    @classmethod
    def separate(cls, ep_store, asr_store, cfg):
        # separate single-task models: the EP always consumes raw audio
        return cls(ep_store, asr_store, cfg, SwitchSource.AUDIO_FRAMES)

    def new_session(self) -> SessionModels:
        return SessionModels(self.ep_store, self.asr_store, self.cfg,
                             self.ep_active_source)


# ---------------------------------------------------------------------------
# checkpointing (params + model-config block)


def save_checkpoint(store: nk.ParamStore, cfg: ModelConfig, path, *,
                    meta=None):
    extra = {"model_config": asdict(cfg)}
    if meta:
        extra["meta"] = meta
    nk.save_params(store, path, extra=extra)


def load_checkpoint(path, expect_cfg: ModelConfig | None = None):
    """Load a checkpoint; returns (store, cfg, meta)."""
    store, extra = nk.load_params(path)
    if not extra or "model_config" not in extra:
        raise nk.CheckpointError(f"{path}: missing model-config block")
    cfg = ModelConfig(**extra["model_config"])
    if expect_cfg is not None and cfg != expect_cfg:
        raise nk.CheckpointError(
            f"{path}: model config {cfg} != expected {expect_cfg}")
    try:
        validate_store(store, cfg)
    except ModelError as exc:
        raise nk.CheckpointError(f"{path}: {exc}") from exc
    return store, cfg, extra.get("meta")
