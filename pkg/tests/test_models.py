"""Architecture tests: shapes, causality, batch/streaming parity, checkpoints."""

import numpy as np
import pytest

from epswitch import models as md
from epswitch import netkit as nk
from epswitch.models import ModelConfig, SwitchSource

CFG = ModelConfig()


@pytest.fixture(scope="module")
def store():
    return md.init_params(CFG, seed=0)


def test_reserved_symbol_layout():
    cfg = ModelConfig(vocab_size=8)
    assert cfg.eos_id == 8
    assert cfg.blank_id == 9
    assert cfg.n_symbols == 10
    assert cfg.sos_row == 9
    assert cfg.n_embed_rows == 10


def test_init_params_covers_all_shapes(store):
    shapes = md.param_shapes(CFG)
    assert set(store.names()) == set(shapes)
    for name, shape in shapes.items():
        assert store.params[name].shape == shape, name
    md.validate_store(store, CFG)


def test_init_params_deterministic_and_seed_sensitive():
    a = md.init_params(CFG, seed=3)
    b = md.init_params(CFG, seed=3)
    c = md.init_params(CFG, seed=4)
    for name in a.names():
        np.testing.assert_array_equal(a.params[name], b.params[name])
    assert any(not np.array_equal(a.params[n], c.params[n]) for n in a.names())


def test_lstm_forget_gate_bias_is_one(store):
    h = CFG.ep_hidden
    for i in range(CFG.ep_lstm_layers):
        b = store.params[f"ep/lstm{i}/b"]
        np.testing.assert_array_equal(b[h:2 * h], np.ones(h))
        np.testing.assert_array_equal(b[:h], np.zeros(h))


def test_validate_store_catches_missing_and_misshapen(store):
    bad = store.clone()
    del bad.params["join/We"]
    with pytest.raises(md.ModelError, match="join/We"):
        md.validate_store(bad, CFG)
    bad2 = store.clone()
    bad2.params["enc/in_proj/W"] = np.zeros((2, 2))
    with pytest.raises(md.ModelError, match="shape"):
        md.validate_store(bad2, CFG)


def test_shared_encode_shapes_and_errors(store):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(11, CFG.d_in))
    latents = md.shared_encode(store, CFG, x)
    assert latents.value.shape == (11, CFG.d_enc)
    with pytest.raises(md.ModelError):
        md.shared_encode(store, CFG, rng.normal(size=(5, CFG.d_in + 1)))
    with pytest.raises(md.ModelError):
        md.shared_encode(store, CFG, np.zeros((0, CFG.d_in)))


def test_shared_encode_is_causal(store):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(12, CFG.d_in))
    base = md.shared_encode(store, CFG, x).value
    x2 = x.copy()
    x2[7:] += 5.0
    pert = md.shared_encode(store, CFG, x2).value
    np.testing.assert_allclose(base[:7], pert[:7], atol=1e-12)
    assert not np.allclose(base[7:], pert[7:])


def test_asr_encode_reduction_and_causality(store):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(12, CFG.d_in))
    latents = md.shared_encode(store, CFG, x)
    enc = md.asr_encode(store, CFG, latents).value
    assert enc.shape == (6, CFG.d_enc)
    # odd length rounds up
    enc_odd = md.asr_encode(store, CFG, md.shared_encode(store, CFG, x[:11])).value
    assert enc_odd.shape == (6, CFG.d_enc)
    # reduced step u depends only on input frames <= 2u+1
    x2 = x.copy()
    x2[6:] += 3.0  # frames 6.. affect reduced steps 3..
    enc2 = md.asr_encode(store, CFG, md.shared_encode(store, CFG, x2)).value
    np.testing.assert_allclose(enc[:3], enc2[:3], atol=1e-12)


def test_ep_forward_both_sources(store):
    rng = np.random.default_rng(3)
    frames = rng.normal(size=(9, CFG.d_in))
    post_a = md.ep_forward(store, CFG, frames, SwitchSource.AUDIO_FRAMES)
    assert post_a.shape == (9, 4)
    np.testing.assert_allclose(post_a.sum(axis=1), np.ones(9), atol=1e-12)
    latents = md.shared_encode(store, CFG, frames)
    post_l = md.ep_forward(store, CFG, latents, SwitchSource.SHARED_LATENT)
    assert post_l.shape == (9, 4)
    # the two pathways are different projections, so outputs differ
    assert not np.allclose(post_a, post_l)


def test_ep_forward_dim_check(store):
    rng = np.random.default_rng(4)
    with pytest.raises(md.ModelError):
        md.ep_forward(store, CFG, rng.normal(size=(5, CFG.d_enc)),
                      SwitchSource.AUDIO_FRAMES)
    with pytest.raises(md.ModelError):
        md.ep_forward(store, CFG, rng.normal(size=(5, CFG.d_in)),
                      SwitchSource.SHARED_LATENT)


def test_prediction_context_ids():
    cfg = ModelConfig(vocab_size=8)
    ids = md.prediction_context_ids([3, 5, 2], cfg)
    sos = cfg.sos_row
    np.testing.assert_array_equal(ids, [[sos, sos], [sos, 3], [3, 5], [5, 2]])
    np.testing.assert_array_equal(md.prediction_context_ids([], cfg),
                                  [[sos, sos]])
    with pytest.raises(md.ModelError):
        md.prediction_context_ids([cfg.blank_id], cfg)


def test_transducer_lattice_shape(store):
    rng = np.random.default_rng(5)
    latents = md.shared_encode(store, CFG, rng.normal(size=(10, CFG.d_in)))
    enc = md.asr_encode(store, CFG, latents)
    logits = md.transducer_lattice_logits(store, CFG, enc, [1, 2, 3])
    assert logits.value.shape == (5, 4, CFG.n_symbols)


def test_joint_logits_matches_lattice(store):
    rng = np.random.default_rng(6)
    latents = md.shared_encode(store, CFG, rng.normal(size=(8, CFG.d_in)))
    enc = md.asr_encode(store, CFG, latents)
    targets = [4, 7]
    lattice = md.transducer_lattice_logits(store, CFG, enc, targets).value
    ids = md.prediction_context_ids(targets, CFG)
    for t in range(enc.value.shape[0]):
        for u in range(len(targets) + 1):
            single = md.joint_logits(store, CFG, enc.value[t], tuple(ids[u]))
            np.testing.assert_allclose(lattice[t, u], single, atol=1e-12)


def test_full_model_grad_check():
    """End-to-end analytic gradients on a miniature config."""
    from epswitch import losses
    cfg = ModelConfig(d_in=3, d_enc=4, ep_hidden=3, vocab_size=3, embed_dim=2,
                      joint_dim=3, shared_blocks=1, asr_blocks=1,
                      ep_lstm_layers=1)
    store = md.init_params(cfg, seed=1)
    rng = np.random.default_rng(7)
    frames = rng.normal(size=(6, cfg.d_in))
    labels = [1, 0, 0, 0, 2, 3]
    targets = [0, 2, cfg.eos_id]

    def objective(s):
        latents = md.shared_encode(s, cfg, frames)
        enc = md.asr_encode(s, cfg, latents)
        logits = md.transducer_lattice_logits(s, cfg, enc, targets)
        lp = nk.log_softmax_v(logits)
        l_asr = losses.rnnt_loss_var(lp, targets, cfg.blank_id, eos=cfg.eos_id,
                                     allow_final_eos=True)
        ep_logits = md.ep_forward_logits(s, cfg, latents, SwitchSource.SHARED_LATENT)
        l_ep = losses.ce_loss(ep_logits, labels)
        return losses.multitask_loss(l_asr, l_ep, 0.98)

    report = nk.grad_check(objective, store, eps=1e-5, tol=1e-5)
    assert report.passed, (report.worst_param, report.max_rel_err)


def test_sample_switch_distribution_and_determinism():
    rng = np.random.default_rng([0, 202])
    draws = [md.sample_switch(rng, 0.5) for _ in range(64)]
    assert SwitchSource.AUDIO_FRAMES in draws
    assert SwitchSource.SHARED_LATENT in draws
    rng2 = np.random.default_rng([0, 202])
    draws2 = [md.sample_switch(rng2, 0.5) for _ in range(64)]
    assert draws == draws2
    rng3 = np.random.default_rng(1)
    assert all(md.sample_switch(rng3, 0.0) == SwitchSource.SHARED_LATENT
               for _ in range(32))
    rng4 = np.random.default_rng(1)
    assert all(md.sample_switch(rng4, 1.0) == SwitchSource.AUDIO_FRAMES
               for _ in range(32))
    counts = sum(md.sample_switch(np.random.default_rng([9, i]), 0.3)
                 == SwitchSource.AUDIO_FRAMES for i in range(2000))
    assert abs(counts / 2000 - 0.3) < 0.04


# ---------------------------------------------------------------------------
# streaming parity


def test_streaming_encoder_matches_batch(store):
    rng = np.random.default_rng(8)
    frames = rng.normal(size=(15, CFG.d_in))
    batch = md.shared_encode(store, CFG, frames).value
    enc = md.StreamingEncoder(store, CFG)
    for t in range(15):
        np.testing.assert_allclose(enc.step(frames[t]), batch[t], atol=1e-12)


def test_streaming_ep_matches_batch(store):
    rng = np.random.default_rng(9)
    frames = rng.normal(size=(12, CFG.d_in))
    batch = md.ep_forward(store, CFG, frames, SwitchSource.AUDIO_FRAMES)
    ep = md.StreamingEp(store, CFG)
    for t in range(12):
        post = ep.step(frames[t], SwitchSource.AUDIO_FRAMES)
        np.testing.assert_allclose(post, batch[t], atol=1e-12)


def test_streaming_ep_state_persists_across_source_switch(store):
    rng = np.random.default_rng(10)
    ep = md.StreamingEp(store, CFG)
    before = [s[0].copy() for s in ep.states]
    ep.step(rng.normal(size=CFG.d_in), SwitchSource.AUDIO_FRAMES)
    mid = [s[0].copy() for s in ep.states]
    assert any(not np.array_equal(a, b) for a, b in zip(before, mid))
    # switching sources does not reset the recurrent state
    ep.step(rng.normal(size=CFG.d_enc), SwitchSource.SHARED_LATENT)
    after = [s[0].copy() for s in ep.states]
    assert any(not np.array_equal(a, b) for a, b in zip(mid, after))


def test_streaming_asr_buffers_pairs(store):
    rng = np.random.default_rng(11)
    asr = md.StreamingAsr(store, CFG)
    toks, cost = asr.step(rng.normal(size=CFG.d_enc))
    assert toks == [] and cost is None  # first of a pair: buffered
    toks, cost = asr.step(rng.normal(size=CFG.d_enc))
    assert cost is not None  # pair complete: one reduced step ran


def test_streaming_asr_flush_handles_odd_tail(store):
    rng = np.random.default_rng(12)
    asr = md.StreamingAsr(store, CFG)
    asr.step(rng.normal(size=CFG.d_enc))
    toks, cost = asr.flush()
    assert cost is not None
    toks2, cost2 = asr.flush()
    assert toks2 == [] and cost2 is None  # nothing pending


def test_streaming_asr_hypothesis_has_no_reserved_symbols():
    cfg = ModelConfig()
    store = md.init_params(cfg, seed=5)
    rng = np.random.default_rng(13)
    asr = md.StreamingAsr(store, cfg)
    for t in range(30):
        asr.step(rng.normal(size=cfg.d_enc) * 2)
    asr.flush()
    for t in asr.hypothesis:
        assert 0 <= t < cfg.vocab_size


def test_sessions_are_independent(store):
    system = md.InferenceSystem.joint(store, CFG)
    rng = np.random.default_rng(14)
    frames = rng.normal(size=(8, CFG.d_in))
    s1 = system.new_session()
    s2 = system.new_session()
    for t in range(8):
        s1.enc_step(frames[t])
    out1 = s2.enc_step(frames[0])
    fresh = md.StreamingEncoder(store, CFG).step(frames[0])
    np.testing.assert_allclose(out1, fresh, atol=1e-12)


def test_inference_system_factories(store):
    joint = md.InferenceSystem.joint(store, CFG)
    assert joint.ep_active_source == SwitchSource.SHARED_LATENT
    joint_audio = md.InferenceSystem.joint(
        store, CFG, ep_active_source=SwitchSource.AUDIO_FRAMES)
    assert joint_audio.ep_active_source == SwitchSource.AUDIO_FRAMES
    other = md.init_params(CFG, seed=99)
    sep = md.InferenceSystem.separate(other, store, CFG)
    assert sep.ep_active_source == SwitchSource.AUDIO_FRAMES
    assert sep.ep_store is other
    assert sep.asr_store is store


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip(tmp_path, store):
    path = tmp_path / "model.json"
    md.save_checkpoint(store, CFG, path, meta={"arm": "E3"})
    loaded, cfg, meta = md.load_checkpoint(path)
    assert cfg == CFG
    assert meta == {"arm": "E3"}
    for name in store.names():
        np.testing.assert_array_equal(loaded.params[name], store.params[name])


def test_checkpoint_config_mismatch(tmp_path, store):
    path = tmp_path / "model.json"
    md.save_checkpoint(store, CFG, path)
    with pytest.raises(nk.CheckpointError):
        md.load_checkpoint(path, expect_cfg=ModelConfig(d_in=5))


def test_checkpoint_missing_config_block(tmp_path, store):
    path = tmp_path / "raw.json"
    nk.save_params(store, path)
    with pytest.raises(nk.CheckpointError, match="model-config"):
        md.load_checkpoint(path)
