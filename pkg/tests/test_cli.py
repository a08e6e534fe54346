"""CLI tests: subcommands, manifests, exit codes, byte determinism."""

import json

import pytest

from epswitch import cli


SYNTH_CFG = {"n_utterances": 8, "max_words": 1, "max_tokens_per_word": 1,
             "min_final_silence": 3}
TRAIN_CFG = {"steps": 15, "batch_size": 4}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Corpus plus one trained E3 and one trained B1 checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    synth = root / "synth.json"
    synth.write_text(json.dumps(SYNTH_CFG))
    tcfg = root / "train.json"
    tcfg.write_text(json.dumps(TRAIN_CFG))
    corpus = root / "corpus.jsonl"
    assert cli.main(["gen-data", "--config", str(synth), "--seed", "0",
                     "--out", str(corpus)]) == 0
    e3 = root / "e3.json"
    assert cli.main(["train", "--arm", "E3", "--config", str(tcfg),
                     "--seed", "0", "--corpus", str(corpus),
                     "--out", str(e3)]) == 0
    b1 = root / "b1.json"
    assert cli.main(["train", "--arm", "B1", "--config", str(tcfg),
                     "--seed", "0", "--corpus", str(corpus),
                     "--out", str(b1)]) == 0
    return {"root": root, "corpus": corpus, "e3": e3, "b1": b1,
            "synth": synth, "tcfg": tcfg}


def test_gen_data_outputs_and_manifest(workspace):
    corpus = workspace["corpus"]
    assert corpus.exists()
    manifest = json.loads((workspace["root"] / "corpus.jsonl.manifest.json").read_text())
    assert manifest["command"] == "gen-data"
    assert manifest["seed"] == 0
    assert str(corpus) in manifest["outputs"]
    lines = corpus.read_text().splitlines()
    assert len(lines) == 1 + SYNTH_CFG["n_utterances"]


def test_gen_data_deterministic(workspace, tmp_path):
    out2 = tmp_path / "again.jsonl"
    assert cli.main(["gen-data", "--config", str(workspace["synth"]),
                     "--seed", "0", "--out", str(out2)]) == 0
    assert out2.read_bytes() == workspace["corpus"].read_bytes()


def test_train_writes_checkpoint_and_report(workspace):
    assert workspace["e3"].exists()
    report = json.loads((workspace["root"] / "e3.json.report.json").read_text())
    assert report["arm"] == "E3"
    assert len(report["loss_multi"]) == TRAIN_CFG["steps"]
    assert report["switch_counts"]["audio"] + report["switch_counts"]["latent"] > 0


def test_train_b1_writes_two_checkpoints(workspace):
    root = workspace["root"]
    assert (root / "b1.json.ep.json").exists()
    assert (root / "b1.json.asr.json").exists()


def test_train_deterministic(workspace, tmp_path):
    out2 = tmp_path / "e3b.json"
    assert cli.main(["train", "--arm", "E3", "--config", str(workspace["tcfg"]),
                     "--seed", "0", "--corpus", str(workspace["corpus"]),
                     "--out", str(out2)]) == 0
    assert out2.read_bytes() == workspace["e3"].read_bytes()


def test_eval_short_mode(workspace, tmp_path, capsys):
    out = tmp_path / "eval.csv"
    rc = cli.main(["eval", "--ckpt", str(workspace["e3"]),
                   "--corpus", str(workspace["corpus"]),
                   "--mode", "short", "--out", str(out)])
    assert rc == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "wer,ep50,ep90"
    printed = capsys.readouterr().out.splitlines()
    assert printed[0].split() == ["wer", "ep50", "ep90"]


def test_eval_continuous_mode(workspace, tmp_path):
    out = tmp_path / "evalc.csv"
    rc = cli.main(["eval", "--ckpt", str(workspace["e3"]),
                   "--corpus", str(workspace["corpus"]),
                   "--mode", "continuous", "--out", str(out)])
    assert rc == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "wer,del,ins,sub,speech_pct"


def test_eval_separate_system(workspace, tmp_path):
    out = tmp_path / "evalb1.csv"
    rc = cli.main(["eval",
                   "--ckpt", str(workspace["root"] / "b1.json.asr.json"),
                   "--ep-ckpt", str(workspace["root"] / "b1.json.ep.json"),
                   "--corpus", str(workspace["corpus"]),
                   "--out", str(out)])
    assert rc == 0


def test_eval_deterministic(workspace, tmp_path):
    args = ["eval", "--ckpt", str(workspace["e3"]),
            "--corpus", str(workspace["corpus"]), "--mode", "short"]
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    assert cli.main(args + ["--out", str(a)]) == 0
    assert cli.main(args + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_stream_trace(workspace, tmp_path, capsys):
    out = tmp_path / "trace.csv"
    rc = cli.main(["stream", "--ckpt", str(workspace["e3"]),
                   "--corpus", str(workspace["corpus"]),
                   "--utt-id", "utt00000", "--out", str(out)])
    assert rc == 0
    header = out.read_text().splitlines()[0]
    assert header.startswith("t_ms,fsm_state,source,p_speech")
    assert "utt00000" in capsys.readouterr().out


def test_stream_deterministic(workspace, tmp_path):
    args = ["stream", "--ckpt", str(workspace["e3"]),
            "--corpus", str(workspace["corpus"]), "--utt-id", "utt00001"]
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    assert cli.main(args + ["--out", str(a)]) == 0
    assert cli.main(args + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_stream_unknown_utt_is_usage_error(workspace, tmp_path, capsys):
    rc = cli.main(["stream", "--ckpt", str(workspace["e3"]),
                   "--corpus", str(workspace["corpus"]),
                   "--utt-id", "nope", "--out", str(tmp_path / "x.csv")])
    assert rc == 2
    assert "error" in capsys.readouterr().err


def test_sweep_produces_grid_and_curve(workspace, tmp_path, capsys):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"theta_eoq": [0.6, 0.9], "theta_eos": [0.5],
                                "wait_ms": [0, 60]}))
    out = tmp_path / "sweep.csv"
    rc = cli.main(["sweep", "--ckpt", str(workspace["e3"]),
                   "--corpus", str(workspace["corpus"]),
                   "--config", str(grid), "--wer-budget", "400",
                   "--out", str(out)])
    assert rc == 0
    assert len(out.read_text().splitlines()) == 1 + 4
    assert (tmp_path / "sweep.csv.curve.csv").exists()
    assert "selected:" in capsys.readouterr().out


def test_sweep_infeasible_budget_exits_1(workspace, tmp_path, capsys):
    out = tmp_path / "sweep.csv"
    rc = cli.main(["sweep", "--ckpt", str(workspace["e3"]),
                   "--corpus", str(workspace["corpus"]),
                   "--wer-budget", "-5", "--out", str(out)])
    assert rc == 1
    assert "error" in capsys.readouterr().err


def test_bad_config_is_exit_2(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"n_utterances": -3}')
    rc = cli.main(["gen-data", "--config", str(bad),
                   "--out", str(tmp_path / "c.jsonl")])
    assert rc == 2
    capsys.readouterr()
    rc = cli.main(["train", "--arm", "E3", "--config", str(bad),
                   "--corpus", str(workspace["corpus"]),
                   "--out", str(tmp_path / "m.json")])
    assert rc == 2


def test_missing_files_fail_cleanly(workspace, tmp_path, capsys):
    rc = cli.main(["gen-data", "--config", str(tmp_path / "absent.json"),
                   "--out", str(tmp_path / "c.jsonl")])
    assert rc == 2
    rc = cli.main(["eval", "--ckpt", str(tmp_path / "absent.json"),
                   "--corpus", str(workspace["corpus"]),
                   "--out", str(tmp_path / "e.csv")])
    assert rc == 1
    capsys.readouterr()


def test_checkpoint_corpus_mismatch(workspace, tmp_path, capsys):
    other = tmp_path / "other.jsonl"
    cfg = tmp_path / "scfg.json"
    cfg.write_text(json.dumps({"n_utterances": 2, "d_in": 4, "vocab_size": 4}))
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(other)]) == 0
    rc = cli.main(["eval", "--ckpt", str(workspace["e3"]),
                   "--corpus", str(other), "--out", str(tmp_path / "e.csv")])
    assert rc != 0
    capsys.readouterr()
