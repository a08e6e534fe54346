"""Command-line entry point wiring the library into reproducible experiments.

Subcommands: gen-data, train, eval, sweep, stream. Every command writes a
run manifest (config snapshot, seed, paths, wall-clock) beside its outputs.
Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time

from . import __version__
from . import corpus as cp
from . import evalkit as ev
from . import models as md
from . import trainer as tr
from .runtime import Mode, Thresholds, export_trace, run_session


class UsageError(Exception):
    pass


def _load_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise UsageError(f"{what} file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"bad {what} file {path}: {exc}") from exc


def _write_manifest(out_path, command, args_dict, seed, inputs, outputs):
    manifest = {
        "command": command,
        "config": args_dict,
        "seed": seed,
        "inputs": inputs,
        "outputs": outputs,
        "tool_version": __version__,
        "wall_clock_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    with open(f"{out_path}.manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def _args_dict(args):
    return {k: v for k, v in vars(args).items() if k != "func"}


def _thresholds_from_args(args) -> Thresholds:
    return Thresholds(theta_vad=args.theta_vad, theta_eoq=args.theta_eoq,
                      theta_eos=args.theta_eos, wait_ms=args.wait_ms)


def _load_system(args):
    store, cfg, meta = tr.load_checkpoint(args.ckpt)
    arm = (meta or {}).get("arm")
    if args.ep_ckpt:
        ep_store, ep_cfg, _ = tr.load_checkpoint(args.ep_ckpt)
        if ep_cfg != cfg:
            raise UsageError(
                f"checkpoint configs differ: {args.ep_ckpt} vs {args.ckpt}")
        return md.InferenceSystem.separate(ep_store, store, cfg), cfg
    source = (md.SwitchSource.AUDIO_FRAMES if arm == "E1"
              else md.SwitchSource.SHARED_LATENT)
    return md.InferenceSystem.joint(store, cfg, ep_active_source=source), cfg


def _load_records(path, cfg=None):
    records, meta = cp.read_corpus(path)
    if cfg is not None:
        if meta.d_in != cfg.d_in or meta.vocab_size > cfg.vocab_size:
            raise UsageError(
                f"corpus {path} (d_in={meta.d_in}, vocab={meta.vocab_size}) does "
                f"not match checkpoint (d_in={cfg.d_in}, vocab={cfg.vocab_size})")
    return records, meta


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    raw = _load_json(args.config, "config") if args.config else {}
    try:
        cfg = cp.SynthConfig(**raw)
    except TypeError as exc:
        raise UsageError(f"bad synth config: {exc}") from exc
    try:
        records = cp.generate_synthetic_corpus(cfg, args.seed)
    except cp.ConfigError as exc:
        raise UsageError(str(exc)) from exc
    meta = cp.CorpusMeta(d_in=cfg.d_in, vocab_size=cfg.vocab_size,
                         frame_period_ms=cfg.frame_period_ms)
    cp.write_corpus(records, args.out, meta)
    _write_manifest(args.out, "gen-data", dataclasses.asdict(cfg), args.seed,
                    [], [args.out])
    print(f"wrote {len(records)} utterances to {args.out}")
    return 0


def cmd_train(args):
    raw = _load_json(args.config, "config") if args.config else {}
    raw["arm"] = args.arm
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        cfg = tr.TrainConfig(**raw)
        cfg.validate()
    except (TypeError, tr.TrainerError) as exc:
        raise UsageError(f"bad train config: {exc}") from exc
    records, meta = cp.read_corpus(args.corpus)
    mcfg = tr.default_model_config(meta)
    result = tr.train(cfg, records, mcfg)

    outputs = []
    if cfg.arm == "B1":
        for part in ("ep", "asr"):
            path = f"{args.out}.{part}.json"
            tr.save_checkpoint(result.stores[part], mcfg, path, arm="B1")
            outputs.append(path)
    else:
        tr.save_checkpoint(result.stores["joint"], mcfg, args.out, arm=cfg.arm)
        outputs.append(args.out)

    report_path = f"{args.out}.report.json"
    with open(report_path, "w") as fh:
        json.dump({
            "arm": result.report.arm,
            "steps": result.report.steps,
            "loss_multi": result.report.loss_multi,
            "loss_asr": result.report.loss_asr,
            "loss_ep": result.report.loss_ep,
            "switch_counts": result.report.switch_counts,
        }, fh)
        fh.write("\n")
    outputs.append(report_path)
    _write_manifest(args.out, "train", dataclasses.asdict(cfg), cfg.seed,
                    [args.corpus], outputs)
    sc = result.report.switch_counts
    print(f"arm {cfg.arm}: final loss {result.report.loss_multi[-1]:.4f} "
          f"(switch audio/latent = {sc['audio']}/{sc['latent']})")
    for path in outputs[:-1]:
        print(f"checkpoint: {path}")
    return 0


def cmd_eval(args):
    system, cfg = _load_system(args)
    records, _ = _load_records(args.corpus, cfg)
    th = _thresholds_from_args(args)
    mode = Mode.SHORT_QUERY if args.mode == "short" else Mode.CONTINUOUS
    point = ev.evaluate_point(system, records, th, mode=mode)

    if mode == Mode.SHORT_QUERY:
        header = ["wer", "ep50", "ep90"]
        values = [point.wer.wer, point.latency.ep50, point.latency.ep90]
    else:
        header = ["wer", "del", "ins", "sub", "speech_pct"]
        values = [point.wer.wer, point.wer.del_rate, point.wer.ins_rate,
                  point.wer.sub_rate, point.speech_pct]
    print(" ".join(header))
    print(" ".join(format(v, ".9g") for v in values))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerow([format(v, ".9g") for v in values])
    _write_manifest(args.out, "eval", _args_dict(args) | {"thresholds": dataclasses.asdict(th)},
                    None, [args.ckpt, args.corpus], [args.out])
    return 0


def cmd_sweep(args):
    system, cfg = _load_system(args)
    records, _ = _load_records(args.corpus, cfg)
    grid = _load_json(args.config, "grid config") if args.config else {}
    try:
        result = ev.sweep(
            system, records,
            theta_vad=args.theta_vad,
            theta_eoq_grid=grid.get("theta_eoq", [0.5, 0.7, 0.9]),
            theta_eos_grid=grid.get("theta_eos", [0.5, 1.0, 2.0]),
            wait_ms_grid=grid.get("wait_ms", [0, 60, 120]),
            wer_budget=args.wer_budget,
        )
    except ev.BudgetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    ev.write_sweep_csv(result.points, args.out)
    curve = ev.tradeoff_curve(result.points)
    curve_path = f"{args.out}.curve.csv"
    ev.write_curve_csv(curve, curve_path)
    sel = result.selected
    print("selected: theta_eoq=%g theta_eos=%g w=%d wer=%.9g ep50=%g ep90=%g" % (
        sel.thresholds.theta_eoq, sel.thresholds.theta_eos,
        sel.thresholds.wait_ms, sel.wer.wer, sel.latency.ep50,
        sel.latency.ep90))
    _write_manifest(args.out, "sweep",
                    {"grid": grid, "theta_vad": args.theta_vad,
                     "wer_budget": args.wer_budget},
                    None, [args.ckpt, args.corpus], [args.out, curve_path])
    return 0


def cmd_stream(args):
    system, cfg = _load_system(args)
    records, _ = _load_records(args.corpus, cfg)
    matches = [r for r in records if r.id == args.utt_id]
    if not matches:
        raise UsageError(f"utterance {args.utt_id!r} not found in {args.corpus}")
    th = _thresholds_from_args(args)
    mode = Mode.SHORT_QUERY if args.mode == "short" else Mode.CONTINUOUS
    trace = run_session(matches[0], mode, th, system)
    export_trace(trace, args.out)
    _write_manifest(args.out, "stream",
                    _args_dict(args) | {"thresholds": dataclasses.asdict(th)},
                    None, [args.ckpt, args.corpus], [args.out])
    hyp = " ".join(str(t) for t in trace.hypothesis)
    ep = trace.event.endpoint_ms if trace.event else None
    print(f"{args.utt_id}: {len(trace.rows)} frames, hypothesis [{hyp}], "
          f"endpoint_ms={ep}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_threshold_flags(p):
    p.add_argument("--theta-vad", type=float, default=0.5, dest="theta_vad")
    p.add_argument("--theta-eoq", type=float, default=0.7, dest="theta_eoq")
    p.add_argument("--theta-eos", type=float, default=0.7, dest="theta_eos")
    p.add_argument("--wait-ms", type=int, default=60, dest="wait_ms")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="epswitch",
        description="Joint ASR + endpointer multitask experiments, desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--config", help="SynthConfig JSON file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one experiment arm")
    p.add_argument("--arm", required=True, choices=tr.ARMS)
    p.add_argument("--config", help="TrainConfig JSON file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--ep-ckpt", dest="ep_ckpt",
                   help="separate endpointer checkpoint (B1 systems)")
    p.add_argument("--corpus", required=True)
    p.add_argument("--mode", choices=["short", "continuous"], default="short")
    _add_threshold_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid-search EOQ thresholds")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--ep-ckpt", dest="ep_ckpt")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config", help="grid JSON: theta_eoq/theta_eos/wait_ms lists")
    p.add_argument("--theta-vad", type=float, default=0.5, dest="theta_vad")
    p.add_argument("--wer-budget", type=float, required=True, dest="wer_budget")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("stream", help="trace a single utterance")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--ep-ckpt", dest="ep_ckpt")
    p.add_argument("--corpus", required=True)
    p.add_argument("--utt-id", required=True, dest="utt_id")
    p.add_argument("--mode", choices=["short", "continuous"], default="short")
    _add_threshold_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stream)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, cp.ConfigError, tr.TrainerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (cp.CorpusError, Exception) as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
