"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 invalid input or configuration,
3 runtime failure. Every command takes ``--workdir`` (all relative paths are
resolved against it), ``--config`` (JSON) and repeatable ``--set key=value``
overrides. Progress is written to standard error as JSON lines; the same
events minus wall-clock time go to ``<workdir>/logs/<command>.jsonl``.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import cfm as C
from . import checks
from . import dialm as D
from . import dualtrack as dt
from . import pipeline as P
from .blockmask import MaskSpec, build_mask
from .config import AppConfig, ConfigError, load_config
from .nn.checkpoint import (CheckpointError, atomic_write_bytes, checkpoint_save, file_sha256,
                            load_checkpoint_with_meta, save_tensors)
from .nn.rng import Rng
from .nn.tensor import NonFiniteError
from .synthgen import (GrammarParams, PIPELINE_VIOLATIONS, gen_corpus, gen_feature_corpus, gen_pipeline_fixture,
                       write_pipeline_fixture)

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class InvalidInput(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


class Run:
    """Per-invocation context: resolved config, paths and the event log."""

    def __init__(self, command: str, args, cfg: AppConfig):
        self.command, self.args, self.cfg = command, args, cfg
        self.workdir = Path(args.workdir)
        self.t0 = time.monotonic()
        self.events: list[dict] = []
        self.log({"event": "start", "command": command, "seed": cfg.seed, "config_hash": cfg.digest()})

    def path(self, p: str | Path) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.workdir / p

    def default(self, section: str, name: str) -> Path:
        return self.path(Path(getattr(self.cfg.paths, section)) / name)

    def log(self, event: dict) -> None:
        self.events.append(event)
        wall = round(time.monotonic() - self.t0, 3)
        print(json.dumps({**event, "wall": wall}, sort_keys=True), file=sys.stderr, flush=True)

    def close(self) -> None:
        self.log({"event": "done", "command": self.command})
        body = "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)
        atomic_write_bytes(self.default("logs", f"{self.command}.jsonl"), body.encode())


def _write_json(path: Path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode())


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise InvalidInput(f"{what} not found: {path}")
    return path


def _grammar(cfg: AppConfig) -> GrammarParams:
    d = cfg.data
    return GrammarParams(turns=tuple(d.turns), turn_len=tuple(d.turn_len), overlap_prob=d.overlap_prob,
                         overlap_len=tuple(d.overlap_len), backchannel_prob=d.backchannel_prob,
                         vocab=cfg.dialm.vocab, d_spk=cfg.dialm.d_spk, seed=cfg.seed)


def _feature_records(items) -> list[dict]:
    return [{"tokens": [int(t) for t in toks], "spk": [float(v) for v in spk], "features": feats.tolist()}
            for toks, spk, feats in items]


def _read_feature_items(path: Path):
    out = []
    for rec in dt.read_jsonl(path):
        try:
            out.append((np.asarray(rec["tokens"], dtype=np.int64), np.asarray(rec["spk"], dtype=np.float64),
                        np.asarray(rec["features"], dtype=np.float64)))
        except KeyError as exc:
            raise InvalidInput(f"{path}: feature record lacks {exc}") from None
    if not out:
        raise InvalidInput(f"{path}: no items")
    return out


def _read_dialogues(path: Path, need_tracks: bool = True):
    out = []
    for rec in dt.read_jsonl(path):
        script, t1, t2 = dt.dialogue_from_dict(rec)
        if need_tracks and (t1 is None or t2 is None):
            raise InvalidInput(f"{path}: dialogue without gold tracks")
        out.append((script, t1, t2))
    if not out:
        raise InvalidInput(f"{path}: no dialogues")
    return out


def _load_model(path: Path, kind: str):
    ps, meta = load_checkpoint_with_meta(_require(path, f"{kind} checkpoint"))
    if kind == "dialm":
        return D.model_from_checkpoint(ps, meta)
    return C.model_from_checkpoint(ps, meta)


# -- commands -------------------------------------------------------------------

def cmd_gen_data(run: Run) -> None:
    cfg, a = run.cfg, run.args
    out = run.path(a.out) if a.out else run.default("data", "")
    files = {}
    what = set(a.what)
    if "dialogue" in what or "all" in what:
        gp = _grammar(cfg)
        for tag, n in (("train", cfg.data.n_train), ("heldout", cfg.data.n_heldout)):
            recs = [dt.dialogue_to_dict(g.script, *g.tracks) for g in gen_corpus(gp, n, cfg.seed, tag)]
            files[f"dialogues_{tag}.jsonl"] = recs
    if "features" in what or "all" in what:
        d = cfg.data
        files["features_train.jsonl"] = _feature_records(
            gen_feature_corpus(d.cfm_items, d.cfm_tokens, d.feature_sigma, cfg.seed, "train"))
        files["features_heldout.jsonl"] = _feature_records(
            gen_feature_corpus(d.cfm_heldout, d.cfm_heldout_tokens, d.feature_sigma, cfg.seed, "heldout"))
    digests = {}
    for name, recs in files.items():
        dt.write_jsonl(out / name, recs)
        digests[name] = file_sha256(out / name)
        run.log({"event": "wrote", "file": name, "records": len(recs)})
    if "pipeline" in what or "all" in what:
        viol = tuple(PIPELINE_VIOLATIONS) if a.violations == "all" else tuple(
            v for v in (a.violations or "").split(",") if v)
        fx = gen_pipeline_fixture(cfg.seed, viol, chunk_seconds=30)
        for key, p in write_pipeline_fixture(fx, out / "pipeline").items():
            digests[f"pipeline/{p.name}"] = file_sha256(p)
        _write_json(out / "pipeline" / "config.json", {"pipeline": {"chunk_seconds": fx.chunk_seconds}})
        run.log({"event": "wrote", "file": "pipeline/", "violations": list(viol)})
    _write_json(out / "manifest.json", {"seed": cfg.seed, "config_hash": cfg.digest(), "files": digests})


def cmd_train_dialm(run: Run) -> None:
    cfg, a = run.cfg, run.args
    data = _require(run.path(a.data) if a.data else run.default("data", "dialogues_train.jsonl"), "dataset")
    out = run.path(a.out) if a.out else run.default("checkpoints", "dialm.dlsp")
    dataset = _read_dialogues(data)
    settings = cfg.dialm_train
    if a.steps is not None:
        settings = replace(settings, steps=a.steps)
    res = D.train_dialm(cfg.dialm, dataset, settings, on_event=run.log)
    meta = {**D.model_meta(res.model), "seed": cfg.seed, "config_hash": cfg.digest()}
    checkpoint_save(res.model.params, out, meta)
    _write_json(out.with_suffix(".json"), {
        "seed": cfg.seed, "config_hash": cfg.digest(), "data_sha256": file_sha256(data),
        "checkpoint_sha256": file_sha256(out), "steps": settings.steps,
        "initial_loss": res.losses[0] if res.losses else None,
        "final_loss": float(np.mean(res.losses[-50:])) if res.losses else None})


def cmd_train_cfm(run: Run) -> None:
    cfg, a = run.cfg, run.args
    data = _require(run.path(a.data) if a.data else run.default("data", "features_train.jsonl"), "dataset")
    out = run.path(a.out) if a.out else run.default("checkpoints", "cfm.dlsp")
    items = _read_feature_items(data)
    settings = cfg.cfm_train
    if a.steps is not None:
        settings = replace(settings, steps=a.steps)
    res = C.train_cfm(cfg.cfm, items, settings, on_event=run.log)
    meta = {**C.model_meta(res.model), "seed": cfg.seed, "config_hash": cfg.digest()}
    checkpoint_save(res.model.params, out, meta)
    _write_json(out.with_suffix(".json"), {
        "seed": cfg.seed, "config_hash": cfg.digest(), "data_sha256": file_sha256(data),
        "checkpoint_sha256": file_sha256(out), "steps": settings.steps,
        "initial_loss": res.losses[0] if res.losses else None,
        "final_loss": float(np.mean(res.losses[-50:])) if res.losses else None})


def synthesize(lm: D.DialmModel, am: C.CfmModel, script: dt.DialogueScript, plan: C.ChunkPlan, rng: Rng,
               strict: bool = True) -> tuple[tuple, np.ndarray, np.ndarray]:
    """Tracks, then per-channel features with silence as zero frames."""
    t1, t2 = D.decode_dialogue(lm, script, lm.config.max_steps - 1, rng.child("lm"))
    runs = [dt.strip_silence(t1), dt.strip_silence(t2)]
    if not runs[0] and not runs[1]:
        raise InvalidInput("empty dialogue: no speech on either channel")
    r = am.config.frame_ratio
    n = len(t1)
    feats = []
    for c, chan_runs in enumerate(runs, start=1):
        f = np.zeros((r * n, am.config.feat_dim))
        for start, toks in chan_runs:
            fm = C.chunk_decode(am, toks, script.prompt(c), plan, rng=rng.child("am").child(c).child(start),
                                strict=strict)
            f[r * start:r * (start + len(toks))] = fm.frames
        feats.append(f)
    if feats[0].shape != feats[1].shape:
        raise RuntimeError("channel feature lengths differ")
    return (t1, t2), feats[0], feats[1]


def cmd_synth(run: Run) -> None:
    cfg, a = run.cfg, run.args
    script_path = _require(run.path(a.script), "script file")
    lm_path = run.path(a.dialm) if a.dialm else run.default("checkpoints", "dialm.dlsp")
    am_path = run.path(a.cfm) if a.cfm else run.default("checkpoints", "cfm.dlsp")
    lm, am = _load_model(lm_path, "dialm"), _load_model(am_path, "cfm")
    out = run.path(a.out) if a.out else run.default("outputs", "synth")
    dialogues = _read_dialogues(script_path, need_tracks=False)
    plan = C.ChunkPlan(am.config.block, cfg.chunk.p, cfg.chunk.q, cfg.chunk.n_ode)
    files, track_recs = {}, []
    for i, (script, _, _) in enumerate(dialogues):
        (t1, t2), f1, f2 = synthesize(lm, am, script, plan, Rng(cfg.seed).child("synth").child(i), cfg.chunk.strict)
        name = f"dialogue_{i:04d}.dlsp"
        save_tensors(out / name, {"channel1": f1, "channel2": f2},
                     {"frames": int(f1.shape[0]), "frame_ratio": am.config.frame_ratio, "steps": len(t1)})
        files[name] = file_sha256(out / name)
        track_recs.append(dt.dialogue_to_dict(script, t1, t2))
        run.log({"event": "synth", "dialogue": i, "steps": len(t1), "frames": int(f1.shape[0])})
    dt.write_jsonl(out / "tracks.jsonl", track_recs)
    files["tracks.jsonl"] = file_sha256(out / "tracks.jsonl")
    _write_json(out / "synth.json", {
        "seed": cfg.seed, "config_hash": cfg.digest(), "chunk_plan": plan.to_dict(),
        "script_sha256": file_sha256(script_path), "dialm_sha256": file_sha256(lm_path),
        "cfm_sha256": file_sha256(am_path), "files": files})


def cmd_pipeline(run: Run) -> None:
    cfg, a = run.cfg, run.args
    src = _require(run.path(a.input), "input manifest")
    out = run.path(a.out) if a.out else run.default("outputs", "pipeline")
    utts, reports = P.run_pipeline(P.read_manifest(src), cfg.pipeline, src.parent)
    P.emit_manifest(utts, out / "utterances.jsonl")
    P.emit_manifest(reports, out / "reports.jsonl")
    dropped = sum(1 for r in reports if r["kind"] == "filter" and not r["keep"])
    run.log({"event": "pipeline", "utterances": len(utts), "dropped": dropped})
    _write_json(out / "pipeline.json", {
        "seed": cfg.seed, "config_hash": cfg.digest(), "input_sha256": file_sha256(src),
        "utterances_sha256": file_sha256(out / "utterances.jsonl"),
        "reports_sha256": file_sha256(out / "reports.jsonl")})


def cmd_mask_dump(run: Run) -> None:
    a = run.args
    try:
        m = build_mask(a.n, MaskSpec(a.b, a.tb, a.tf))
    except ValueError as exc:
        raise InvalidInput(str(exc)) from None
    print(m.to_json() if a.format == "json" else m.to_text())


def cmd_eval(run: Run) -> None:
    cfg, a = run.cfg, run.args
    results = []
    if a.suite == "invariants":
        results = checks.invariant_suite(cfg.seed)
    elif a.suite == "dialm":
        model = _load_model(run.path(a.checkpoint) if a.checkpoint else run.default("checkpoints", "dialm.dlsp"),
                            "dialm")
        data = _require(run.path(a.data) if a.data else run.default("data", "dialogues_heldout.jsonl"), "dataset")
        results = [checks.dialm_agreement(model, _read_dialogues(data), cfg.seed)]
    else:
        model = _load_model(run.path(a.checkpoint) if a.checkpoint else run.default("checkpoints", "cfm.dlsp"),
                            "cfm")
        data = _require(run.path(a.data) if a.data else run.default("data", "features_heldout.jsonl"), "dataset")
        plan = C.ChunkPlan(model.config.block, cfg.chunk.p, cfg.chunk.q, cfg.chunk.n_ode)
        results = [checks.cfm_reconstruction(model, _read_feature_items(data), plan, cfg.seed)]
    for r in results:
        run.log({"event": "eval", **r})
    print(json.dumps(results, sort_keys=True, indent=2))
    if a.out:
        _write_json(run.path(a.out), results)


def cmd_grad_check(run: Run) -> None:
    a = run.args
    results = []
    if a.model in ("dialm", "both"):
        results.append(checks.grad_check_dialm(seed=run.cfg.seed, max_checks=a.max_checks))
    if a.model in ("cfm", "both"):
        results.append(checks.grad_check_cfm(seed=run.cfg.seed, max_checks=a.max_checks))
    for r in results:
        run.log({"event": "grad_check", **r})
    print(json.dumps(results, sort_keys=True, indent=2))
    if not all(r["ok"] for r in results):
        raise RuntimeError("gradient check failed")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-dialm": cmd_train_dialm,
    "train-cfm": cmd_train_cfm,
    "synth": cmd_synth,
    "pipeline": cmd_pipeline,
    "mask-dump": cmd_mask_dump,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default=".", help="base directory for every relative path")
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key, e.g. dialm.layers=2 (value parsed as JSON)")

    parser = _Parser(prog="dialoflow", description="Dual-track dialogue synthesis toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write synthetic corpora and pipeline fixtures")
    p.add_argument("--out", help="output directory (default: paths.data)")
    p.add_argument("--what", nargs="+", choices=["all", "dialogue", "features", "pipeline"], default=["all"])
    p.add_argument("--violations", default="all",
                   help="comma-separated planted pipeline violations, 'all' or '' (default: all)")

    for name, data_help in (("train-dialm", "dialogue JSONL"), ("train-cfm", "feature JSONL")):
        p = sub.add_parser(name, parents=[common], help=f"train from {data_help}")
        p.add_argument("--data", help=data_help)
        p.add_argument("--out", help="checkpoint path")
        p.add_argument("--steps", type=int, help="override the configured step count")

    p = sub.add_parser("synth", parents=[common], help="scripts to dual-channel features")
    p.add_argument("--script", required=True, help="dialogue script JSONL")
    p.add_argument("--dialm", help="DiaLM checkpoint")
    p.add_argument("--cfm", help="CFM checkpoint")
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("pipeline", parents=[common], help="input manifest to utterance manifest")
    p.add_argument("--input", required=True)
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("mask-dump", parents=[common], help="print a block attention mask")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--b", type=int, required=True)
    p.add_argument("--tb", type=int, default=0)
    p.add_argument("--tf", type=int, default=0)
    p.add_argument("--format", choices=["text", "json"], default="text")

    p = sub.add_parser("eval", parents=[common], help="invariant suites and agreement metrics")
    p.add_argument("--suite", choices=["invariants", "dialm", "cfm"], default="invariants")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--out", help="also write results to this JSON file")

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient check on micro models")
    p.add_argument("--model", choices=["dialm", "cfm", "both"], default="both")
    p.add_argument("--max-checks", type=int, default=300)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        if not Path(args.workdir).is_dir():
            raise InvalidInput(f"workdir does not exist: {args.workdir}")
        cfg_path = None
        if args.config:
            cfg_path = Path(args.config)
            cfg_path = cfg_path if cfg_path.is_absolute() else Path(args.workdir) / cfg_path
        cfg = load_config(cfg_path, args.overrides)
        run = Run(args.command, args, cfg)
        COMMANDS[args.command](run)
        if args.command != "mask-dump":
            run.close()
        return EXIT_OK
    except NonFiniteError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, InvalidInput, CheckpointError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
