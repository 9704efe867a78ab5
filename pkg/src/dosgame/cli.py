"""Command-line entry point: ``dosgame <subcommand> [--config FILE] [--seed N] [--out-dir DIR]``.

Every subcommand writes its outputs plus a ``manifest.json`` into
``--out-dir``; ``dosgame rerun --manifest FILE`` replays a manifest.
Failures print a JSON error object on stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import experiments as ex
from .agents import config_hash, load_checkpoint, save_checkpoint
from .detector import load_model, save_model
from .features import write_feature_csv
from .netsim import synthetic_trace, write_trace_csv

logger = logging.getLogger("dosgame")

EVAL_COLUMNS = ("episode", "asr", "bandwidth", "cost", "trigger_rate", "avg_duration", "avg_rate")


class CliError(Exception):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _require(path, what):
    if path is None:
        raise CliError(f"missing prerequisite: {what} (pass --{what.replace(' ', '-')})")
    p = Path(path)
    if not p.is_file():
        raise CliError(f"missing prerequisite: {what} file {p} does not exist")
    return p


def _write_manifest(out: Path, command: str, args: dict, cfg: ex.ExperimentConfig, seeds, artifacts: dict):
    doc = {
        "tool": ex.tool_version(),
        "command": command,
        "args": args,
        "seeds": list(seeds),
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg.to_dict()),
        "artifacts": {k: str(Path(v).name) for k, v in artifacts.items()},
        "sha256": {k: _sha256(Path(v)) for k, v in artifacts.items()},
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return doc


def _seeds(cfg, seed):
    return [seed] if seed is not None else list(cfg.seeds)


# --- subcommands --------------------------------------------------------------

def cmd_gen_trace(cfg, a, out):
    trace_kw = dict(cfg.trace)
    for key in ("mean_load", "n_intervals", "interval", "tcp_fraction", "burstiness", "diurnal_amplitude",
                "diurnal_period"):
        v = a.get(key)
        if v is not None:
            trace_kw[key] = v
    if a.get("seed") is not None:
        trace_kw["seed"] = a["seed"]
    path = out / "trace.csv"
    write_trace_csv(synthetic_trace(**trace_kw), path)
    print(json.dumps({"trace": str(path), "params": trace_kw}))
    return {"trace": path}, [trace_kw.get("seed", 0)]


def cmd_train_detector(cfg, a, out):
    seed = a.get("seed") or 0
    source = a.get("source") or cfg.detector["source"]
    if a.get("kind"):
        cfg.detector["kind"] = a["kind"]
    agent = None
    if source != "ldos":
        agent, _ = load_checkpoint(_require(a.get("teacher"), "teacher"))
    model, report, examples = ex.build_detector(cfg, source, agent, seed)
    model_path, corpus_path, report_path = out / "detector.json", out / "corpus.csv", out / "detector_report.json"
    save_model(model, model_path)
    write_feature_csv([(e.features, e.label) for e in examples], corpus_path)
    doc = {"source": source, "kind": model.kind, **asdict(report)}
    report_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(doc, sort_keys=True))
    return {"detector": model_path, "corpus": corpus_path, "report": report_path}, [seed]


def cmd_baseline(cfg, a, out):
    detector = load_model(_require(a.get("detector"), "detector"))
    if a.get("variant"):
        cfg.ldos["variant"] = a["variant"]
    seeds = _seeds(cfg, a.get("seed"))
    rows = ex.baseline_table(cfg, detector, seeds)
    path = out / "baseline.csv"
    ex.write_rows(rows, path, ex.BASELINE_COLUMNS)
    for r in rows:
        print(f"row {r['row']}: d={r['duration']} T={r['period']} R={r['rate']} asr={r['asr']:.3f} "
              f"bw={r['bandwidth']:.2f} cost={r['cost_per_cycle']:.2f} trig={r['trigger_rate']:.2f}")
    return {"baseline": path}, seeds


def cmd_train_teacher(cfg, a, out):
    detector = load_model(_require(a.get("detector"), "detector"))
    seeds = _seeds(cfg, a.get("seed"))
    episodes = a.get("episodes")
    artifacts = {}
    for s in seeds:
        agent, curves = ex.train_teacher(cfg, detector, s, episodes)
        ck, cv = out / f"teacher_seed{s}.npz", out / f"teacher_curve_seed{s}.csv"
        save_checkpoint(agent, ck, {"role": "teacher", "seed": s, "config": cfg.to_dict()})
        ex.write_rows(curves, cv, ex.CURVE_COLUMNS)
        tail = curves[-50:]
        print(json.dumps({"seed": s, "final_asr": ex.summarize(tail)[0], "episodes": len(curves)}))
        artifacts[f"teacher_seed{s}"] = ck
        artifacts[f"curve_seed{s}"] = cv
    return artifacts, seeds


def cmd_train_student(cfg, a, out):
    detector = load_model(_require(a.get("detector"), "detector"))
    teacher, _ = load_checkpoint(_require(a.get("teacher"), "teacher"))
    seed = a.get("seed") if a.get("seed") is not None else cfg.seeds[0]
    env = ex.make_env(cfg, detector, seed)
    if teacher.in_dim != env.state_dim:
        raise CliError(f"teacher checkpoint expects {teacher.in_dim} inputs but the configured state has "
                       f"{env.state_dim}")
    student, s_curves, t_curves = ex.run_reciprocal(cfg, teacher, detector, seed, a.get("episodes"))
    sp, tp, cp = out / "student.npz", out / "teacher_finetuned.npz", out / "student_curves.csv"
    save_checkpoint(student, sp, {"role": "student", "seed": seed, "config": cfg.to_dict()})
    save_checkpoint(teacher, tp, {"role": "teacher", "seed": seed, "config": cfg.to_dict()})
    rows = [{"agent": "student", **r} for r in s_curves] + [{"agent": "teacher", **r} for r in t_curves]
    ex.write_rows(rows, cp, ("agent", *ex.CURVE_COLUMNS))
    print(json.dumps({"student_final_asr": ex.summarize(s_curves[-50:])[0] if s_curves else None,
                      "teacher_final_asr": ex.summarize(t_curves[-50:])[0] if t_curves else None}))
    return {"student": sp, "teacher_finetuned": tp, "curves": cp}, [seed]


def cmd_eval(cfg, a, out):
    detector = load_model(_require(a.get("detector"), "detector"))
    agent, _ = load_checkpoint(_require(a.get("agent"), "agent"))
    observe = a.get("observe") or ("full" if agent.in_dim > cfg.env_kwargs().get("n_partial", 3) else "partial")
    seeds = _seeds(cfg, a.get("seed"))
    rows = []
    for s in seeds:
        rows += [{"seed": s, **r} for r in ex.evaluate_agent(cfg, agent, detector, s, a.get("episodes"), observe,
                                                           a.get("noise_sigma") or 0.0)]
    path = out / "eval.csv"
    ex.write_rows(rows, path, ("seed", *EVAL_COLUMNS))
    mean, std = ex.summarize(rows)
    print(json.dumps({"asr_mean": mean, "asr_std": std, "bandwidth_mean": ex.summarize(rows, "bandwidth")[0]}))
    return {"eval": path}, seeds


def cmd_detector_matrix(cfg, a, out):
    teacher, _ = load_checkpoint(_require(a.get("teacher"), "teacher"))
    seed = a.get("seed") if a.get("seed") is not None else cfg.seeds[0]
    rows, reports = ex.detector_matrix(cfg, teacher, seed, a.get("episodes"))
    path, rp = out / "detector_matrix.csv", out / "detector_reports.json"
    ex.write_rows(rows, path, ("detector", *ex.CURVE_COLUMNS))
    rp.write_text(json.dumps({k: asdict(v) for k, v in reports.items()}, indent=2, sort_keys=True) + "\n",
                  encoding="utf-8")
    for src in ex.SOURCES:
        tail = [r for r in rows if r["detector"] == src][-50:]
        print(json.dumps({"detector": src, "final_asr": ex.summarize(tail)[0] if tail else None,
                          "held_out_accuracy": reports[src].accuracy}))
    return {"matrix": path, "reports": rp}, [seed]


def cmd_noise_sweep(cfg, a, out):
    detector = load_model(_require(a.get("detector"), "detector"))
    agent, _ = load_checkpoint(_require(a.get("agent"), "agent"))
    observe = a.get("observe") or ("full" if agent.in_dim > cfg.env_kwargs().get("n_partial", 3) else "partial")
    sigmas = a.get("sigmas") or cfg.sigmas()
    seeds = _seeds(cfg, a.get("seed"))
    rows = []
    for s in seeds:
        rows += [{"seed": s, **r} for r in ex.noise_sweep(cfg, agent, detector, s, observe, sigmas, a.get("episodes"))]
    path = out / "noise_sweep.csv"
    ex.write_rows(rows, path, ("seed", "sigma", *EVAL_COLUMNS))
    for sigma in sigmas:
        sub = [r for r in rows if r["sigma"] == sigma]
        print(json.dumps({"sigma": sigma, "asr_mean": ex.summarize(sub)[0],
                          "bandwidth_mean": ex.summarize(sub, "bandwidth")[0]}))
    return {"noise_sweep": path}, seeds


COMMANDS = {
    "gen-trace": cmd_gen_trace,
    "train-detector": cmd_train_detector,
    "baseline": cmd_baseline,
    "train-teacher": cmd_train_teacher,
    "train-student": cmd_train_student,
    "detector-matrix": cmd_detector_matrix,
    "noise-sweep": cmd_noise_sweep,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dosgame", description="Attacker/detector game on a simulated bottleneck link.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=int, help="run a single seed instead of the config's seed list")
        sp.add_argument("--out-dir", default=".", help="directory for outputs and manifest.json")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    g = common(sub.add_parser("gen-trace", help="write a synthetic background trace CSV"))
    g.add_argument("--mean-load", type=float)
    g.add_argument("--n-intervals", type=int)
    g.add_argument("--interval", type=float)
    g.add_argument("--tcp-fraction", type=float)
    g.add_argument("--burstiness", type=float)
    g.add_argument("--diurnal-amplitude", type=float)
    g.add_argument("--diurnal-period", type=float)

    d = common(sub.add_parser("train-detector", help="train and save a detector"))
    d.add_argument("--source", choices=ex.SOURCES)
    d.add_argument("--kind", choices=("knn", "gbdt"))
    d.add_argument("--teacher", help="attacker checkpoint generating adados traffic")

    b = common(sub.add_parser("baseline", help="periodic LDoS schedules against a detector"))
    b.add_argument("--detector")
    b.add_argument("--variant", choices=("single", "double", "randomised"))

    t = common(sub.add_parser("train-teacher", help="PPO training of a full-state attacker"))
    t.add_argument("--detector")
    t.add_argument("--episodes", type=int)

    s = common(sub.add_parser("train-student", help="reciprocal training of a delay-only attacker"))
    s.add_argument("--detector")
    s.add_argument("--teacher")
    s.add_argument("--episodes", type=int)

    m = common(sub.add_parser("detector-matrix", help="train attackers against ldos/adados/mixed detectors"))
    m.add_argument("--teacher")
    m.add_argument("--episodes", type=int)

    n = common(sub.add_parser("noise-sweep", help="evaluate one agent under each delay-noise level"))
    n.add_argument("--detector")
    n.add_argument("--agent")
    n.add_argument("--observe", choices=("full", "partial"))
    n.add_argument("--sigmas", type=float, nargs="+")
    n.add_argument("--episodes", type=int)

    e = common(sub.add_parser("eval", help="evaluate a saved agent"))
    e.add_argument("--detector")
    e.add_argument("--agent")
    e.add_argument("--observe", choices=("full", "partial"))
    e.add_argument("--noise-sigma", type=float)
    e.add_argument("--episodes", type=int)

    r = sub.add_parser("rerun", help="replay a manifest into a new output directory")
    r.add_argument("--manifest", required=True)
    r.add_argument("--out-dir", required=True)
    r.add_argument("-v", "--verbose", action="store_true")
    return p


def run_command(command: str, cfg: ex.ExperimentConfig, args: dict, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    artifacts, seeds = COMMANDS[command](cfg, dict(args), out)
    return _write_manifest(out, command, args, cfg, seeds, artifacts)


def _resolve_inputs(args: dict) -> dict:
    # store absolute paths so a manifest can be replayed from anywhere
    for key in ("detector", "teacher", "agent"):
        if args.get(key):
            args[key] = str(Path(args[key]).resolve())
    return args


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if ns.command == "rerun":
            doc = json.loads(Path(ns.manifest).read_text(encoding="utf-8"))
            cfg = ex.ExperimentConfig.from_dict(doc["config"])
            run_command(doc["command"], cfg, doc["args"], Path(ns.out_dir))
            return 0
        cfg = ex.load_config(ns.config) if ns.config else ex.ExperimentConfig()
        args = {k: v for k, v in vars(ns).items() if k not in ("command", "config", "out_dir", "verbose")}
        run_command(ns.command, cfg, _resolve_inputs(args), Path(ns.out_dir))
        return 0
    except Exception as exc:  # report every failure as machine-readable JSON
        logger.debug("command failed", exc_info=True)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": ns.command}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
