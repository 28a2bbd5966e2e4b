"""Command-line front end.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error,
3 replay divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Sequence

from .agent import Capability, EpisodeSettings, dumps_trace, reference_agent, run_episode
from .attribution import attribute, repair
from .faults import FaultConfig, wrap_with_faults
from .fuzzer import (
    CampaignConfig,
    ConfigError,
    Variant,
    campaign_report,
    derive_seed,
    dumps_records,
    history_csv,
    load_config,
    repair_table,
    run_campaign,
    table_csv,
)
from .instruction import instruction_from_dict
from .oracles import OracleConfig, detect_errors
from .world import ViewConfig, dumps_scene, generate_scene, scene_from_dict

log = logging.getLogger("capfuzz")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_DIVERGED = 0, 1, 2, 3
OUT_ENV = "CAPFUZZ_OUT"
ABLATION_VARIANTS = (Variant.FULL, Variant.NO_FOF, Variant.NO_COF, Variant.NO_FEEDBACK)


class UsageError(Exception):
    pass


class DivergenceError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ------------------------------------------------------------------ output

def _write(path: Path, text: str) -> None:
    """Write via a sibling temp file and rename, so readers never see half a file."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_all(out: Path, files: dict[str, str]) -> None:
    # Everything is computed before the first write; a crash mid-run leaves nothing behind.
    for name, text in files.items():
        _write(out / name, text)


def _json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or "capfuzz-out")


def _config(args) -> CampaignConfig:
    cfg = load_config(args.config, args.set or ())
    if args.seed is not None:
        cfg = cfg.replace(master_seed=args.seed)
    return cfg


def _read_records(path: str) -> list[dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            lines = [ln for ln in fh if ln.strip()]
    except OSError as exc:
        raise UsageError(f"cannot read corpus {path}: {exc.strerror}") from None
    try:
        return [json.loads(ln) for ln in lines]
    except json.JSONDecodeError as exc:
        raise UsageError(f"corpus {path} is not line-delimited JSON: {exc}") from None


def _format_table(rows: list[dict]) -> str:
    lines = [f"{'Capability':<12}{'#Fail':>7}{'#Repa':>7}{'%Repa':>9}"]
    for r in rows:
        rate = "-" if r["rate"] is None else f"{100 * r['rate']:.2f}%"
        lines.append(f"{r['capability']:<12}{r['fail']:>7}{r['repaired']:>7}{rate:>9}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- commands

def cmd_gen_scenes(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    files, manifest = {}, []
    for i in range(args.count):
        seed = derive_seed(cfg.master_seed, "scene", i) % (2 ** 31)
        scene = generate_scene(seed, cfg.scene)
        name = f"scenes/scene-{i:04d}.json"
        files[name] = dumps_scene(scene)
        manifest.append({"index": i, "scene_seed": seed, "file": name, "rooms": len(scene.rooms),
                         "objects": len(scene.objects)})
    files["scenes/manifest.json"] = _json({"master_seed": cfg.master_seed, "scenes": manifest})
    _write_all(out, files)
    print(f"wrote {args.count} scenes to {out / 'scenes'}")
    return EXIT_OK


def _progress(verbose: bool):
    if not verbose:
        return None

    def report(it, row):
        log.info("iter %d %s %s", it, row["outcome"], row["source"] or "")
    return report


def cmd_run(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    result = run_campaign(cfg, _progress(args.verbose))
    report = campaign_report(result)
    table = repair_table(result.records)
    _write_all(out, {
        "failures.jsonl": dumps_records(result.records),
        "report.json": _json(report),
        "corpus.json": _json(report["corpus"]),
        "history.csv": history_csv(result.history),
        "repair.csv": table_csv(table),
        "config.json": _json(cfg.to_dict()),
    })
    print(f"{cfg.variant.value}: {result.failures} failures in {cfg.budget} iterations -> {out}")
    return EXIT_OK


def _replay_record(rec: dict):
    scene = scene_from_dict(rec["scene"])
    instr = instruction_from_dict(rec["instruction"])
    faults = FaultConfig.from_dict(rec["faults"])
    st = rec["settings"]
    settings = EpisodeSettings(st["delta"], st["t_max"], st["step_factor"], st["step_floor"], ViewConfig())
    agent = wrap_with_faults(reference_agent(), faults)
    trace = run_episode(scene, instr, agent, settings, (), rec["fault_seed"])
    trace.errors = detect_errors(trace, OracleConfig(**rec["oracle"]))
    return scene, instr, agent, settings, trace


def _divergences(rec: dict, trace) -> list[str]:
    got_outcome = {"kind": trace.outcome.kind.value,
                   "final_distance": None if trace.outcome.final_distance == float("inf")
                   else trace.outcome.final_distance,
                   "steps_used": trace.outcome.steps_used}
    checks = {
        "outcome": (rec.get("outcome"), got_outcome),
        "injected_faults": (rec.get("injected_faults"), [list(x) for x in trace.fault_log]),
        "flagged_errors": (rec.get("flagged_errors"), [e.to_dict() for e in trace.errors]),
    }
    # Compare through JSON so tuples and lists normalise alike.
    return [k for k, (a, b) in checks.items() if json.dumps(a, sort_keys=True) != json.dumps(b, sort_keys=True)]


def cmd_replay(args) -> int:
    records = {r["case_id"]: r for r in _read_records(args.corpus)}
    rec = records.get(args.case_id)
    if rec is None:
        raise UsageError(f"unknown case id {args.case_id!r} in {args.corpus}")
    *_, trace = _replay_record(rec)
    out = _out_dir(args)
    _write(out / f"replay-{args.case_id}.json", dumps_trace(trace))
    bad = _divergences(rec, trace)
    if bad:
        raise DivergenceError(f"case {args.case_id} diverged from the stored record in: {', '.join(bad)}")
    print(f"case {args.case_id}: {trace.outcome.kind.value} (matches stored record)")
    return EXIT_OK


def _select(records: list[dict], args) -> list[dict]:
    chosen = records
    if args.case:
        wanted = set(args.case)
        chosen = [r for r in chosen if r["case_id"] in wanted]
    if args.capability:
        chosen = [r for r in chosen if r.get("failure_source") and r["failure_source"][0] == args.capability]
    return chosen


def cmd_repair(args) -> int:
    records = _select(_read_records(args.corpus), args)
    rows = []
    for rec in records:
        scene, instr, agent, settings, trace = _replay_record(rec)
        if trace.outcome.success:
            log.warning("case %s no longer fails; skipped", rec["case_id"])
            continue
        attr = attribute(trace, trace.errors, scene, instr, agent, settings, args.budget, exhaustive=False)
        fixed = None
        if attr.failure_source is not None:
            fixed = repair(trace, attr, trace.errors, scene, instr, agent, settings).success
        rows.append({"case_id": rec["case_id"], **attr.to_dict(),
                     "repair_outcome": None if fixed is None else ("Success" if fixed else "Failure")})
    table = repair_table(rows)
    out = _out_dir(args)
    text = _format_table(table)
    _write_all(out, {"repair.csv": table_csv(table), "repair.txt": text, "repair_cases.jsonl": dumps_records(rows)})
    sys.stdout.write(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = _config(args)
    out = _out_dir(args)
    seeds = [base.master_seed + k for k in range(args.runs)]
    series: dict[str, list[list[int]]] = {}
    for variant in ABLATION_VARIANTS:
        per_seed = []
        for s in seeds:
            res = run_campaign(base.replace(variant=variant, master_seed=s, repair=False))
            per_seed.append(res.cumulative())
            log.info("%s seed %d: %d failures", variant.value, s, res.failures)
        series[variant.value] = per_seed
    mean = {v: [sum(col) / len(col) for col in zip(*runs)] for v, runs in series.items()}
    header = ["iteration", *mean]
    lines = [",".join(header)]
    for i in range(base.budget):
        lines.append(",".join([str(i + 1), *(f"{mean[v][i]:.4f}" for v in mean)]))
    final = {v: (m[-1] if m else 0.0) for v, m in mean.items()}
    _write_all(out, {
        "ablation.json": _json({"seeds": seeds, "budget": base.budget, "series": series,
                                "mean_cumulative": mean, "final_mean": final}),
        "ablation.csv": "\n".join(lines) + "\n",
    })
    for v, f in final.items():
        print(f"{v:<12}{f:10.2f}")
    return EXIT_OK


def cmd_report(args) -> int:
    src = Path(args.run_dir) / "report.json"
    try:
        report = json.loads(src.read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read {src}: {exc.strerror}") from None
    ledger = report["ledger"]
    lines = [f"variant: {report['variant']}", f"master seed: {report['master_seed']}",
             f"budget: {report['budget']}", f"failures: {report['total_failures']}",
             f"unattributed: {ledger['unattributed']}", "failure sources:"]
    for cap in Capability:
        lines.append(f"  {cap.value:<11} {ledger['counts'].get(cap.value, 0)}")
    text = "\n".join(lines) + "\n\n" + _format_table(report["repair"])
    out = Path(args.out) if args.out else Path(args.run_dir)
    _write_all(out, {"summary.txt": text, "history.csv": history_csv(report["history"]),
                     "repair.csv": table_csv(report["repair"])})
    sys.stdout.write(text)
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="capfuzz", description="Capability-oriented fuzzing of a grid navigation agent.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        sp.add_argument("-o", "--out", help=f"output directory (default: ${OUT_ENV} or ./capfuzz-out)")
        if config:
            sp.add_argument("-c", "--config", help="YAML campaign config")
            sp.add_argument("--seed", type=int, help="master seed; beats the config and --set")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                            help="override a config key (dotted paths allowed); beats the file")

    sp = sub.add_parser("gen-scenes", help="generate scenes and write them as JSON")
    common(sp)
    sp.add_argument("-n", "--count", type=int, default=10)
    sp.set_defaults(func=cmd_gen_scenes)

    sp = sub.add_parser("run", help="run one fuzzing campaign")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("replay", help="re-execute a stored failure and check it matches")
    common(sp, config=False)
    sp.add_argument("corpus", help="failures.jsonl")
    sp.add_argument("case_id")
    sp.set_defaults(func=cmd_replay)

    sp = sub.add_parser("repair", help="oracle-based repair over stored failures")
    common(sp, config=False)
    sp.add_argument("corpus", help="failures.jsonl")
    sp.add_argument("--case", action="append", help="restrict to this case id (repeatable)")
    sp.add_argument("--capability", choices=[c.value for c in Capability],
                    help="restrict to cases with this stored failure source")
    sp.add_argument("--budget", type=int, default=32, help="attribution interventions per case")
    sp.set_defaults(func=cmd_repair)

    sp = sub.add_parser("ablate", help="compare Full against its ablated variants")
    common(sp)
    sp.add_argument("--runs", type=int, default=10, help="paired seeds, starting at the master seed")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("report", help="summarise a run directory")
    sp.add_argument("run_dir")
    sp.add_argument("-o", "--out", help="where to write exports (default: the run directory)")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"capfuzz: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"capfuzz: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"capfuzz: divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except Exception as exc:  # noqa: BLE001 - top-level diagnostic
        log.debug("runtime failure", exc_info=True)
        print(f"capfuzz: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
