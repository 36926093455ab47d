"""Command-line entry point: ``korora run | attack-matrix | policy-audit``."""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys
from pathlib import Path

from . import audit
from .scenario import PRESETS, ScenarioError, load_policy, load_scenario, silent_corruption

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_ROLLED_BACK = 2
EXIT_ABORTED = 3

_VERDICT_EXIT = {"committed": EXIT_OK, "rolled_back": EXIT_ROLLED_BACK, "aborted": EXIT_ABORTED}


def _seed(args, scenario) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("KORORA_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ScenarioError(f"KORORA_SEED is not an integer: {env!r}") from None
    return scenario.seed


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def _say(args, *parts):
    if not args.quiet:
        print(*parts)


def cmd_run(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
        seed = _seed(args, scenario)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    built = scenario.build(seed=seed)
    report = built.session.run()
    report.timestamp = _now()
    text = report.to_json()
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    _say(args, f"verdict={report.verdict} reason={report.reason} "
               f"bytes={report.metrics.bytes_sent} rounds={report.metrics.rounds}")
    return _VERDICT_EXIT[report.verdict]


def run_matrix(scenario, seed: int, presets=PRESETS) -> list:
    """One isolated session per preset; returns row dicts."""
    rows = []
    for name in presets:
        built = scenario.build(seed=seed, preset=name, adversary_seed=seed)
        report = built.session.run()
        rows.append({
            "preset": name,
            "verdict": report.verdict,
            "reason": report.reason,
            "detections": report.metrics.detections,
            "bytes": report.metrics.bytes_sent,
            "rounds": report.metrics.rounds,
            "downtime": report.metrics.downtime_ticks,
            "plaintext_leaks": report.metrics.plaintext_leaks,
            "silent_corruption": silent_corruption(built, report),
            "report": report,
        })
    return rows


def matrix_ok(rows) -> bool:
    for row in rows:
        if row["silent_corruption"]:
            return False
        if row["preset"] in ("none", "eavesdrop"):
            if row["verdict"] != "committed":
                return False
            if row["preset"] == "eavesdrop" and row["plaintext_leaks"]:
                return False
        elif row["verdict"] == "committed":
            return False
    return True


def format_table(rows) -> str:
    head = f"{'preset':<17} {'verdict':<12} {'reason':<22} {'det':>3} {'bytes':>9} {'rounds':>6} {'downtime':>8}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r['preset']:<17} {r['verdict']:<12} {str(r['reason'] or '-'):<22} "
            f"{r['detections']:>3} {r['bytes']:>9} {r['rounds']:>6} {r['downtime']:>8}"
        )
    return "\n".join(lines)


def cmd_attack_matrix(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
        seed = _seed(args, scenario)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    rows = run_matrix(scenario, seed)
    table = format_table(rows)
    _say(args, table)
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        stamp = _now()
        for row in rows:
            row["report"].timestamp = stamp
            (out / f"{row['preset']}.json").write_text(row["report"].to_json())
        summary = [{k: v for k, v in r.items() if k != "report"} for r in rows]
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        (out / "summary.txt").write_text(table + "\n")
    return EXIT_OK if matrix_ok(rows) else EXIT_ROLLED_BACK


def cmd_policy_audit(args) -> int:
    try:
        state = load_policy(args.fixture)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    lines = audit.audit_lines(state)
    for line in lines:
        print(line)
    cases, mismatches = audit.grid_audit()
    _say(args, f"GRID cases={cases} mismatches={len(mismatches)}")
    return EXIT_OK if not lines and not mismatches else EXIT_ROLLED_BACK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="korora", description="Secure live VM migration simulator")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    common.add_argument("--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", parents=[common], help="run one migration")
    r.add_argument("scenario")
    r.add_argument("-o", "--output", help="report path (default: stdout)")
    r.set_defaults(func=cmd_run)

    m = sub.add_parser("attack-matrix", parents=[common], help="run every adversary preset")
    m.add_argument("scenario")
    m.add_argument("-o", "--output", help="directory for per-preset reports")
    m.set_defaults(func=cmd_attack_matrix)

    a = sub.add_parser("policy-audit", parents=[common], help="audit a policy fixture")
    a.add_argument("fixture")
    a.set_defaults(func=cmd_policy_audit)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
