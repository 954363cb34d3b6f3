"""Experiment runner: seeded batch execution and comparison tables.

Subcommands:

    run <config>      variant x seed grid -> per-episode JSONL logs,
                      summary.csv, tradeoff.csv
    compare <config>  per-variant aggregates + cost reduction of
                      IDSMPC-SHARP against the safest shielded IDSMPC
    replay <log>      recompute every metric from a log and check the
                      stored summary
    plot-data <csv>   emit gnuplot-ready .dat files from a summary table
    selftest          run the built-in oracle checks

Exit codes: 0 ok, 1 partial failure, 2 config error.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import os
import sys as _sys
from dataclasses import dataclass, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from .errors import InvalidArgumentError
from .planner import PlannerVariant
from .sim import EpisodeLog, ScenarioConfig, closed_loop_cost, collision_rate, efficiency_index, run_episode, safety_index


class ConfigError(Exception):
    def __init__(self, message: str, line: Optional[int] = None, path: str = "<config>"):
        self.line = line
        self.path = path
        where = f"{path}:{line}: " if line else f"{path}: "
        super().__init__(where + message)


class _LineLoader(yaml.SafeLoader):
    """SafeLoader that records the source line of every mapping."""


def _mapping_with_line(loader, node, deep=False):
    mapping = yaml.SafeLoader.construct_mapping(loader, node, deep=deep)
    mapping["__line__"] = node.start_mark.line + 1
    return mapping


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _mapping_with_line)


def _strip_lines(obj):
    if isinstance(obj, dict):
        return {k: _strip_lines(v) for k, v in obj.items() if k != "__line__"}
    if isinstance(obj, list):
        return [_strip_lines(v) for v in obj]
    return obj


@dataclass
class VariantSpec:
    name: str
    label: str
    shielded: Optional[bool]
    planner: Dict
    scenario_overrides: Dict


@dataclass
class ExperimentConfig:
    scenario: ScenarioConfig
    variants: List[VariantSpec]
    seeds: List[int]
    out: str

    @staticmethod
    def load(path: str) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                raw = yaml.load(fh, Loader=_LineLoader)
        except FileNotFoundError:
            raise ConfigError("file not found", path=path)
        except yaml.YAMLError as exc:
            line = getattr(getattr(exc, "problem_mark", None), "line", None)
            raise ConfigError(str(exc.problem or exc), None if line is None else line + 1, path)
        if not isinstance(raw, dict):
            raise ConfigError("top level must be a mapping", path=path)

        def line_of(d, default=None):
            return d.get("__line__", default) if isinstance(d, dict) else default

        top_line = line_of(raw)
        sc_raw = raw.get("scenario", {})
        sc = _strip_lines(sc_raw) if isinstance(sc_raw, dict) else {"scenario": sc_raw}
        valid = {f.name for f in fields(ScenarioConfig)}
        for key in sc:
            if key not in valid:
                raise ConfigError(f"unknown scenario key {key!r}", line_of(sc_raw, top_line), path)
        try:
            scenario = ScenarioConfig(**sc)
        except (InvalidArgumentError, TypeError) as exc:
            raise ConfigError(f"bad scenario section: {exc}", line_of(sc_raw, top_line), path)

        v_raw = raw.get("variants")
        if not v_raw:
            raise ConfigError("at least one variant is required", top_line, path)
        variants = []
        for item in v_raw:
            if isinstance(item, str):
                item = {"name": item}
            ln = line_of(item, top_line)
            item = _strip_lines(item)
            name = item.get("name")
            try:
                PlannerVariant.parse(name)
            except InvalidArgumentError:
                raise ConfigError(f"unknown variant name {name!r}", ln, path)
            label = item.get("label", name)
            overrides = {
                k: v
                for k, v in item.items()
                if k not in ("name", "label", "shielded", "planner")
            }
            for key in overrides:
                if key not in valid:
                    raise ConfigError(f"unknown variant override {key!r}", ln, path)
            variants.append(
                VariantSpec(
                    name=name,
                    label=str(label),
                    shielded=item.get("shielded"),
                    planner=dict(item.get("planner") or {}),
                    scenario_overrides=overrides,
                )
            )
        labels = [v.label for v in variants]
        if len(set(labels)) != len(labels):
            raise ConfigError("variant labels must be unique", top_line, path)

        seeds_raw = raw.get("seeds", [0])
        if isinstance(seeds_raw, dict):
            seeds_raw = _strip_lines(seeds_raw)
            count = int(seeds_raw.get("count", 1))
            offset = int(seeds_raw.get("offset", 0))
            seeds = list(range(offset, offset + count))
        else:
            seeds = [int(s) for s in seeds_raw]
        if not seeds:
            raise ConfigError("at least one seed is required", top_line, path)

        out = raw.get("out", "results")
        return ExperimentConfig(scenario=scenario, variants=variants, seeds=seeds, out=str(out))


def _episode_config(exp: ExperimentConfig, spec: VariantSpec, seed: int) -> ScenarioConfig:
    planner = dict(exp.scenario.planner)
    planner.update(spec.planner)
    updates = dict(spec.scenario_overrides)
    updates["planner"] = planner
    updates["seed"] = seed
    if spec.shielded is not None:
        updates["shielded"] = bool(spec.shielded)
    return replace(exp.scenario, **updates)


def _run_cell(args) -> Tuple[str, int, Optional[dict], Optional[str], str]:
    exp, spec, seed, out_dir = args
    cfg = _episode_config(exp, spec, seed)
    stem = os.path.join(out_dir, f"{spec.label}_seed{seed}")
    try:
        log = run_episode(cfg, spec.name)
    except Exception as exc:
        return spec.label, seed, None, f"{type(exc).__name__}: {exc}", stem
    log.write(stem + ".jsonl")
    with open(stem + ".summary.json", "w") as fh:
        json.dump(log.summary, fh, sort_keys=True, indent=1)
    return spec.label, seed, log.summary, None, stem


_SUMMARY_COLUMNS = ("variant", "seed", "J_cl", "collided", "SI", "EI", "shield_count", "mean_solve_iters")


def run_experiment(config_path: str, jobs: int = 1, seed_offset: int = 0, out: Optional[str] = None) -> int:
    """Run the variant x seed grid; returns the process exit code."""
    try:
        exp = ExperimentConfig.load(config_path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=_sys.stderr)
        return 2
    out_dir = out or exp.out
    os.makedirs(out_dir, exist_ok=True)
    seeds = [s + seed_offset for s in exp.seeds]
    cells = [(exp, spec, seed, out_dir) for spec in exp.variants for seed in seeds]

    results = []
    failures = []
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            for res in pool.map(_run_cell, cells):
                results.append(res)
    else:
        for cell in cells:
            results.append(_run_cell(cell))

    rows = []
    for label, seed, summary, err, stem in results:
        if err is not None:
            failures.append((label, seed, err))
            print(f"FAILED {label} seed {seed}: {err}", file=_sys.stderr)
            continue
        rows.append(
            (
                label,
                seed,
                summary["J_cl"],
                int(summary["collided"]),
                summary["SI"],
                summary["EI"],
                summary["shield_count"],
                summary["mean_solve_iters"],
            )
        )
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(os.path.join(out_dir, "summary.csv"), "w") as fh:
        fh.write(",".join(_SUMMARY_COLUMNS) + "\n")
        for r in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in r) + "\n")

    trade = _tradeoff_table(rows)
    with open(os.path.join(out_dir, "tradeoff.csv"), "w") as fh:
        fh.write("variant,n,mean_J_cl,std_J_cl,collision_rate_pct,mean_shield_count,mean_SI,mean_EI\n")
        for label in sorted(trade):
            t = trade[label]
            fh.write(
                f"{label},{t['n']},{t['mean_J_cl']!r},{t['std_J_cl']!r},"
                f"{t['collision_rate_pct']!r},{t['mean_shield_count']!r},{t['mean_SI']!r},{t['mean_EI']!r}\n"
            )
    print(f"wrote {len(rows)} episode logs + summary.csv + tradeoff.csv under {out_dir}")
    return 1 if failures else 0


def _tradeoff_table(rows: Sequence[Tuple]) -> Dict[str, Dict]:
    table: Dict[str, Dict] = {}
    by_label: Dict[str, List[Tuple]] = {}
    for r in rows:
        by_label.setdefault(r[0], []).append(r)
    for label, rs in by_label.items():
        J = np.array([r[2] for r in rs], dtype=float)
        table[label] = {
            "n": len(rs),
            "mean_J_cl": float(np.mean(J)),
            "std_J_cl": float(np.std(J)),
            "collision_rate_pct": 100.0 * float(np.mean([r[3] for r in rs])),
            "mean_shield_count": float(np.mean([r[6] for r in rs])),
            "mean_SI": float(np.mean([r[4] for r in rs])),
            "mean_EI": float(np.mean([r[5] for r in rs])),
        }
    return table


def _read_summary_rows(path: str) -> List[Tuple]:
    rows = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            vals = line.strip().split(",")
            d = dict(zip(header, vals))
            rows.append(
                (
                    d["variant"],
                    int(d["seed"]),
                    float(d["J_cl"]),
                    int(d["collided"]),
                    float(d["SI"]),
                    float(d["EI"]),
                    int(float(d["shield_count"])),
                    float(d["mean_solve_iters"]),
                )
            )
    return rows


def compare_planners(config_path: str, out: Optional[str] = None) -> int:
    """Aggregate a finished run into the performance-safety report."""
    try:
        exp = ExperimentConfig.load(config_path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=_sys.stderr)
        return 2
    out_dir = out or exp.out
    summary_path = os.path.join(out_dir, "summary.csv")
    if not os.path.exists(summary_path):
        print(f"missing {summary_path}; run the experiment first", file=_sys.stderr)
        return 1
    rows = _read_summary_rows(summary_path)
    if not rows:
        print("summary.csv is empty", file=_sys.stderr)
        return 1
    trade = _tradeoff_table(rows)

    print(f"{'variant':<24}{'n':>4}{'mean J_cl':>14}{'std':>12}{'coll %':>9}{'shields':>9}")
    for label in sorted(trade):
        t = trade[label]
        print(
            f"{label:<24}{t['n']:>4}{t['mean_J_cl']:>14.3f}{t['std_J_cl']:>12.3f}"
            f"{t['collision_rate_pct']:>9.1f}{t['mean_shield_count']:>9.2f}"
        )

    sharp_labels = [v.label for v in exp.variants if PlannerVariant.parse(v.name) is PlannerVariant.IDSMPC_SHARP]
    plain_shielded = [
        v.label
        for v in exp.variants
        if PlannerVariant.parse(v.name) is PlannerVariant.IDSMPC and (v.shielded or exp.scenario.shielded)
    ]
    if sharp_labels and plain_shielded:
        sharp = trade[sharp_labels[0]]
        # Safest shielded plain configuration: fewest collisions, then
        # fewest filter overrides, then lowest cost.
        safest_label = min(
            plain_shielded,
            key=lambda l: (trade[l]["collision_rate_pct"], trade[l]["mean_shield_count"], trade[l]["mean_J_cl"]),
        )
        safest = trade[safest_label]
        reduction = 100.0 * (safest["mean_J_cl"] - sharp["mean_J_cl"]) / safest["mean_J_cl"]
        print(
            f"\ncost reduction of {sharp_labels[0]} vs safest shielded IDSMPC ({safest_label}): "
            f"{reduction:.1f}%  (shield events {sharp['mean_shield_count']:.2f} vs {safest['mean_shield_count']:.2f})"
        )
    return 0


def replay_log(log_path: str) -> int:
    """Recompute the metrics of a stored log and verify its summary."""
    log = EpisodeLog.read(log_path)
    recomputed = {
        "J_cl": closed_loop_cost(log),
        "SI": safety_index(log),
        "EI": efficiency_index(log),
    }
    ok = True
    for key, val in recomputed.items():
        stored = log.summary.get(key)
        match = stored is not None and abs(stored - val) <= 1e-9 * max(1.0, abs(val))
        ok &= match
        print(f"{key}: recomputed {val!r} stored {stored!r} [{'OK' if match else 'MISMATCH'}]")
    print(f"collided: {log.summary.get('collided')}  shield_count: {log.summary.get('shield_count')}")
    return 0 if ok else 1


def plot_data(summary_csv: str, out: Optional[str] = None) -> int:
    """Emit gnuplot-ready .dat files (one per variant plus the trade-off)."""
    rows = _read_summary_rows(summary_csv)
    if not rows:
        print("no rows in summary", file=_sys.stderr)
        return 1
    out_dir = out or os.path.dirname(summary_csv) or "."
    by_label: Dict[str, List[Tuple]] = {}
    for r in rows:
        by_label.setdefault(r[0], []).append(r)
    for label, rs in by_label.items():
        path = os.path.join(out_dir, f"episodes_{label}.dat")
        with open(path, "w") as fh:
            fh.write("# seed J_cl collided SI EI shield_count\n")
            for r in sorted(rs, key=lambda r: r[1]):
                fh.write(f"{r[1]} {r[2]!r} {r[3]} {r[4]!r} {r[5]!r} {r[6]}\n")
    trade = _tradeoff_table(rows)
    with open(os.path.join(out_dir, "tradeoff.dat"), "w") as fh:
        fh.write("# label mean_J_cl std_J_cl collision_rate_pct mean_shield_count\n")
        for label in sorted(trade):
            t = trade[label]
            fh.write(
                f"{label} {t['mean_J_cl']!r} {t['std_J_cl']!r} {t['collision_rate_pct']!r} {t['mean_shield_count']!r}\n"
            )
    print(f"wrote gnuplot data files under {out_dir}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="dualsmpc", description=__doc__)
    sub = parser.add_subparsers(dest="cmd", required=True)

    p_run = sub.add_parser("run", help="run a variant x seed experiment grid")
    p_run.add_argument("config")
    p_run.add_argument("--jobs", type=int, default=1)
    p_run.add_argument("--seed-offset", type=int, default=0)
    p_run.add_argument("--out", default=None)

    p_cmp = sub.add_parser("compare", help="aggregate a finished run")
    p_cmp.add_argument("config")
    p_cmp.add_argument("--out", default=None)

    p_rep = sub.add_parser("replay", help="recompute metrics from a JSONL log")
    p_rep.add_argument("log")

    p_plot = sub.add_parser("plot-data", help="emit gnuplot data files from summary.csv")
    p_plot.add_argument("summary")
    p_plot.add_argument("--out", default=None)

    sub.add_parser("selftest", help="run the built-in oracle checks")

    args = parser.parse_args(argv)
    if args.cmd == "run":
        return run_experiment(args.config, jobs=args.jobs, seed_offset=args.seed_offset, out=args.out)
    if args.cmd == "compare":
        return compare_planners(args.config, out=args.out)
    if args.cmd == "replay":
        return replay_log(args.log)
    if args.cmd == "plot-data":
        return plot_data(args.summary, out=args.out)
    if args.cmd == "selftest":
        from .selftest import run_selftest

        return 0 if run_selftest() else 1
    return 2


if __name__ == "__main__":
    raise SystemExit(main())
