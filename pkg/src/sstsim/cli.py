"""Experiment runner.

Subcommands:

  run          simulate one scenario (optionally several replications) and
               write a results bundle per replication
  sweep        repeat runs across one swept dimension and aggregate
  graph-props  generate graphs and report their structural properties

A results bundle is a directory holding the transfer log, the derived metric
CSVs, the final preference profiles, and a manifest. The manifest is itself a
valid config file carrying the fully resolved settings (including the
replication's own seed), so `run --config <manifest> --out <dir>` reproduces
the bundle's CSVs byte for byte.

Exit codes: 0 success, 1 bad configuration or usage, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import sys
from pathlib import Path

from . import __version__
from .config import ScenarioConfig, expand_preset, format_config, parse_config
from .errors import ConfigError
from .graphgen import (
    BaParams,
    ToParams,
    assign_sat_peers,
    generate_ba,
    generate_toivonen,
    graph_properties,
    p_nsn,
)
from .metrics import (
    TimeSeriesPoint,
    audit_run,
    duration_series,
    files_per_user,
    non_friend_upload_series,
    sat_correlations,
    write_correlations_csv,
    write_durations_csv,
    write_files_per_user_csv,
    write_graph_props_csv,
    write_nonfriend_csv,
    write_pnsn_csv,
)
from .prefs import export_profiles
from .simcore import check_world_invariants, init_world, run_world

SWEEP_DIMENSIONS = ("sat_ratio", "node_count", "mi_model", "preset")


# ---------------------------------------------------------------------------
# config assembly
# ---------------------------------------------------------------------------


def _resolve_config(args) -> ScenarioConfig:
    """File -> preset overlay -> individual flag overrides, then validate."""
    config = parse_config(args.config) if args.config else ScenarioConfig()
    if args.preset:
        config = expand_preset(args.preset, config)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "reps", None) is not None:
        overrides["reps"] = args.reps
    if overrides:
        config = dataclasses.replace(config, **overrides)
    for warning in config.validate():
        print(f"warning: {warning}", file=sys.stderr)
    return config


def _rep_config(base: ScenarioConfig, rep: int) -> ScenarioConfig:
    """The self-contained config of replication `rep`: its own seed, one rep,
    no baked-in output path."""
    return dataclasses.replace(base, seed=base.seed + rep, reps=1, out_dir="")


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def _write_manifest(path: Path, config: ScenarioConfig, note: str) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# sstsim {__version__} run manifest\n")
        fh.write(f"# {note}\n")
        fh.write(format_config(config))


def run_one(config: ScenarioConfig, out_dir: Path, note: str = "single run") -> None:
    """Simulate `config` and write its bundle into `out_dir`.

    Raises on invariant violations or failed audits rather than writing a
    bundle that lies.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    world = init_world(config)
    run_world(world)
    check_world_invariants(world)
    sizes = {i: item.size_bytes for i, item in world.catalog.items()}
    report = audit_run(world.log, world.records, sizes)
    if not report.clean:
        raise RuntimeError(
            f"run audit failed ({len(report.problems)} problems); first: "
            f"{report.problems[0]}"
        )

    end_s = float(config.sim_duration_s)
    bucket = config.bucket_s
    world.log.write_csv(out_dir / "transfers.csv")
    write_durations_csv(
        out_dir / "durations.csv", duration_series(world.records, bucket, end_s=end_s)
    )
    write_nonfriend_csv(
        out_dir / "nonfriend.csv",
        non_friend_upload_series(world.log, bucket, end_s=end_s),
        bucket,
    )
    users = config.node_count - config.seeders
    write_files_per_user_csv(
        out_dir / "files_per_user.csv",
        files_per_user(world.records, users, bucket, end_s=end_s),
        bucket,
    )
    user_records = [r for r in world.records if not r.was_prefetch]
    if len(user_records) >= 2:
        corr_flag, corr_buddies = sat_correlations(world.records, world.graph)
    else:
        corr_flag = corr_buddies = math.nan
    write_correlations_csv(
        out_dir / "correlations.csv", [(config.mi_model, corr_flag, corr_buddies)]
    )
    export_profiles(world.profiles, out_dir / "profiles.csv")
    _write_manifest(out_dir / "manifest.txt", config, note)


def cmd_run(args) -> int:
    config = _resolve_config(args)
    out = Path(args.out)
    for rep in range(config.reps):
        rep_dir = out if config.reps == 1 else out / f"rep{rep:03d}"
        note = f"replication {rep} of {config.reps} (base seed {config.seed})"
        run_one(_rep_config(config, rep), rep_dir, note)
    return 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def _parse_values(dimension: str, text: str) -> list:
    tokens = [t.strip() for t in text.split(",") if t.strip()]
    if not tokens:
        raise ConfigError(["--values must name at least one value"])
    try:
        if dimension == "sat_ratio":
            return [float(t) for t in tokens]
        if dimension == "node_count":
            return [int(t) for t in tokens]
    except ValueError as exc:
        raise ConfigError([f"bad value for {dimension} sweep: {exc}"]) from None
    return tokens  # mi_model / preset keep their string tokens


def _graph_for(config: ScenarioConfig, model: str, n: int, seed: int):
    if model == "ba":
        return generate_ba(n, BaParams(m0=config.ba_m0, m=config.ba_m), seed)
    return generate_toivonen(
        n, ToParams(r_choices=config.to_r_choices, p_mean=config.to_p_mean), seed
    )


def _sweep_pnsn(config: ScenarioConfig, dimension: str, values, out: Path) -> list[str]:
    """Graph-level sweep: no protocol simulation, just flag assignment and the
    no-sat-neighbor probability, averaged over replications."""
    rows = []
    for model in ("ba", "to"):
        for value in values:
            ratio = value if dimension == "sat_ratio" else config.sat_ratio
            n = value if dimension == "node_count" else config.node_count
            samples = []
            for rep in range(config.reps):
                seed = config.seed + rep
                graph = assign_sat_peers(_graph_for(config, model, n, seed), ratio, seed)
                samples.append(p_nsn(graph))
            rows.append((model, value, sum(samples) / len(samples)))
    write_pnsn_csv(out / "pnsn.csv", rows)
    return []


def _sweep_correlations(config: ScenarioConfig, values, out: Path) -> list[str]:
    failures = []
    rows = []
    for token in values:
        flags, buddies = [], []
        for rep in range(config.reps):
            rep_dir = out / token / f"rep{rep:03d}"
            try:
                rep_cfg = dataclasses.replace(_rep_config(config, rep), mi_model=token)
                rep_cfg.validate()
                run_one(rep_cfg, rep_dir, f"mi_model sweep value {token}, rep {rep}")
                corr = _read_correlation_row(rep_dir / "correlations.csv")
            except Exception as exc:
                failures.append(f"mi_model={token},rep={rep}: {exc}")
                continue
            flags.append(corr[0])
            buddies.append(corr[1])
        rows.append((token, _nanmean(flags), _nanmean(buddies)))
    write_correlations_csv(out / "correlations.csv", rows)
    return failures


def _sweep_presets(config: ScenarioConfig, values, out: Path) -> list[str]:
    failures = []
    bucket = config.bucket_s
    for preset_id in values:
        try:
            swept = expand_preset(preset_id, config)
        except ConfigError as exc:
            failures.append(f"preset={preset_id}: {exc}")
            continue
        totals: list[float] = []
        counts: list[int] = []
        for rep in range(config.reps):
            rep_dir = out / preset_id / f"rep{rep:03d}"
            try:
                run_one(
                    _rep_config(swept, rep),
                    rep_dir,
                    f"preset sweep value {preset_id}, rep {rep}",
                )
            except Exception as exc:
                failures.append(f"preset={preset_id},rep={rep}: {exc}")
                continue
            _accumulate_durations(rep_dir / "durations.csv", totals, counts)
        pooled = [
            TimeSeriesPoint(
                bucket_end_s=(i + 1) * bucket,
                mean_duration_s=totals[i] / counts[i] if counts[i] else math.nan,
                non_friend_bytes=0,
                completed_count=counts[i],
            )
            for i in range(len(counts))
        ]
        write_durations_csv(out / f"durations_{preset_id}.csv", pooled)
    return failures


def _accumulate_durations(path: Path, totals: list[float], counts: list[int]) -> None:
    """Fold one durations.csv into pooled per-bucket sums (mean*count trick
    recovers the per-bucket duration total without reparsing the log)."""
    with open(path) as fh:
        next(fh)
        for i, line in enumerate(fh):
            _, mean_text, count_text = line.rstrip("\n").split(",")
            while len(totals) <= i:
                totals.append(0.0)
                counts.append(0)
            count = int(count_text)
            if count:
                totals[i] += float(mean_text) * count
                counts[i] += count


def _read_correlation_row(path: Path) -> tuple[float, float]:
    with open(path) as fh:
        next(fh)
        _, flag_text, buddies_text = next(fh).rstrip("\n").split(",")
    return float(flag_text), float(buddies_text)


def _nanmean(values: list[float]) -> float:
    usable = [v for v in values if not math.isnan(v)]
    return sum(usable) / len(usable) if usable else math.nan


def cmd_sweep(args) -> int:
    config = _resolve_config(args)
    values = _parse_values(args.dimension, args.values)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.dimension in ("sat_ratio", "node_count"):
        failures = _sweep_pnsn(config, args.dimension, values, out)
    elif args.dimension == "mi_model":
        failures = _sweep_correlations(config, values, out)
    else:
        failures = _sweep_presets(config, values, out)
    if failures:
        with open(out / "failures.txt", "w", newline="\n") as fh:
            fh.write("".join(line + "\n" for line in failures))
        print(f"sweep finished with {len(failures)} failed runs", file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------------------
# graph-props
# ---------------------------------------------------------------------------


def cmd_graph_props(args) -> int:
    config = ScenarioConfig()
    rows = []
    for rep in range(args.reps):
        graph = _graph_for(config, args.model, args.nodes, args.seed + rep)
        props = graph_properties(graph)
        rows.append(
            (
                args.model,
                args.nodes,
                props.edge_count,
                props.average_degree,
                props.diameter,
                props.average_clustering_coefficient,
                props.average_path_length,
                props.total_triangles,
            )
        )
    if args.out:
        write_graph_props_csv(args.out, rows)
    else:
        write_graph_props_csv(sys.stdout, rows)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sstsim",
        description="social P2P + satellite broadcast distribution simulator",
    )
    parser.add_argument("--version", action="version", version=f"sstsim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate one scenario")
    run.add_argument("--config", help="flat key=value scenario file (or a manifest)")
    run.add_argument("--preset", choices=sorted("abcdefghi"), help="feature preset")
    run.add_argument("--seed", type=int, help="override base seed")
    run.add_argument("--reps", type=int, help="override replication count")
    run.add_argument("--out", required=True, help="output directory")
    run.set_defaults(handler=cmd_run)

    sweep = sub.add_parser("sweep", help="run a one-dimensional scenario sweep")
    sweep.add_argument("--dimension", required=True, choices=SWEEP_DIMENSIONS)
    sweep.add_argument("--values", required=True, help="comma-separated sweep values")
    sweep.add_argument("--config", help="base scenario file")
    sweep.add_argument("--preset", choices=sorted("abcdefghi"), help="base preset")
    sweep.add_argument("--seed", type=int, help="override base seed")
    sweep.add_argument("--reps", type=int, help="override replication count")
    sweep.add_argument("--out", required=True, help="output directory")
    sweep.set_defaults(handler=cmd_sweep)

    props = sub.add_parser("graph-props", help="report graph structural properties")
    props.add_argument("--model", required=True, choices=("ba", "to"))
    props.add_argument("--nodes", required=True, type=int)
    props.add_argument("--seed", type=int, default=1)
    props.add_argument("--reps", type=int, default=1)
    props.add_argument("--out", help="CSV path (default: stdout)")
    props.set_defaults(handler=cmd_graph_props)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
