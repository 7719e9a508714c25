"""Command-line surface: configure, run, summarize, and export plot data.

Subcommands:

    simulate  --config PATH --out DIR [--workers N] [--seed U64]
              [--include-nonconverged]
    summarize --run DIR --layout {s1|s2|s4|grid} [--format {text|csv}]
    plotdata  --run DIR --figure {estimates_box|se_error_lines|type1_lines|power_lines}

Configs are TOML (JSON accepted via a .json extension) with optional
top-level defaults and a list of [[scenario]] tables; a scenario is either
explicit (I, J, K, cohort, effect, theta, models, estimators) or a named
preset expanding to a block of the paper-style tables.  ``SWCRT_WORKERS``
is the fallback for --workers.

Exit codes: 0 success, 2 configuration error, 3 I/O error.  Statistical
failures (non-convergence, estimator breakdowns) never change the exit
code; they are recorded in the outputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from swcrt import __version__
from swcrt.mc import (
    ScenarioConfig,
    ScenarioSummary,
    aggregate,
    binomial_band,
    read_replicates_csv,
    run_scenario,
    summary_csv_rows,
    write_replicates_csv,
    write_summary_csv,
    SUMMARY_COLUMNS,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3

SETTINGS_12 = [
    (i, j, k) for i in (8, 16, 32) for j in (4, 8) for k in (10, 100)
]
ALL_MODELS = ("eq1", "eq2", "eq3", "eq4")
ALL_ESTIMATORS = ("standard", "cr0", "cr2", "cr3")
THETA_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)

_TOP_KEYS = {"master_seed", "n_sim", "alpha", "workers",
             "include_nonconverged", "scenario"}
_SCENARIO_KEYS = {"preset", "I", "J", "K", "cohort", "effect", "theta",
                  "models", "estimators", "n_sim", "alpha"}


class ConfigError(Exception):
    """Malformed run configuration; reported with key context."""


def preset_scenarios(name: str) -> list:
    """Expand a named preset into explicit scenario dicts.

    ``paper-table-s1-<cohort>-<effect>`` covers the 12 (I, J, K) settings
    for the bias table (all four models, no variance estimators);
    ``paper-table-s2``/``-s3`` add the four variance estimators for the
    closed-cohort linear/nonlinear SE-error tables; ``paper-table-s4``/
    ``-s5`` sweep theta over the I=8, J=4 power grid.
    """
    parts = name.split("-")
    if name.startswith("paper-table-s1-") and len(parts) == 5:
        cohort, effect = parts[3], parts[4]
        return [
            {"I": i, "J": j, "K": k, "cohort": cohort, "effect": effect,
             "theta": 0.0, "models": list(ALL_MODELS), "estimators": []}
            for i, j, k in SETTINGS_12
        ]
    if name in ("paper-table-s2", "paper-table-s3"):
        effect = "linear" if name.endswith("s2") else "nonlinear"
        return [
            {"I": i, "J": j, "K": k, "cohort": "closed", "effect": effect,
             "theta": 0.0, "models": list(ALL_MODELS),
             "estimators": list(ALL_ESTIMATORS)}
            for i, j, k in SETTINGS_12
        ]
    if name in ("paper-table-s4", "paper-table-s5"):
        effect = "linear" if name.endswith("s4") else "nonlinear"
        return [
            {"I": 8, "J": 4, "K": k, "cohort": "closed", "effect": effect,
             "theta": t, "models": list(ALL_MODELS),
             "estimators": list(ALL_ESTIMATORS)}
            for k in (10, 100) for t in THETA_GRID
        ]
    raise ConfigError(f"unknown preset {name!r}")


def load_config(path) -> dict:
    """Parse and validate a run config; returns resolved scenario list.

    The result dict has keys: scenarios (list[ScenarioConfig]), workers,
    master_seed.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".json":
            doc = json.loads(raw.decode())
        else:
            doc = tomllib.loads(raw.decode())
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a table/object")

    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    master_seed = doc.get("master_seed", 0)
    if not isinstance(master_seed, int) or master_seed < 0:
        raise ConfigError("master_seed must be a nonnegative integer")
    default_n_sim = doc.get("n_sim", 1000)
    default_alpha = doc.get("alpha", 0.05)
    workers = doc.get("workers")
    exclude = not doc.get("include_nonconverged", False)

    entries = doc.get("scenario", [])
    if not isinstance(entries, list):
        raise ConfigError("'scenario' must be an array of tables")
    expanded: list[dict] = []
    for idx, entry in enumerate(entries, start=1):
        if not isinstance(entry, dict):
            raise ConfigError(f"scenario #{idx}: must be a table")
        unknown = set(entry) - _SCENARIO_KEYS
        if unknown:
            raise ConfigError(f"scenario #{idx}: unknown key(s) {sorted(unknown)}")
        if "preset" in entry:
            for base in preset_scenarios(entry["preset"]):
                merged = dict(base)
                for key in ("n_sim", "alpha", "theta", "models", "estimators"):
                    if key in entry:
                        merged[key] = entry[key]
                expanded.append((idx, merged))
        else:
            expanded.append((idx, dict(entry)))

    scenarios: list[ScenarioConfig] = []
    for idx, entry in expanded:
        try:
            scenarios.append(ScenarioConfig(
                n_clusters=int(entry["I"]),
                n_steps=int(entry["J"]),
                cluster_size=int(entry["K"]),
                cohort=entry["cohort"],
                effect=entry["effect"],
                theta=float(entry.get("theta", 0.0)),
                models=tuple(entry.get("models", list(ALL_MODELS))),
                estimators=tuple(entry.get("estimators", [])),
                n_sim=int(entry.get("n_sim", default_n_sim)),
                alpha=float(entry.get("alpha", default_alpha)),
                master_seed=master_seed,
                exclude_nonconverged=exclude,
            ))
        except KeyError as exc:
            raise ConfigError(f"scenario #{idx}: missing key {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"scenario #{idx}: {exc}") from exc
    if not scenarios:
        raise ConfigError("no scenarios")
    ids = [s.scenario_id for s in scenarios]
    if len(set(ids)) != len(ids):
        dupes = sorted({x for x in ids if ids.count(x) > 1})
        raise ConfigError(f"duplicate scenario id(s): {dupes}")
    return {"scenarios": scenarios, "workers": workers,
            "master_seed": master_seed}


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _scenario_dict(cfg: ScenarioConfig) -> dict:
    return {
        "I": cfg.n_clusters, "J": cfg.n_steps, "K": cfg.cluster_size,
        "cohort": cfg.cohort, "effect": cfg.effect, "theta": cfg.theta,
        "models": [m.value for m in cfg.models],
        "estimators": [e.value for e in cfg.estimators],
        "n_sim": cfg.n_sim, "alpha": cfg.alpha,
        "master_seed": cfg.master_seed,
        "exclude_nonconverged": cfg.exclude_nonconverged,
        "scenario_id": cfg.scenario_id,
    }


def _config_from_dict(entry: dict) -> ScenarioConfig:
    return ScenarioConfig(
        n_clusters=entry["I"], n_steps=entry["J"], cluster_size=entry["K"],
        cohort=entry["cohort"], effect=entry["effect"], theta=entry["theta"],
        models=tuple(entry["models"]), estimators=tuple(entry["estimators"]),
        n_sim=entry["n_sim"], alpha=entry["alpha"],
        master_seed=entry["master_seed"],
        exclude_nonconverged=entry["exclude_nonconverged"],
    )


def cmd_simulate(config_path, out_dir, workers=None, seed=None,
                 include_nonconverged=False) -> dict:
    """Run every scenario in the config; write CSVs and a checksum manifest."""
    resolved = load_config(config_path)
    scenarios = resolved["scenarios"]
    if seed is not None:
        scenarios = [_replace_seed(s, seed) for s in scenarios]
    if include_nonconverged:
        scenarios = [_replace_exclude(s, False) for s in scenarios]
    if workers is None:
        workers = resolved["workers"]
    if workers is None:
        workers = int(os.environ.get("SWCRT_WORKERS", "1"))
    workers = max(1, int(workers))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summaries: list[ScenarioSummary] = []
    outputs: list[Path] = []
    per_scenario_time: dict[str, float] = {}
    t_start = time.perf_counter()
    for cfg in scenarios:
        t0 = time.perf_counter()
        summary, records = run_scenario(cfg, workers=workers)
        per_scenario_time[cfg.scenario_id] = round(time.perf_counter() - t0, 3)
        rep_path = out / f"replicates_{cfg.scenario_id}.csv"
        write_replicates_csv(rep_path, cfg.scenario_id, records)
        outputs.append(rep_path)
        summaries.append(summary)
        print(f"[swcrt] {cfg.scenario_id}: n_sim={cfg.n_sim} "
              f"({per_scenario_time[cfg.scenario_id]:.1f}s)", file=sys.stderr)
    summary_path = out / "summary.csv"
    write_summary_csv(summary_path, summaries)
    outputs.append(summary_path)

    manifest = {
        "tool": "swcrt",
        "version": __version__,
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "config_path": str(config_path),
        "master_seed": scenarios[0].master_seed,
        "workers": workers,
        "scenarios": [_scenario_dict(cfg) for cfg in scenarios],
        "outputs": [
            {"path": p.name, "sha256": _sha256(p), "bytes": p.stat().st_size}
            for p in outputs
        ],
        "timing": {
            "total_seconds": round(time.perf_counter() - t_start, 3),
            "per_scenario_seconds": per_scenario_time,
        },
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return manifest


def _replace_seed(cfg: ScenarioConfig, seed: int) -> ScenarioConfig:
    from dataclasses import replace
    return replace(cfg, master_seed=seed)


def _replace_exclude(cfg: ScenarioConfig, exclude: bool) -> ScenarioConfig:
    from dataclasses import replace
    return replace(cfg, exclude_nonconverged=exclude)


# ---------------------------------------------------------------------------
# summarize
# ---------------------------------------------------------------------------


def _load_run(run_dir):
    run = Path(run_dir)
    manifest_path = run / "manifest.json"
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid manifest {manifest_path}: {exc}") from exc
    return run, manifest


def resummarize(run_dir) -> list:
    """Re-aggregate summaries from persisted replicate records.

    Missing replicate files yield a warning and a gap, not a failure.
    """
    run, manifest = _load_run(run_dir)
    summaries = []
    for entry in manifest["scenarios"]:
        cfg = _config_from_dict(entry)
        rep_path = run / f"replicates_{cfg.scenario_id}.csv"
        if not rep_path.exists():
            print(f"[swcrt] warning: missing {rep_path.name}; leaving a gap",
                  file=sys.stderr)
            continue
        records = [row for _, row in read_replicates_csv(rep_path)]
        summaries.append(aggregate(records, cfg))
    return summaries


def _fmt_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return "" if value != value else f"{value:.3f}"
    return str(value)


def layout_table(summaries, layout: str):
    """(header, rows) for one of the table layouts s1/s2/s4/grid."""
    if layout == "grid":
        header = list(SUMMARY_COLUMNS)
        rows = []
        for s in summaries:
            rows.extend(summary_csv_rows(s))
        return header, rows

    if layout == "s1":
        variants = sorted({(s.config.cohort, s.config.effect) for s in summaries})
        header = ["model", "I", "J", "K"] + [f"bias_{c}_{e}" for c, e in variants]
        cells: dict = {}
        for s in summaries:
            cfg = s.config
            for r in s.rows:
                key = (r.model, cfg.n_clusters, cfg.n_steps, cfg.cluster_size)
                cells.setdefault(key, {})[(cfg.cohort, cfg.effect)] = r.bias
        rows = []
        for key in sorted(cells):
            rows.append(list(key) + [
                _fmt_cell(cells[key].get(v)) for v in variants
            ])
        return header, rows

    if layout in ("s2", "s4"):
        metric = "pct_se_error" if layout == "s2" else "rejection_rate"
        models = sorted({r.model for s in summaries for r in s.rows})
        base_cols = ["cohort", "effect", "I", "J", "K"]
        if layout == "s4":
            base_cols.append("theta")
        header = base_cols + ["estimator"] + models
        cells = {}
        for s in summaries:
            cfg = s.config
            for r in s.rows:
                if not r.estimator:
                    continue
                base = [cfg.cohort, cfg.effect, cfg.n_clusters, cfg.n_steps,
                        cfg.cluster_size]
                if layout == "s4":
                    base.append(cfg.theta)
                key = tuple(base + [r.estimator])
                cells.setdefault(key, {})[r.model] = getattr(r, metric)
        rows = []
        for key in sorted(cells, key=lambda k: tuple(str(x) for x in k)):
            rows.append(list(key) + [_fmt_cell(cells[key].get(m)) for m in models])
        return header, rows

    raise ConfigError(f"unknown layout {layout!r}")


def render_table(header, rows, fmt: str) -> str:
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(header)
        writer.writerows(rows)
        return buf.getvalue()
    cols = [[str(h)] + [str(r[i]) for r in rows] for i, h in enumerate(header)]
    widths = [max(len(x) for x in col) for col in cols]
    lines = ["  ".join(str(h).rjust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(str(x).rjust(w) for x, w in zip(r, widths)))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# plotdata
# ---------------------------------------------------------------------------

FIGURES = ("estimates_box", "se_error_lines", "type1_lines", "power_lines")


def plotdata_rows(run_dir, figure: str):
    """Tidy long-format series for one figure; (header, rows)."""
    if figure not in FIGURES:
        raise ConfigError(f"unknown figure {figure!r}; choose from {FIGURES}")
    run, manifest = _load_run(run_dir)
    configs = [_config_from_dict(e) for e in manifest["scenarios"]]

    if figure == "estimates_box":
        header = ["scenario_id", "cohort", "effect", "I", "J", "K", "theta",
                  "model", "replicate", "theta_hat"]
        rows = []
        for cfg in configs:
            rep_path = run / f"replicates_{cfg.scenario_id}.csv"
            if not rep_path.exists():
                print(f"[swcrt] warning: missing {rep_path.name}",
                      file=sys.stderr)
                continue
            seen = set()
            for _, r in read_replicates_csv(rep_path):
                key = (r.model, r.replicate)
                if key in seen:
                    continue
                seen.add(key)
                rows.append([cfg.scenario_id, cfg.cohort, cfg.effect,
                             cfg.n_clusters, cfg.n_steps, cfg.cluster_size,
                             cfg.theta, r.model, r.replicate,
                             repr(r.theta_hat)])
        return header, rows

    summaries = resummarize(run)
    rows = []
    if figure == "se_error_lines":
        header = ["scenario_id", "cohort", "effect", "J", "K", "model",
                  "estimator", "x_clusters", "pct_se_error"]
        for s in summaries:
            cfg = s.config
            for r in s.rows:
                if not r.estimator:
                    continue
                rows.append([cfg.scenario_id, cfg.cohort, cfg.effect,
                             cfg.n_steps, cfg.cluster_size, r.model,
                             r.estimator, cfg.n_clusters, repr(r.pct_se_error)])
        return header, rows
    if figure == "type1_lines":
        header = ["scenario_id", "cohort", "effect", "J", "K", "model",
                  "estimator", "x_clusters", "rejection_rate", "band_low",
                  "band_high"]
        for s in summaries:
            cfg = s.config
            lo, hi = binomial_band(cfg.n_sim, cfg.alpha)
            for r in s.rows:
                if not r.estimator:
                    continue
                rows.append([cfg.scenario_id, cfg.cohort, cfg.effect,
                             cfg.n_steps, cfg.cluster_size, r.model,
                             r.estimator, cfg.n_clusters,
                             repr(r.rejection_rate), repr(lo), repr(hi)])
        return header, rows
    # power_lines
    header = ["scenario_id", "cohort", "effect", "I", "J", "K", "model",
              "estimator", "theta", "rejection_rate"]
    for s in summaries:
        cfg = s.config
        for r in s.rows:
            if not r.estimator:
                continue
            rows.append([cfg.scenario_id, cfg.cohort, cfg.effect,
                         cfg.n_clusters, cfg.n_steps, cfg.cluster_size,
                         r.model, r.estimator, cfg.theta,
                         repr(r.rejection_rate)])
    return header, rows


# ---------------------------------------------------------------------------
# argument parsing / entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swcrt",
        description="Stepped-wedge cohort trial simulation lab",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a scenario grid from a config")
    sim.add_argument("--config", required=True, help="TOML (or .json) run config")
    sim.add_argument("--out", required=True, help="output directory")
    sim.add_argument("--workers", type=int, default=None,
                     help="worker processes (default: $SWCRT_WORKERS or 1)")
    sim.add_argument("--seed", type=int, default=None,
                     help="override the config master seed")
    sim.add_argument("--include-nonconverged", action="store_true",
                     help="keep non-converged fits in the metrics")

    summ = sub.add_parser("summarize", help="re-aggregate and render tables")
    summ.add_argument("--run", required=True, help="simulate output directory")
    summ.add_argument("--layout", default="grid",
                      choices=["s1", "s2", "s4", "grid"])
    summ.add_argument("--format", default="text", choices=["text", "csv"])

    plot = sub.add_parser("plotdata", help="emit tidy CSV series for figures")
    plot.add_argument("--run", required=True, help="simulate output directory")
    plot.add_argument("--figure", required=True, choices=list(FIGURES))
    plot.add_argument("--out", default=None,
                      help="output CSV path (default: stdout)")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "simulate":
            cmd_simulate(args.config, args.out, workers=args.workers,
                         seed=args.seed,
                         include_nonconverged=args.include_nonconverged)
        elif args.command == "summarize":
            summaries = resummarize(args.run)
            header, rows = layout_table(summaries, args.layout)
            sys.stdout.write(render_table(header, rows, args.format))
        elif args.command == "plotdata":
            header, rows = plotdata_rows(args.run, args.figure)
            buf = io.StringIO()
            writer = csv.writer(buf)
            writer.writerow(header)
            writer.writerows(rows)
            if args.out:
                Path(args.out).write_text(buf.getvalue())
            else:
                sys.stdout.write(buf.getvalue())
    except ConfigError as exc:
        print(f"swcrt: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"swcrt: i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
