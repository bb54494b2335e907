"""Learning-curve and generalization plots, plus the tidy CSV behind them."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

CSV_COLUMNS = ("step", "method", "seed", "return", "r_c", "r_d")


def read_run_metrics(run_dir: str | Path) -> list[dict]:
    """Rows (step, method, seed, return, r_c, r_d) from one run directory."""
    run_dir = Path(run_dir)
    method, seed = None, None
    for line in (run_dir / "config.txt").read_text().splitlines():
        key, _, value = line.partition("=")
        if key.strip() == "method":
            method = value.strip()
        if key.strip() == "seed":
            seed = int(value.strip())
    rows = []
    with open(run_dir / "metrics.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            rows.append(
                {
                    "step": rec["step"],
                    "method": method,
                    "seed": seed,
                    "return": rec["return"],
                    "r_c": rec["r_c"],
                    "r_d": rec["r_d"],
                }
            )
    return rows


def write_summary_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in CSV_COLUMNS})


def read_summary_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = []
        for rec in csv.DictReader(fh):
            rows.append(
                {
                    "step": int(rec["step"]),
                    "method": rec["method"],
                    "seed": int(rec["seed"]),
                    "return": float(rec["return"]),
                    "r_c": float(rec["r_c"]),
                    "r_d": float(rec["r_d"]),
                }
            )
        return rows


def plot_learning_curves(rows: list[dict], out_path: str | Path,
                         grid_points: int = 60) -> None:
    """Mean +/- one-std bands over seeds, per method."""
    methods = sorted({r["method"] for r in rows})
    max_step = max(r["step"] for r in rows)
    grid = np.linspace(0, max_step, grid_points)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for method in methods:
        seed_curves = []
        seeds = sorted({r["seed"] for r in rows if r["method"] == method})
        for seed in seeds:
            pts = sorted(
                (r["step"], r["return"])
                for r in rows
                if r["method"] == method and r["seed"] == seed
            )
            steps = np.array([p[0] for p in pts], dtype=float)
            rets = np.array([p[1] for p in pts], dtype=float)
            seed_curves.append(np.interp(grid, steps, rets))
        curves = np.stack(seed_curves)
        mean, std = curves.mean(axis=0), curves.std(axis=0)
        ax.plot(grid, mean, label=method)
        ax.fill_between(grid, mean - std, mean + std, alpha=0.2)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("episode return")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_generalization_bars(
    results: dict[str, dict[str, tuple[float, float]]],
    out_path: str | Path,
    title: str = "",
) -> None:
    """Grouped bars with one-std error bars.

    results: {method: {setting_label: (mean, std)}}.
    """
    methods = sorted(results)
    settings = sorted({s for per in results.values() for s in per})
    width = 0.8 / max(len(methods), 1)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    x = np.arange(len(settings), dtype=float)
    for k, method in enumerate(methods):
        means = [results[method].get(s, (np.nan, 0.0))[0] for s in settings]
        stds = [results[method].get(s, (np.nan, 0.0))[1] for s in settings]
        ax.bar(x + k * width, means, width=width, yerr=stds, capsize=3, label=method)
    ax.set_xticks(x + width * (len(methods) - 1) / 2)
    ax.set_xticklabels(settings)
    ax.set_ylabel("episode return")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def emit_plots(run_dirs: list[str | Path], out_dir: str | Path) -> list[Path]:
    """Learning-curve figure and generalization bar charts from completed
    runs, plus the tidy CSV they are drawn from."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for run_dir in run_dirs:
        rows.extend(read_run_metrics(run_dir))
    if not rows:
        raise ValueError("no metrics found in the given run directories")
    written = []
    csv_path = out_dir / "summary.csv"
    write_summary_csv(rows, csv_path)
    written.append(csv_path)
    curve_path = out_dir / "learning_curves.png"
    plot_learning_curves(rows, curve_path)
    written.append(curve_path)

    for kind, fname in (
        ("eval_teams", "unseen_teams.png"),
        ("eval_agents", "unseen_agents.png"),
    ):
        results: dict[str, dict[str, tuple[float, float]]] = {}
        for run_dir in run_dirs:
            path = Path(run_dir) / f"{kind}.json"
            if not path.exists():
                continue
            payload = json.loads(path.read_text())
            method = payload["method"]
            for label, cell in payload["results"].items():
                results.setdefault(method, {}).setdefault(label, [])
            for label, cell in payload["results"].items():
                results[method][label] = (cell["mean"], cell["std"])
        if results:
            bar_path = out_dir / fname
            plot_generalization_bars(
                results, bar_path, title=kind.replace("_", " ")
            )
            written.append(bar_path)
    return written
