"""Per-experiment metric CSVs and mean ± std summaries over seeds."""
from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

# results: experiment name -> list of (seed, metrics) in sweep order
Results = Mapping[str, Sequence[tuple[int, Mapping[str, float]]]]


def summarize(runs: Sequence[tuple[int, Mapping[str, float]]]) -> dict[str, tuple[float, float | None]]:
    """metric -> (mean, sample std or None when only one seed ran)."""
    keys: list[str] = []
    for _, m in runs:
        keys += [k for k in m if k not in keys]
    out = {}
    for k in keys:
        vals = np.array([m[k] for _, m in runs if k in m], dtype=float)
        std = float(vals.std(ddof=1)) if len(vals) > 1 else None
        out[k] = (float(vals.mean()), std)
    return out


def _fmt(x: float | None, digits: int = 4) -> str:
    if x is None:
        return ""
    if math.isnan(x):
        return "nan"
    return f"{x:.{digits}f}"


def write_report(results: Results, out_dir: str | Path, title: str = "report") -> dict[str, Path]:
    """Writes ``metrics.csv``, ``summary.csv`` and a plain-text ``summary.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"metrics": out / "metrics.csv", "summary_csv": out / "summary.csv", "summary": out / "summary.txt"}
    with open(paths["metrics"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["experiment", "seed", "metric", "value"])
        for name, runs in results.items():
            for seed, m in runs:
                for k, v in m.items():
                    w.writerow([name, seed, k, repr(float(v))])
    summaries = {name: summarize(runs) for name, runs in results.items()}
    metrics: list[str] = []
    for s in summaries.values():
        metrics += [k for k in s if k not in metrics]
    with open(paths["summary_csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["experiment", "n_seeds", "metric", "mean", "std"])
        for name, s in summaries.items():
            for k, (mu, sd) in s.items():
                w.writerow([name, len(results[name]), k, _fmt(mu, 6), _fmt(sd, 6)])
    lines = [title, ""]
    width = max([len(n) for n in summaries] + [10])
    lines.append("experiment".ljust(width) + "".join(f"  {k:>22}" for k in metrics))
    for name, s in summaries.items():
        cells = []
        for k in metrics:
            if k not in s:
                cells.append(f"  {'':>22}")
                continue
            mu, sd = s[k]
            cell = _fmt(mu) + (f" ± {_fmt(sd)}" if sd is not None else "")
            cells.append(f"  {cell:>22}")
        lines.append(name.ljust(width) + "".join(cells))
    paths["summary"].write_text("\n".join(lines) + "\n")
    return paths
