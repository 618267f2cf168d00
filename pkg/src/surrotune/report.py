"""Run outputs: report.csv, curves.csv and summary.json.

Column order is fixed.  Reals are written with 17 significant digits so they
read back bit-exactly; missing values are empty cells.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

from .data import atomic_write_text

REPORT_COLUMNS = ("id", "split", "sigma", "psnr_db", "ssim")
CURVE_COLUMNS = ("epoch", "L_a", "L_s", "lr", "score")


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return format(v, ".17g")
    try:
        return format(float(v), ".17g")
    except (TypeError, ValueError):
        return str(v)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows([fmt(v) for v in row] for row in rows)
    return buf.getvalue()


def report_csv(report) -> str:
    names = [d["name"] for d in report.space]
    header = list(REPORT_COLUMNS) + [f"param_{n}" for n in names]
    rows = [[r["id"], r["split"], r["sigma"], r["psnr_db"], r["ssim"], *r["params"]] for r in report.rows]
    return _csv(header, rows)


def curves_csv(report) -> str:
    names = [d["name"] for d in report.space]
    header = list(CURVE_COLUMNS) + [f"theta_{n}" for n in names]
    rows = []
    for c in report.curves:
        theta = c.get("theta") or [None] * len(names)
        rows.append([c["epoch"], c.get("L_a"), c.get("L_s"), c.get("lr"), c.get("score"), *theta])
    return _csv(header, rows)


def summary(report, config: dict, status: str = "ok", error: str | None = None) -> dict:
    return {
        "status": status,
        "error": error,
        "method": report.method,
        "seed": report.seed,
        "aggregates": report.aggregates,
        "bb_calls": report.bb_calls,
        "bb_calls_total": sum(report.bb_calls.values()),
        "wall_clock_s": report.wall_clock,
        "epochs_run": len(report.curves),
        "warmup_epochs": report.warmup_epochs,
        "gate_variance": report.gate_variance,
        "theta": report.theta,
        "params": report.params,
        "ssim_mode": report.ssim_mode,
        "space": report.space,
        "train_config": report.config,
        "config": config,
        "extra": report.extra,
    }


def write_outputs(out, report, config: dict, status: str = "ok", error: str | None = None) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "curves.csv", curves_csv(report))
    atomic_write_text(out / "report.csv", report_csv(report))
    atomic_write_text(out / "summary.json", json.dumps(summary(report, config, status, error), indent=2, sort_keys=True) + "\n")
