"""
Report emission: results.csv, summary.json and SVG plots.

results.csv is written byte-for-byte reproducibly. Its wall_ns column holds 0
unless timing is requested, in which case measured times are written instead.
"""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .studies import RESULT_COLUMNS, StudyReport  # noqa: E402

plt.rcParams["svg.hashsalt"] = "invlearn"


def _fmt(v):
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else repr(v)
    return "" if v is None else str(v)


def results_csv(rows, columns=RESULT_COLUMNS, timing: bool = False) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(0 if c == "wall_ns" and not timing else row.get(c)) for c in columns])
    return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _save(fig, path: Path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _rate_plot(ax, block, label=""):
    stats = block["per_n"]
    ns = np.array([s["n"] for s in stats], dtype=float)
    means = np.array([s["mean"] for s in stats], dtype=float)
    ax.loglog(ns, means, "o", label=f"{label}mean error".strip())
    if block.get("slope") is not None:
        fit = np.exp(block["intercept"]) * ns ** block["slope"]
        ax.loglog(ns, fit, "-", label=f"{label}fit slope {block['slope']:.3f}".strip())
        theory = means[0] * (ns / ns[0]) ** block["target_slope"]
        ax.loglog(ns, theory, "--", label=f"{label}theory slope {block['target_slope']:.3f}".strip())


def write_plots(report: StudyReport, plot_dir: Path) -> list:
    plot_dir.mkdir(parents=True, exist_ok=True)
    written = []
    s = report.summary
    if report.kind == "rate" and s.get("per_n"):
        fig, ax = plt.subplots(figsize=(5, 4))
        _rate_plot(ax, s)
        ax.set_xlabel("n")
        ax.set_ylabel(s["quantity"])
        ax.legend()
        written.append(plot_dir / "rate.svg")
        _save(fig, written[-1])
    elif report.kind == "schedules" and s.get("cases"):
        fig, ax = plt.subplots(figsize=(5, 4))
        for case, block in s["cases"].items():
            if block.get("per_n"):
                _rate_plot(ax, block, label=f"({case}) ")
        ax.set_xlabel("n")
        ax.set_ylabel("mean squared error")
        ax.legend(fontsize=6)
        written.append(plot_dir / "schedules.svg")
        _save(fig, written[-1])
    elif report.kind == "descent" and report.traces:
        for n, traces in report.traces.items():
            fig, ax = plt.subplots(figsize=(5, 4))
            for tr in traces:
                ax.semilogy(np.arange(1, len(tr) + 1), tr, lw=0.8)
            ax.set_xlabel("t")
            ax.set_ylabel("||e_t||")
            ax.set_title(f"n = {n}")
            written.append(plot_dir / f"descent_n{n}.svg")
            _save(fig, written[-1])
    elif report.kind == "concentration" and report.rows:
        fig, ax = plt.subplots(figsize=(5, 4))
        delta = report.rows[0]["delta"]
        sel = [r for r in report.rows if r["delta"] == delta]
        lams = [r["lambda"] for r in sel]
        for q in ("psi", "theta", "upsilon"):
            line, = ax.loglog(lams, [r[f"{q}_quantile"] for r in sel], "o-", label=f"{q} quantile")
            ax.loglog(lams, [r[f"{q}_bound"] for r in sel], "--", color=line.get_color(), label=f"{q} bound")
        ax.set_xlabel("lambda")
        ax.set_title(f"delta = {delta}")
        ax.legend(fontsize=6)
        written.append(plot_dir / "concentration.svg")
        _save(fig, written[-1])
    return written


def emit_report(report: StudyReport | None, out_dir, timing: bool = False) -> dict:
    """Write results.csv, summary.json and plots/*.svg under ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if report is None:
            (out / "results.csv").write_text(results_csv([]), encoding="utf-8")
            (out / "summary.json").write_text("{}\n", encoding="utf-8")
            return {"results": out / "results.csv", "summary": out / "summary.json", "plots": []}
        (out / "results.csv").write_text(results_csv(report.rows, report.columns, timing), encoding="utf-8")
        summary = {**report.summary, "passed": report.passed, "timing": timing}
        (out / "summary.json").write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n",
                                          encoding="utf-8")
        if timing and "wall_ns" in report.columns:
            (out / "timings.csv").write_text(results_csv(report.rows, ("n", "rep", "wall_ns"), True),
                                             encoding="utf-8")
        plots = write_plots(report, out / "plots")
    except OSError as exc:
        raise OSError(f"cannot write report under {out}: {exc.strerror} ({exc.filename})") from exc
    return {"results": out / "results.csv", "summary": out / "summary.json", "plots": plots}


def load_report(out_dir) -> StudyReport:
    """Rebuild a report from a directory written by :func:`emit_report` (no traces)."""
    out = Path(out_dir)
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    with (out / "results.csv").open(encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        columns = tuple(reader.fieldnames or RESULT_COLUMNS)
        rows = []
        for rec in reader:
            row = {}
            for k, v in rec.items():
                try:
                    row[k] = int(v)
                except ValueError:
                    try:
                        row[k] = float(v)
                    except ValueError:
                        row[k] = v
            rows.append(row)
    kind = {"rate": "rate"}.get(summary.get("study"), summary.get("study", "rate"))
    return StudyReport(kind, rows, summary, bool(summary.get("passed", False)), columns=columns)
