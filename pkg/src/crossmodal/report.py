"""Render suite results as comparison tables (text) or flat records (CSV)."""

from __future__ import annotations

import csv
import io
import json
import math

from .config import BACKBONES, VARIANTS
from .metrics import METRIC_TITLES, METRICS

PREFIX = {"rnn": "RNN", "transformer": "TM", "netvlad": "NV"}
LEVEL_TITLES = {"overall": "Overall", "level0": "Level 0", "level1": "Level 1", "level2": "Level 2", "level3": "Level 3"}
CSV_FIELDS = ("backbone", "variant", "scope", "metric", "n_seeds", "error_mean", "error_std", "delta_vs_L")


def _fmt(x: float) -> str:
    return "-" if x is None or math.isnan(x) else f"{x:.2f}"


def _table(header: list[str], rows: list[list[str]]) -> list[str]:
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    line = lambda r: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
    return [line(header), "-" * len(line(header)), *(line(r) for r in rows)]


def _index(summary: list[dict]) -> dict:
    return {(r["backbone"], r["variant"], r["scope"], r["metric"]): r for r in summary}


def format_text(summary: list[dict], towers: dict | None = None, certificate: dict | None = None) -> str:
    """Per-backbone error tables (rows: overall and levels; one column per variant).

    The CM-C cell carries its improvement over L in parentheses.  A
    per-category table compares L with CM-C, and mean +- std over seeds
    follows each metric block.
    """
    idx = _index(summary)
    out: list[str] = []
    if certificate:
        out.append("separability certificate: " + json.dumps(certificate, sort_keys=True))
    if towers:
        for seed in sorted(towers, key=int):
            t = towers[seed]
            out.append(f"correlation tower seed {seed}: accuracy {t['accuracy']:.4f} "
                       f"fpr {t['fpr']:.4f} fnr {t['fnr']:.4f}")
    if out:
        out.append("")
    for backbone in BACKBONES:
        variants = [v for v in VARIANTS if any(k[0] == backbone and k[1] == v for k in idx)]
        if not variants:
            continue
        pre = PREFIX[backbone]
        scopes = [s for s in LEVEL_TITLES if any(k[:3] == (backbone, variants[0], s) for k in idx)]
        for m in METRICS:
            header = [METRIC_TITLES[m], *(f"{pre}-{v}" for v in variants)]
            rows, spread = [], []
            for s in scopes:
                cells, sd = [LEVEL_TITLES[s]], [LEVEL_TITLES[s]]
                for v in variants:
                    r = idx[(backbone, v, s, m)]
                    cell = _fmt(r["error_mean"])
                    if v == "CM-C" and "L" in variants:
                        cell += f" ({_fmt(r['delta_vs_L'])})"
                    cells.append(cell)
                    sd.append(_fmt(r["error_std"]))
                rows.append(cells)
                spread.append(sd)
            out += _table(header, rows)
            out.append("std over seeds:")
            out += _table([METRIC_TITLES[m], *header[1:]], spread)[2:]
            out.append("")
        cats = sorted({k[2] for k in idx if k[0] == backbone and k[2].startswith("cat:")})
        base, best = ("L", "CM-C") if {"L", "CM-C"} <= set(variants) else (variants[0], variants[-1])
        if cats:
            for m in ("gap", "hit1"):
                header = [METRIC_TITLES[m], *(c[4:] for c in cats)]
                rows = []
                for v in (base, best):
                    rows.append([f"{pre}-{v}", *(_fmt(idx[(backbone, v, c, m)]["error_mean"]) for c in cats)])
                gain = ["Gain"]
                for c in cats:
                    a, b = idx[(backbone, base, c, m)]["error_mean"], idx[(backbone, best, c, m)]["error_mean"]
                    gain.append(_fmt(a - b))
                rows.append(gain)
                out += _table(header, rows)
                out.append("")
    return "\n".join(out).rstrip("\n") + "\n"


def format_csv(summary: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in summary:
        w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in CSV_FIELDS})
    return buf.getvalue()


def render(summary: list[dict], fmt: str = "text", towers: dict | None = None,
           certificate: dict | None = None) -> str:
    if fmt == "csv":
        return format_csv(summary)
    if fmt == "text":
        return format_text(summary, towers, certificate)
    raise ValueError(f"unknown report format {fmt!r}")


def suite_payload(result) -> dict:
    """JSON-serialisable record of a suite: summary, per-run overall errors, towers."""
    runs = []
    for r in result.runs:
        overall = r.report.row("overall")
        runs.append({
            "backbone": r.backbone, "variant": r.variant, "seed": r.seed,
            "overall_error": {m: overall.error(m) for m in METRICS},
            "log": r.log,
        })
    return {
        "summary": result.summary(),
        "runs": runs,
        "towers": result.towers,
        "certificate": result.certificate,
        "partial": result.partial,
    }
