"""Report emission: markdown summary, SVG accuracy curves with stddev bands,
and matplotlib renderings of the same figures.

The SVG files are written directly (one polyline per mode, one band polygon
per mode when a spread is available) so their byte content is deterministic
and structurally checkable; the PNG files are matplotlib conveniences for
human viewing.
"""

from __future__ import annotations

import os
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import MissingArtifacts
from .harness import Paths, read_results

WIDTH, HEIGHT = 640, 420
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 20, 40, 50

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]


def _scale(values, lo, hi, out_lo, out_hi):
    span = hi - lo if hi > lo else 1.0
    return [out_lo + (v - lo) / span * (out_hi - out_lo) for v in values]


def svg_line_chart(path, title, xlabel, ylabel, series, y_range=(0.0, 1.0)) -> None:
    """Write a line chart; each series is {name, xs, ys, band: (lo, hi) | None}.

    One <polyline> per series with exactly one point per x value; optional
    shaded band as a <polygon> behind the line.
    """
    xs_all = [x for s in series for x in s["xs"]]
    x_lo, x_hi = (min(xs_all), max(xs_all)) if xs_all else (0.0, 1.0)
    y_lo, y_hi = y_range
    px = lambda xs: _scale(xs, x_lo, x_hi, MARGIN_L, WIDTH - MARGIN_R)
    py = lambda ys: _scale(ys, y_lo, y_hi, HEIGHT - MARGIN_B, MARGIN_T)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="24" text-anchor="middle" font-size="15">{title}</text>',
        (
            f'<text x="{WIDTH / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle" '
            f'font-size="12">{xlabel}</text>'
        ),
        (
            f'<text x="18" y="{HEIGHT / 2:.1f}" text-anchor="middle" font-size="12" '
            f'transform="rotate(-90 18 {HEIGHT / 2:.1f})">{ylabel}</text>'
        ),
        (
            f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{WIDTH - MARGIN_L - MARGIN_R}" '
            f'height="{HEIGHT - MARGIN_T - MARGIN_B}" fill="none" stroke="#888"/>'
        ),
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y_val = y_lo + frac * (y_hi - y_lo)
        y_pix = py([y_val])[0]
        parts.append(
            f'<text x="{MARGIN_L - 8}" y="{y_pix + 4:.1f}" text-anchor="end" '
            f'font-size="10">{y_val:g}</text>'
        )
    for x_val in sorted(set(xs_all)):
        x_pix = px([x_val])[0]
        parts.append(
            f'<text x="{x_pix:.1f}" y="{HEIGHT - MARGIN_B + 16}" text-anchor="middle" '
            f'font-size="10">{x_val:g}</text>'
        )
    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        if s.get("band") is not None:
            lo, hi = s["band"]
            band_x = px(list(s["xs"]) + list(reversed(s["xs"])))
            band_y = py(list(np.clip(hi, *y_range)) + list(reversed(np.clip(lo, *y_range))))
            pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(band_x, band_y))
            parts.append(f'<polygon points="{pts}" fill="{color}" fill-opacity="0.15"/>')
        line_pts = " ".join(
            f"{x:.2f},{y:.2f}" for x, y in zip(px(s["xs"]), py(np.clip(s["ys"], *y_range)))
        )
        parts.append(
            f'<polyline points="{line_pts}" fill="none" stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{WIDTH - MARGIN_R - 8}" y="{MARGIN_T + 16 + 14 * i}" text-anchor="end" '
            f'font-size="11" fill="{color}">{s["name"]}</text>'
        )
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


def _png_line_chart(path, title, xlabel, ylabel, series) -> None:
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        ax.plot(s["xs"], s["ys"], label=s["name"], color=color, marker="o", markersize=3)
        if s.get("band") is not None:
            lo, hi = s["band"]
            ax.fill_between(s["xs"], lo, hi, color=color, alpha=0.15)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_ylim(0, 1.02)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _bar_chart_png(path, title, xlabel, groups, series) -> None:
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    width = 0.8 / max(len(series), 1)
    xs = np.arange(len(groups))
    for i, s in enumerate(series):
        ax.bar(xs + i * width, s["ys"], width, label=s["name"], color=PALETTE[i % len(PALETTE)])
    ax.set_xticks(xs + width * (len(series) - 1) / 2)
    ax.set_xticklabels([str(g) for g in groups])
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("adversarial accuracy")
    ax.set_ylim(0, 1.02)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _curve_data(rows):
    """Single-attribute sweep rows -> per (mode, norm) mean and std curves."""
    grouped = defaultdict(lambda: defaultdict(list))
    for row in rows:
        if row["adv_acc"] == "" or "+" in row["attacked"] or row["attacked"] == "":
            continue
        if "@" in row["mode"] or "+dp" in row["mode"]:
            continue
        grouped[(row["mode"], row["norm"])][float(row["bound"])].append(float(row["adv_acc"]))
    curves = defaultdict(list)
    for (mode, norm), by_bound in grouped.items():
        xs = sorted(by_bound)
        ys = [float(np.mean(by_bound[x])) for x in xs]
        sd = [float(np.std(by_bound[x])) for x in xs]
        curves[norm].append(
            {
                "name": mode,
                "xs": xs,
                "ys": ys,
                "band": (
                    np.array(ys) - np.array(sd),
                    np.array(ys) + np.array(sd),
                ),
            }
        )
    for norm in curves:
        curves[norm].sort(key=lambda s: s["name"])
    return curves


def _attacked_count_data(rows):
    """Multi-attribute rows at the largest bound -> accuracy per count."""
    per_mode = defaultdict(dict)
    bounds = [float(r["bound"]) for r in rows if r["adv_acc"] != "" and r["attacked"]]
    if not bounds:
        return [], []
    top = max(bounds)
    for row in rows:
        if row["adv_acc"] == "" or not row["attacked"] or float(row["bound"]) != top:
            continue
        if "@" in row["mode"] or "+dp" in row["mode"]:
            continue
        m = len(row["attacked"].split("+"))
        per_mode[row["mode"]].setdefault(m, []).append(float(row["adv_acc"]))
    counts = sorted({m for d in per_mode.values() for m in d})
    if len(counts) < 2:
        return [], []
    series = [
        {"name": mode, "ys": [float(np.mean(per_mode[mode].get(m, [0]))) for m in counts]}
        for mode in sorted(per_mode)
    ]
    return counts, series


def write_report(out_dir: str) -> list[str]:
    """Render report.md plus the SVG and PNG figures from results.csv."""
    paths = Paths(out_dir)
    rows = read_results(paths.results)
    if not rows:
        raise MissingArtifacts("results.csv is empty")
    written = []

    curves = _curve_data(rows)
    for norm, series in curves.items():
        svg_path = os.path.join(out_dir, f"curves_{norm}.svg")
        svg_line_chart(
            svg_path,
            f"Adversarial accuracy vs {norm} bound (mean/std over attacked attributes)",
            f"{norm} bound",
            "adversarial accuracy",
            series,
        )
        png_path = os.path.join(out_dir, f"curves_{norm}.png")
        _png_line_chart(
            png_path,
            f"Adversarial accuracy vs {norm} bound",
            f"{norm} bound",
            "adversarial accuracy",
            series,
        )
        written += [svg_path, png_path]

    counts, count_series = _attacked_count_data(rows)
    if counts:
        csv_path = os.path.join(out_dir, "attacked_counts.csv")
        with open(csv_path, "w") as fh:
            fh.write("mode," + ",".join(f"m={m}" for m in counts) + "\n")
            for s in count_series:
                fh.write(s["name"] + "," + ",".join(format(v, ".17g") for v in s["ys"]) + "\n")
        png_path = os.path.join(out_dir, "attacked_counts.png")
        _bar_chart_png(
            png_path,
            "Adversarial accuracy vs number of attacked attributes",
            "attacked attributes",
            counts,
            count_series,
        )
        written += [csv_path, png_path]

    benign = {}
    for row in rows:
        if row["benign_acc"] != "":
            benign.setdefault(row["mode"], row["benign_acc"])
    lines = [
        "# Experiment report",
        "",
        "CBM-lite trains its linear head sequentially on the frozen recognizer's",
        "probability outputs (no joint concept/class objective).",
        "",
        "## Benign accuracy",
        "",
        "| mode | benign accuracy |",
        "| --- | --- |",
    ]
    for mode in sorted(benign):
        lines.append(f"| {mode} | {float(benign[mode]):.4f} |")
    lines += ["", "## Figures", ""]
    for path in written:
        if path.endswith(".png") or path.endswith(".svg"):
            lines.append(f"- {os.path.basename(path)}")
    if os.path.exists(paths.bounds_summary):
        lines += ["", "## Bound verification", "", "```"]
        lines += open(paths.bounds_summary).read().strip().splitlines()
        lines += ["```"]
    lines += [
        "",
        "## Query accounting",
        "",
        "Logical conditional-query counts per inference: node-wise uses the full",
        "attribute space, class-wise uses the high-probability set; see the",
        "space_size, v_size, and cond_queries_per_sample columns of results.csv.",
        "",
    ]
    with open(paths.report, "w") as fh:
        fh.write("\n".join(lines))
    written.append(paths.report)
    return written
