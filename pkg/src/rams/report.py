"""Tables and figures for evaluation runs: ``summary.tsv``, ``per_scene.tsv``,
``scatter_<A>_vs_<B>_<band>.png`` and ``ensemble_curve.{tsv,png}``."""
from __future__ import annotations

import math
from itertools import combinations
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import aggregate, write_records  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 5.0),
    "figure.dpi": 100,
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.titlesize": 11,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "+-_" else "_" for c in name)


def write_summary(path, records) -> list:
    rows = aggregate(records)
    with open(path, "w") as fh:
        fh.write("band\tmethod\tcpsnr\tcssim\tn_scenes\tn_infinite\n")
        for s in rows:
            fh.write(f"{s.band}\t{s.method}\t{s.cpsnr:.2f}\t{s.cssim:.4f}\t{s.n_scenes}\t{s.n_infinite}\n")
    return rows


def scatter_pairs(records, method_a: str, method_b: str, band: str):
    a = {r.scene_id: r.cpsnr for r in records if r.method == method_a and r.band == band}
    b = {r.scene_id: r.cpsnr for r in records if r.method == method_b and r.band == band}
    ids = sorted(set(a) & set(b))
    return [(s, a[s], b[s]) for s in ids if math.isfinite(a[s]) and math.isfinite(b[s])]


def plot_scatter(path, records, method_a: str, method_b: str, band: str) -> Path | None:
    pts = scatter_pairs(records, method_a, method_b, band)
    if not pts:
        return None
    xs, ys = [p[1] for p in pts], [p[2] for p in pts]
    lo, hi = min(xs + ys), max(xs + ys)
    pad = 0.02 * (hi - lo) + 0.1
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot([lo - pad, hi + pad], [lo - pad, hi + pad], color="0.4", lw=1, ls="--")
        ax.scatter(xs, ys, s=14, alpha=0.8)
        ax.set_xlim(lo - pad, hi + pad)
        ax.set_ylim(lo - pad, hi + pad)
        ax.set_aspect("equal")
        ax.set_xlabel(f"{method_a} cPSNR (dB)")
        ax.set_ylabel(f"{method_b} cPSNR (dB)")
        ax.set_title(f"{band}: {method_b} vs {method_a}")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def write_ensemble_curve(out_dir, curve, band: str = "") -> tuple[Path, Path]:
    """``curve``: list of (P, mean cPSNR)."""
    out_dir = Path(out_dir)
    tsv = out_dir / "ensemble_curve.tsv"
    with open(tsv, "w") as fh:
        fh.write("P\tcpsnr\n")
        for p, v in curve:
            fh.write(f"{p}\t{v:.4f}\n")
    png = out_dir / "ensemble_curve.png"
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot([p for p, _ in curve], [v for _, v in curve], marker="o", ms=3)
        ax.set_xlabel("ensemble size P")
        ax.set_ylabel("mean cPSNR (dB)")
        if band:
            ax.set_title(band)
        fig.tight_layout()
        fig.savefig(png)
        plt.close(fig)
    return tsv, png


def report(records, output_dir, pairs=None, curve=None) -> dict[str, Path]:
    """Write tables and plots; ``pairs`` defaults to every method pair per band."""
    if not records:
        raise ValueError("no records to report")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"per_scene": out / "per_scene.tsv", "summary": out / "summary.tsv"}
    write_records(files["per_scene"], records)
    write_summary(files["summary"], records)
    for band in sorted({r.band for r in records}):
        methods = sorted({r.method for r in records if r.band == band})
        for a, b in pairs or combinations(methods, 2):
            p = plot_scatter(out / f"scatter_{_safe(a)}_vs_{_safe(b)}_{band}.png", records, a, b, band)
            if p is not None:
                files[p.stem] = p
    if curve:
        files["ensemble_tsv"], files["ensemble_png"] = write_ensemble_curve(out, curve)
    return files
