"""Evaluation runs and report rendering (CSV + JSON + matplotlib figures)."""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .metrics import MetricReport, psnr, ssim
from .rasterizer import render
from .training import load_image

log = logging.getLogger(__name__)


def evaluate_frames(scene, field_, frames, images: dict | None = None) -> MetricReport:
    """Render every frame at its kinematic state and score against GT."""
    report = MetricReport()
    for frame in frames:
        gt = images.get(frame.name) if images else None
        if gt is None:
            gt = load_image(frame.image_path)
        deltas = field_.predict_deltas_batch(scene.mu, frame.kinematics)
        img = np.clip(render(scene, frame.camera, deltas).image, 0.0, 1.0)
        report.add(frame.name, psnr(img, gt), ssim(img, gt))
    return report


def write_eval_csv(report: MetricReport, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["frame", "psnr", "ssim"])
        writer.writerows(report.rows())
    return path


def eval_figure(report: MetricReport, path) -> Path:
    """Per-frame PSNR/SSIM panels next to the delimited output."""
    path = Path(path)
    xs = np.arange(len(report))
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
    ax1.plot(xs, report.psnr_values, marker="o", ms=3, lw=1, color="tab:blue")
    ax1.set_ylabel("PSNR (dB)")
    ax1.grid(True, alpha=0.3)
    ax2.plot(xs, report.ssim_values, marker="o", ms=3, lw=1, color="tab:orange")
    ax2.set_ylabel("SSIM")
    ax2.set_xlabel("frame index")
    ax2.grid(True, alpha=0.3)
    agg = report.aggregate()
    if agg["n_frames"]:
        ax1.axhline(agg["psnr"]["mean"], color="tab:blue", ls="--", lw=1, alpha=0.6)
        ax2.axhline(agg["ssim"]["mean"], color="tab:orange", ls="--", lw=1, alpha=0.6)
        fig.suptitle(f"PSNR {agg['psnr']['mean']:.2f} dB, SSIM {agg['ssim']['mean']:.3f} "
                     f"({agg['n_frames']} frames)")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def write_eval_outputs(report: MetricReport, out_dir) -> dict:
    """Write report.csv, report.json, and report.png into ``out_dir``."""
    from ._util import write_json

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "csv": write_eval_csv(report, out_dir / "report.csv"),
        "json": out_dir / "report.json",
        "figure": eval_figure(report, out_dir / "report.png"),
    }
    write_json(paths["json"], report.aggregate())
    log.info("eval report written to %s", out_dir)
    return paths


def training_figure(rows: list[dict], path) -> Path:
    """Loss/PSNR/Gaussian-count curves from the training log rows."""
    path = Path(path)
    its = [r["iter"] for r in rows]
    fig, axes = plt.subplots(3, 1, figsize=(8, 8), sharex=True)
    axes[0].plot(its, [r["loss"] for r in rows], lw=0.8, color="tab:red")
    axes[0].set_yscale("log")
    axes[0].set_ylabel("loss")
    axes[1].plot(its, [r["PSNR"] for r in rows], lw=0.8, color="tab:blue")
    axes[1].set_ylabel("PSNR (dB)")
    axes[2].plot(its, [r["gaussian_count"] for r in rows], lw=0.8, color="tab:green")
    axes[2].set_ylabel("gaussians")
    axes[2].set_xlabel("iteration")
    transition = next((r["iter"] for r in rows if r["phase"] == 2), None)
    for ax in axes:
        ax.grid(True, alpha=0.3)
        if transition is not None:
            ax.axvline(transition, color="gray", ls="--", lw=1, alpha=0.7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
