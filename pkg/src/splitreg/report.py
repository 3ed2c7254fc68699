"""Run artifacts: slice images, figures, tables, and output directories.

Mid-slice images are 8-bit binary PGM with per-volume min/max windowing —
dependency-free and diffable in tests. Matplotlib renders the overview,
loss-trace, and sweep figures to PNG files next to the delimited outputs.
The deterministic metrics live in ``metrics.json``; wall-clock timing goes
to ``run_info.json`` so repeated runs stay byte-identical where it matters.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .config import RunConfig, format_config
from .metrics import MetricsReport
from .nrrd_io import write_nrrd
from .optimizer import trace_csv
from .pipeline import SegRegResult, SweepRow
from .volume import LabelMap, Volume

PLANE_AXES = {"axial": 2, "coronal": 1, "sagittal": 0}


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Min/max window-level an array into 0..255."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.clip((img - lo) / (hi - lo) * 255.0, 0, 255).astype(np.uint8)


def write_pgm(path, img8: np.ndarray) -> None:
    """Binary (P5) PGM; ``img8`` is a 2D uint8 array, rows first."""
    img8 = np.ascontiguousarray(img8, dtype=np.uint8)
    h, w = img8.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img8.tobytes())


def mid_slice(samples: np.ndarray, plane: str) -> np.ndarray:
    """Middle slice of one anatomical plane, rows-down orientation."""
    axis = PLANE_AXES[plane]
    k = samples.shape[axis] // 2
    sl = np.take(samples, k, axis=axis)
    return sl.T  # rows = the later axis, columns = the earlier one


def label_contours(labels2d: np.ndarray) -> np.ndarray:
    """Pixels whose 4-neighborhood crosses a label boundary."""
    lab = np.asarray(labels2d)
    edge = np.zeros(lab.shape, dtype=bool)
    edge[1:, :] |= lab[1:, :] != lab[:-1, :]
    edge[:-1, :] |= lab[1:, :] != lab[:-1, :]
    edge[:, 1:] |= lab[:, 1:] != lab[:, :-1]
    edge[:, :-1] |= lab[:, 1:] != lab[:, :-1]
    return edge


def write_slice_images(out_dir: Path, volume: Volume, labels: LabelMap | None) -> None:
    """Mid-slices of ``volume`` plus a second set with label contours."""
    for plane in PLANE_AXES:
        img = to_uint8(mid_slice(np.asarray(volume.samples), plane))
        write_pgm(out_dir / f"slice_{plane}.pgm", img)
        if labels is not None:
            overlay = img.copy()
            edge = label_contours(mid_slice(np.asarray(labels.labels), plane))
            overlay[edge] = 255
            write_pgm(out_dir / f"slice_{plane}_overlay.pgm", overlay)


def summary_table(report: MetricsReport) -> str:
    """Human-readable metrics table for stdout."""
    lines = [
        f"{'label':>6}  {'dice':>8}  {'hd95_mm':>9}",
        "-" * 27,
    ]
    for label, m in sorted(report.per_label.items()):
        lines.append(f"{label:>6}  {m.dice:8.4f}  {m.hd95_mm:9.3f}")
    lines.append("-" * 27)
    lines.append(f"mean dice        {report.mean_dice():8.4f}")
    lines.append(f"sdlogj           {report.sdlogj:8.4f}")
    lines.append(f"folding count    {report.folding_count:8d}")
    lines.append(f"folding fraction {report.folding_fraction:8.6f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# matplotlib figures

def overview_figure(path, moving: Volume, fixed: Volume, result: SegRegResult) -> None:
    mov = np.asarray(moving.samples)
    fix = np.asarray(fixed.samples)
    war = np.asarray(result.warped.samples)
    panels = [
        ("moving", mov), ("fixed", fix), ("warped", war),
        ("|moving - fixed|", np.abs(mov - fix)),
        ("|warped - fixed|", np.abs(war - fix)),
        ("warped labels", np.asarray(result.warped_labels.labels, dtype=float)),
    ]
    fig, axes = plt.subplots(2, 3, figsize=(10.5, 7))
    for ax, (title, arr) in zip(axes.ravel(), panels):
        ax.imshow(mid_slice(arr, "axial"), cmap="gray", origin="lower")
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def trace_figure(path, result: SegRegResult) -> None:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for label in sorted(result.regions):
        trace = result.regions[label].loss_trace
        ax.plot(trace[:, 0], label=f"region {label}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("total loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def sweep_figure(path, rows: list[SweepRow], xlabel: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [r.x for r in rows]
    ys = [r.reg_dice for r in rows]
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("registration dice")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


# ---------------------------------------------------------------------------
# output directories

def write_run_outputs(
    out_dir,
    moving: Volume,
    fixed: Volume,
    result: SegRegResult,
    run_cfg: RunConfig,
    seed: int,
) -> None:
    """All artifacts of one registration run under fixed names."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_nrrd(result.field, out / "composed_field.nrrd")
    write_nrrd(result.warped, out / "warped_image.nrrd")
    write_nrrd(result.warped_labels, out / "warped_labels.nrrd")
    (out / "metrics.json").write_text(result.report.to_json())
    (out / "run_info.json").write_text(
        json.dumps(
            {"runtime_seconds": result.runtime_seconds, "seed": seed,
             "n_regions": len(result.regions)},
            indent=2,
        )
        + "\n"
    )
    (out / "config_used.cfg").write_text(format_config(run_cfg))
    traces = out / "traces"
    traces.mkdir(exist_ok=True)
    for label, region in sorted(result.regions.items()):
        (traces / f"region_{label}.csv").write_text(trace_csv(region))
    write_slice_images(out, result.warped, result.warped_labels)
    figures = out / "figures"
    figures.mkdir(exist_ok=True)
    overview_figure(figures / "overview.png", moving, fixed, result)
    trace_figure(figures / "loss_traces.png", result)


def write_sweep_outputs(out_dir, rows: list[SweepRow], kind: str) -> None:
    """CSV + gnuplot data file + PNG for one sweep."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    xname = "seg_dice" if kind == "segmentation" else "n_regions"
    csv_lines = [f"{xname},reg_dice"]
    dat_lines = [f"# {xname} reg_dice"]
    for r in rows:
        x = f"{r.x:.6f}" if kind == "segmentation" else str(int(r.x))
        csv_lines.append(f"{x},{r.reg_dice:.6f}")
        dat_lines.append(f"{x} {r.reg_dice:.6f}")
    (out / "sweep.csv").write_text("\n".join(csv_lines) + "\n")
    (out / "sweep.dat").write_text("\n".join(dat_lines) + "\n")
    figures = out / "figures"
    figures.mkdir(exist_ok=True)
    sweep_figure(
        figures / "sweep.png", rows,
        xlabel="segmentation dice" if kind == "segmentation" else "regions used",
    )
