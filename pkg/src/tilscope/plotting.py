"""Report figures written next to the CSV/JSON outputs."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# version metadata would make otherwise identical PNGs differ across installs
_SAVE_KW = dict(dpi=100, metadata={"Software": None})

LABEL_COLOURS = {0: (0.85, 0.25, 0.2), 1: (0.2, 0.7, 0.3), 2: (0.25, 0.4, 0.85)}


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def plot_froc(curve, path, title="FROC"):
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.step(curve.fp_per_mm2, curve.sensitivity, where="post", color="k", lw=1.2)
    ax.plot(curve.fp_rates, curve.sensitivities_at_rates, "o", color="tab:red",
            label=f"score {curve.score:.3f}")
    ax.set_xscale("symlog", linthresh=1.0)
    ax.set_xlabel("false positives per mm$^2$")
    ax.set_ylabel("sensitivity")
    ax.set_ylim(0, 1.02)
    ax.set_title(title)
    ax.legend(loc="lower right", frameon=False)
    _finish(fig, path)


def plot_dice(case_ids, values, path):
    fig, ax = plt.subplots(figsize=(max(4, 0.35 * len(values) + 2), 3.5))
    x = np.arange(len(values))
    ax.bar(x, values, color="tab:blue")
    ax.axhline(np.mean(values) if len(values) else 0, color="k", ls="--", lw=1)
    ax.set_xticks(x, case_ids, rotation=90, fontsize=7)
    ax.set_ylim(0, 1)
    ax.set_ylabel("tumor/stroma Dice")
    _finish(fig, path)


def plot_tils_scatter(pred, gt, r, path):
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(gt, pred, s=14, color="tab:purple")
    ax.plot([0, 100], [0, 100], color="0.6", lw=0.8)
    ax.set_xlim(0, 100)
    ax.set_ylim(0, 100)
    ax.set_xlabel("reference TILs score")
    ax.set_ylabel("predicted TILs score")
    ax.set_title(f"Pearson r = {r:.3f}" if r is not None else "Pearson r undefined")
    _finish(fig, path)


def plot_survival(risk, time, event, path, c_index=None):
    risk, time, event = map(np.asarray, (risk, time, event))
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(risk[event], time[event], s=10, color="tab:red", label="event")
    ax.scatter(risk[~event], time[~event], s=10, facecolors="none", edgecolors="0.4", label="censored")
    ax.set_xlabel("risk score")
    ax.set_ylabel("time")
    if c_index is not None:
        ax.set_title(f"C-index = {c_index:.3f}")
    ax.legend(frameon=False)
    _finish(fig, path)


def plot_overlay(rgb, labels, detections, path, max_side=1024):
    """Slide thumbnail with label colours blended in and detections marked."""
    step = max(1, int(np.ceil(max(rgb.shape[:2]) / max_side)))
    thumb = rgb[::step, ::step].astype(np.float64) / 255.0
    lab = labels[::step, ::step]
    colour = np.zeros_like(thumb)
    for value, c in LABEL_COLOURS.items():
        colour[lab == value] = c
    blend = 0.6 * thumb + 0.4 * colour
    fig, ax = plt.subplots(figsize=(6, 6 * thumb.shape[0] / thumb.shape[1]))
    ax.imshow(blend, interpolation="nearest")
    if detections:
        xs = np.array([d.x for d in detections]) / step
        ys = np.array([d.y for d in detections]) / step
        ax.scatter(xs, ys, s=2, color="yellow", linewidths=0)
    ax.set_axis_off()
    _finish(fig, path)
