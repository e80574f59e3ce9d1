"""Report figures.  Uses the object API only, so no display backend is needed."""
from __future__ import annotations

import numpy as np
from matplotlib.figure import Figure
from matplotlib.patches import Patch

from .core import CLASS_NAMES, SemanticImage

_SAVE = dict(dpi=100, metadata={"Software": None})


def _legend_handles(*images):
    ids = sorted(set().union(*(np.unique(im.grid).tolist() for im in images)))
    pal = images[0].palette
    return [Patch(facecolor=pal[i], edgecolor="k", label=CLASS_NAMES[i]) for i in ids]


def plot_views(path, target: SemanticImage, rendered: SemanticImage,
               start: SemanticImage = None, title: str = ""):
    """Target, rendered-at-result and their disagreement (plus the start view if given)."""
    panels = [("target", target.palette.to_rgb8(target.grid))]
    if start is not None:
        panels.append(("start", start.palette.to_rgb8(start.grid)))
    panels.append(("result", rendered.palette.to_rgb8(rendered.grid)))
    diff = (target.grid != rendered.grid).astype(float)
    fig = Figure(figsize=(3.2 * (len(panels) + 1), 2.6))
    axes = fig.subplots(1, len(panels) + 1)
    for ax, (name, rgb) in zip(axes, panels):
        ax.imshow(rgb, interpolation="nearest")
        ax.set_title(name, fontsize=9)
    axes[-1].imshow(diff, cmap="gray_r", vmin=0, vmax=1, interpolation="nearest")
    axes[-1].set_title(f"disagreement ({diff.mean():.1%})", fontsize=9)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.legend(handles=_legend_handles(target, rendered), loc="lower center",
               ncol=6, fontsize=7, frameon=False)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.subplots_adjust(bottom=0.22, top=0.85, wspace=0.05)
    fig.savefig(path, **_SAVE)


def plot_trace(path, trace):
    """Best loss per iteration for each optimizer stage."""
    fig = Figure(figsize=(5, 3.2))
    ax = fig.subplots()
    stages = sorted({rec[0] for rec in trace})
    offset = 0
    for st in stages:
        rows = [rec for rec in trace if rec[0] == st]
        its = np.arange(len(rows)) + offset
        ax.plot(its, [max(r[2], 1e-12) for r in rows], label=f"stage {st}")
        offset += len(rows)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("best loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)


def plot_protocol(path, report):
    """Per-trial errors against final loss; accepted trials filled."""
    recs = report.records
    acc = np.array([r.accepted for r in recs])
    loss = np.array([r.loss for r in recs])
    dt = np.array([r.dt_cm for r in recs])
    da = np.array([0.5 * (r.dyaw + r.dpitch) for r in recs])
    fig = Figure(figsize=(8, 3.2))
    ax1, ax2 = fig.subplots(1, 2)
    for ax, err, label in ((ax1, dt, "translation error [cm]"), (ax2, da, "mean angle error [deg]")):
        ax.scatter(loss[~acc], err[~acc], facecolors="none", edgecolors="tab:gray", label="rejected")
        ax.scatter(loss[acc], err[acc], color="tab:blue", label="accepted")
        ax.set_xlabel("final loss")
        ax.set_ylabel(label)
        if np.all(err > 0):
            ax.set_yscale("log")
    ax1.legend(fontsize=8)
    fig.suptitle(f"accepted mean: {report.mean_dt_cm:.2f} cm, yaw {report.mean_dyaw:.3f} deg, "
                 f"pitch {report.mean_dpitch:.3f} deg", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
