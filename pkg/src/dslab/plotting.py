"""Static PNG figures written next to the CSV/JSON artifacts.

Everything renders through the Agg backend; nothing opens a window.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "svg.hashsalt": "dslab",
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # strip the software/date stamps so reruns write the same bytes
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def _moving_average(values, window):
    values = np.asarray(values, dtype=float)
    if len(values) == 0:
        return values
    c = np.cumsum(np.insert(values, 0, 0.0))
    out = np.empty(len(values))
    for i in range(len(values)):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


def plot_training(records, path, title=None):
    """Return and moving-average return per episode, with lambda on a twin axis."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ep = [r.episode for r in records]
        ax.plot(ep, [r.ret for r in records], lw=0.6, alpha=0.4, label="return")
        ax.plot(ep, [r.moving_avg_return for r in records], lw=1.4, label="moving average (10)")
        ax.set_xlabel("episode")
        ax.set_ylabel("return")
        ax2 = ax.twinx()
        ax2.plot(ep, [r.lam for r in records], color="k", lw=0.8, ls="--", label="lambda")
        ax2.set_ylabel("lambda")
        ax2.grid(False)
        lines = ax.get_lines() + ax2.get_lines()
        ax.legend(lines, [l.get_label() for l in lines], loc="lower right")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_corr_traces(traces: dict, path, title=None):
    """``traces`` maps a label to a sequence of per-episode mean pair correlations."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, ys in traces.items():
            ax.plot(np.arange(len(ys)), ys, lw=1.0, label=label)
        ax.set_xlabel("episode")
        ax.set_ylabel("mean pair correlation")
        ax.set_ylim(-1.05, 1.05)
        if len(traces) > 1:
            ax.legend()
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_transfer_lengths(runs: dict, path, window=50, cap=None, title=None):
    """Moving-average LFA episode length per run; ``runs`` maps label to lengths."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, lengths in runs.items():
            ax.plot(_moving_average(lengths, window), lw=1.0, label=label)
        ax.set_xlabel("LFA episode")
        ax.set_ylabel(f"moving-average length ({window})")
        if cap is not None:
            ax.axvline(cap, color="k", lw=0.6, ls=":")
        ax.legend()
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_trial_report(report_doc: dict, path):
    """Episodes-to-exit per trial (dots per run, bar for the trial mean)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        trials = report_doc["trials"]
        for t in trials:
            if t["failed"]:
                continue
            xs = np.full(len(t["episodes_to_exit"]), t["trial"])
            ax.scatter(xs, t["episodes_to_exit"], s=10, alpha=0.6, color="C0")
            ax.hlines(t["mean"], t["trial"] - 0.3, t["trial"] + 0.3, color="C1")
        ax.axhline(report_doc["cap"], color="k", lw=0.6, ls=":", label="cap")
        ax.set_xlabel("trial")
        ax.set_ylabel("episodes to exit")
        ax.set_xticks([t["trial"] for t in trials])
        ax.legend()
        ax.set_title(f'{report_doc["env_id"]} / {report_doc["algorithm"]}')
        return _save(fig, path)


def plot_ablation(cells, path):
    """Heat map of grand-mean episodes-to-exit over (lambda_max, k)."""
    lams = sorted({c.lambda_max for c in cells})
    ks = sorted({c.k for c in cells})
    grid = np.full((len(lams), len(ks)), np.nan)
    for c in cells:
        if c.report is not None and c.report.grand_mean is not None:
            grid[lams.index(c.lambda_max), ks.index(c.k)] = c.report.grand_mean
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        im = ax.imshow(grid, aspect="auto", cmap="viridis_r")
        ax.set_xticks(range(len(ks)), [str(k) for k in ks])
        ax.set_yticks(range(len(lams)), [format(l, "g") for l in lams])
        ax.set_xlabel("k")
        ax.set_ylabel("lambda_max")
        ax.grid(False)
        for i in range(len(lams)):
            for j in range(len(ks)):
                if np.isfinite(grid[i, j]):
                    ax.text(j, i, f"{grid[i, j]:.0f}", ha="center", va="center", color="w", fontsize=8)
        fig.colorbar(im, ax=ax, label="episodes to exit")
        return _save(fig, path)
