"""Figure rendering for the CLI report paths.

Every eval command writes delimited tables; these helpers render the
matching figures next to them.  All functions save a PNG and return the
path.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = [
    "save_grid_heatmap",
    "save_baseline_bars",
    "save_segment_traces",
    "save_timing_figure",
]


def save_grid_heatmap(grid, path):
    """Shaded score matrix over (t_bf, alpha_bf), best cell per row marked."""
    m = grid.matrix_db
    fig, ax = plt.subplots(figsize=(1.2 * m.shape[1] + 2, 0.8 * m.shape[0] + 2))
    im = ax.imshow(m, cmap="gray", aspect="auto")
    for i in range(m.shape[0]):
        best = int(np.argmax(m[i]))
        for j in range(m.shape[1]):
            dark = m[i, j] < (m.min() + m.max()) / 2
            label = f"{m[i, j]:.1f}"
            if j == best:
                label = f"[{label}]"
            ax.text(j, i, label, ha="center", va="center", fontsize=9,
                    color="white" if dark else "black")
    ax.set_xticks(range(m.shape[1]),
                  [f"{a:g}" for a in grid.alpha_bf_values])
    ax.set_yticks(range(m.shape[0]), [str(t) for t in grid.t_bf_values])
    ax.set_xlabel("alpha_bf")
    ax.set_ylabel("t_bf [frames]")
    ax.set_title("SI-SDR [dB] per front-end configuration")
    fig.colorbar(im, ax=ax, label="SI-SDR [dB]")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_baseline_bars(results, path):
    """Bar chart of the baseline ladder."""
    methods = [r.method for r in results]
    scores = [r.mean_si_sdr_db for r in results]
    fig, ax = plt.subplots(figsize=(7, 4))
    bars = ax.bar(methods, scores, color="#4878a8")
    for bar, score in zip(bars, scores):
        ax.text(bar.get_x() + bar.get_width() / 2, bar.get_height(),
                f"{score:.1f}", ha="center", va="bottom", fontsize=9)
    ax.set_ylabel("mean SI-SDR [dB]")
    ax.set_title("Baseline ladder")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_segment_traces(traces, segment_s, path, move_times=()):
    """Per-segment SI-SDR traces; vertical lines mark interferer moves.

    Args:
        traces: mapping method -> per-segment score array.
    """
    fig, ax = plt.subplots(figsize=(8, 4))
    for method, segs in traces.items():
        t = (np.arange(len(segs)) + 0.5) * segment_s
        ax.plot(t, segs, marker="o", markersize=3, label=method)
    for mt in move_times:
        ax.axvline(mt, color="gray", linestyle=":", alpha=0.6)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("SI-SDR [dB]")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_timing_figure(result, path, budget_ms=None):
    """Front-end per-frame compute trace with its 95th percentile."""
    per_frame = result.frontend_ms_per_frame()
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 4),
                                   gridspec_kw={"width_ratios": [2, 1]})
    ax0.plot(per_frame, linewidth=0.6)
    ax0.set_xlabel("front-end block")
    ax0.set_ylabel("compute per frame [ms]")
    if per_frame.size:
        p95 = float(np.percentile(per_frame, 95))
        ax0.axhline(p95, color="C1", label=f"p95 = {p95:.2f} ms")
    if budget_ms is not None:
        ax0.axhline(budget_ms, color="C3", linestyle="--",
                    label=f"budget = {budget_ms:g} ms")
    ax0.legend(fontsize=8)
    ax1.hist(per_frame, bins=40, color="#4878a8")
    ax1.set_xlabel("compute per frame [ms]")
    backend_ms = [r["compute_ms"] for r in result.backend_log
                  if r.get("i") is not None]
    title = "Front-end timing"
    if backend_ms:
        title += f" (backend mean {np.mean(backend_ms):.0f} ms/tick)"
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
