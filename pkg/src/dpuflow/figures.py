"""Report figures, rendered to files next to the delimited output.

Every renderer takes the already-computed report object and a destination
path; nothing here recomputes numbers. The Agg backend is forced so rendering
works headless.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_run_figure(report, path):
    """Throughput and bandwidth use across the thread sweep."""
    ts = [r.threads for r in report.rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))

    ax1.plot(ts, [r.fps for r in report.rows], "o-", color="tab:blue")
    ax1.axvline(report.cores, color="gray", ls="--", lw=0.8)
    ax1.text(report.cores, ax1.get_ylim()[0], " cores", fontsize=8, color="gray", va="bottom")
    ax1.set_xlabel("worker threads")
    ax1.set_ylabel("frames / s (simulated)")
    ax1.set_title("%s on %s" % (report.model_name or "frame profile", report.target_name), fontsize=10)
    ax1.grid(alpha=0.3)

    ax2.bar(ts, [100.0 * r.bw_util for r in report.rows], color="tab:orange", width=0.6)
    ax2.axhline(100.0, color="red", ls=":", lw=1.0)
    ax2.set_xlabel("worker threads")
    ax2.set_ylabel("shared bandwidth used (%)")
    ax2.set_ylim(0, 115)
    ax2.grid(alpha=0.3, axis="y")
    return _finish(fig, path)


def render_comparison_figure(comp, path):
    """Grouped bars: throughput and efficiency per system."""
    names = [e.name for e in comp.entries]
    x = range(len(names))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.8))

    colors = ["tab:green" if n == comp.baseline_name else "tab:blue" for n in names]
    ax1.bar(x, [e.fps for e in comp.entries], color=colors)
    ax1.set_xticks(list(x))
    ax1.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    ax1.set_ylabel("frames / s")
    ax1.set_title("throughput (baseline in green)", fontsize=10)
    ax1.grid(alpha=0.3, axis="y")

    ax2.bar(x, [e.fps_per_watt for e in comp.entries], color=colors)
    marked = [i for i, e in enumerate(comp.entries) if e.fps_per_watt_reported is not None]
    for i in marked:
        e = comp.entries[i]
        ax2.scatter([i], [e.fps_per_watt_reported], color="black", marker="_", s=200,
                    label="reported" if i == marked[0] else None)
    ax2.set_xticks(list(x))
    ax2.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    ax2.set_ylabel("fps / W")
    ax2.set_title("efficiency (dash = externally reported)", fontsize=10)
    ax2.grid(alpha=0.3, axis="y")
    if marked:
        ax2.legend(fontsize=8)
    return _finish(fig, path)


def render_trace_figure(trace, path):
    """Per-layer compute vs memory cycles for one frame."""
    names = [r.layer_id for r in trace.rows]
    y = range(len(names))
    fig, ax = plt.subplots(figsize=(7, max(2.5, 0.28 * len(names))))
    ax.barh(y, [r.compute_cycles for r in trace.rows], height=0.38, label="compute", color="tab:blue")
    ax.barh([v + 0.38 for v in y], [r.memory_cycles for r in trace.rows], height=0.38,
            label="memory", color="tab:orange")
    ax.set_yticks([v + 0.19 for v in y])
    ax.set_yticklabels(names, fontsize=7)
    ax.invert_yaxis()
    ax.set_xlabel("cycles (frame total %d)" % trace.total_cycles)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3, axis="x")
    return _finish(fig, path)
