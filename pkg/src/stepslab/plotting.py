"""Figures written next to CSV outputs (matplotlib, headless Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_gamma(traces: dict, path) -> list[Path]:
    """Shortcut ratio vs normalized depth.

    Writes two renderings: ``<stem>.png`` puts all blocks of a model on one
    depth axis in execution order; ``<stem>_per_step.png`` normalizes depth
    within each step so the steps of a multi-step model overlay.
    """
    path = Path(path)
    outputs = []
    for per_step, suffix in ((False, ""), (True, "_per_step")):
        fig, ax = plt.subplots(figsize=(5.5, 3.8))
        for label, trace in traces.items():
            depth = trace.normalized_depth(per_step)
            g = trace.gammas
            steps = np.array([r.step_index for r in trace.records])
            if per_step and len(np.unique(steps)) > 1:
                for s in np.unique(steps):
                    sel = steps == s
                    ax.plot(depth[sel], g[sel], label=f"{label} step {s}")
            else:
                ax.plot(depth, g, label=label)
        ax.set_xlabel("normalized depth")
        ax.set_ylabel(r"shortcut ratio $\gamma_l$")
        ax.set_ylim(bottom=0)
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        out = path.with_name(path.stem + suffix + ".png")
        fig.savefig(out, dpi=120)
        plt.close(fig)
        outputs.append(out)
    return outputs


def plot_loss(record, path, title: str = "") -> Path:
    path = Path(path)
    steps = [s[0] for s in record.samples]
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    ax.plot(steps, record.losses, label="train loss")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    evals = [(s, m) for s, _, m in record.samples if m is not None]
    if evals:
        ax2 = ax.twinx()
        ax2.plot(*zip(*evals), "o-", color="tab:orange", label="eval metric")
        ax2.set_ylabel("eval metric")
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_ablation(report, path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    if report.kind == "mask_table6":
        for p in ("slow", "fast"):
            ax.plot(report.column("masked_channels", path=p), report.column("metric", path=p), "o-",
                    label=f"{p} path masked")
        ax.set_xlabel("masked channels")
        ax.set_ylabel("metric")
        ax.legend()
    elif report.kind == "drop_table7":
        labels = ["none" if r["step"] == 0 else f"step {r['step']} -{r['dropped_blocks']}" for r in report.rows]
        ax.bar(labels, [r["metric"] for r in report.rows])
        ax.set_ylabel("metric")
    else:
        xkey = "steps" if report.kind == "steps_table4" else "depths"
        labels = [str(r[xkey]) for r in report.rows]
        has_metric = all(r.get("metric") is not None for r in report.rows)
        ykey = "metric" if has_metric else "flops"
        ax.bar(labels, [r[ykey] for r in report.rows])
        ax.set_xlabel(xkey)
        ax.set_ylabel(ykey)
    ax.set_title(report.kind)
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
