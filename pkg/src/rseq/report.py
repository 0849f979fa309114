"""Figures rendered next to the metrics log."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from rseq.training import parse_metrics_line  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.2),
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def read_metrics(path) -> list[dict]:
    return [parse_metrics_line(line) for line in Path(path).read_text().splitlines() if line.strip()]


def plot_training(metrics_path, out_dir) -> list[Path]:
    """Loss and learning-rate curves per epoch; returns the written files."""
    rows = read_metrics(metrics_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for split, style in (("train", "-o"), ("val", "--s")):
            pts = [(r["epoch"], r["loss"]) for r in rows if r["split"] == split]
            if pts:
                ax.plot(*zip(*pts), style, ms=3, label=split)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss (nats)")
        ax.legend(frameon=False)
        fig.tight_layout()
        written.append(out_dir / "loss.png")
        fig.savefig(written[-1])
        plt.close(fig)

        fig, ax = plt.subplots()
        pts = [(r["epoch"], r["lr"]) for r in rows if r["split"] == "train"]
        if pts:
            ax.step(*zip(*pts), where="post")
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("learning rate")
        fig.tight_layout()
        written.append(out_dir / "lr.png")
        fig.savefig(written[-1])
        plt.close(fig)
    return written


def plot_gradcheck(worst: dict[str, float], tolerance: float, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    groups = list(worst)
    errs = [max(worst[g], 1e-16) for g in groups]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 0.22 * len(groups) + 1.0))
        colors = ["tab:blue" if e < tolerance else "tab:red" for e in errs]
        ax.barh(groups, errs, color=colors)
        ax.axvline(tolerance, color="k", lw=0.8, ls=":")
        ax.set_xscale("log")
        ax.invert_yaxis()
        ax.set_xlabel("worst relative error")
        fig.tight_layout()
        path = out_dir / "gradcheck.png"
        fig.savefig(path)
        plt.close(fig)
    return path
