"""Figure rendering to files: orthographic point-cloud projections with
depth-sorted opacity, and sweep line charts. Output bytes are deterministic
(fixed SVG hash salt, no embedded dates)."""

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "isoshape"

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_PROJECTIONS = (("xy", 0, 1, 2), ("xz", 0, 2, 1), ("yz", 1, 2, 0))


def save_figure(fig, path):
    path = str(path)
    if path.endswith(".svg"):
        fig.savefig(path, metadata={"Date": None})
    else:
        fig.savefig(path)
    plt.close(fig)


def render_cloud_projections(cloud, path, title: str | None = None, point_size: float = 4.0):
    """Three orthographic views (xy, xz, yz); nearer points drawn more opaque."""
    pts = cloud.points
    fig, axes = plt.subplots(1, 3, figsize=(9.6, 3.4))
    for ax, (name, i, j, depth_axis) in zip(axes, _PROJECTIONS):
        depth = pts[:, depth_axis]
        order = np.argsort(depth, kind="stable")  # far points first
        rank = np.linspace(0.25, 0.95, len(order))
        colors = np.zeros((len(order), 4))
        colors[:, 2] = 0.55
        colors[:, 3] = rank
        ax.scatter(pts[order, i], pts[order, j], s=point_size, c=colors, linewidths=0)
        ax.set_aspect("equal")
        ax.set_title(name, fontsize=9)
        ax.tick_params(labelsize=7)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    save_figure(fig, path)


def render_sweep(levels, accuracies, xlabel: str, path, title: str | None = None):
    """Accuracy-versus-level line chart for robustness/sensitivity sweeps."""
    fig, ax = plt.subplots(figsize=(4.8, 3.2))
    ax.plot(levels, accuracies, marker="o", linewidth=1.2)
    ax.set_xlabel(xlabel, fontsize=9)
    ax.set_ylabel("accuracy", fontsize=9)
    ax.set_ylim(0.0, 1.02)
    ax.grid(True, alpha=0.3)
    ax.tick_params(labelsize=8)
    if title:
        ax.set_title(title, fontsize=10)
    fig.tight_layout()
    save_figure(fig, path)


def render_training_curve(metrics, path, title: str | None = None):
    """Loss and instance-discrimination accuracy over epochs."""
    epochs = [m["epoch"] for m in metrics]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.0, 3.0))
    ax1.plot(epochs, [m["mean_loss"] for m in metrics], linewidth=1.0)
    ax1.set_xlabel("epoch", fontsize=9)
    ax1.set_ylabel("mean loss", fontsize=9)
    ax2.plot(epochs, [m["inst_disc_acc"] for m in metrics], linewidth=1.0, color="tab:green")
    ax2.set_xlabel("epoch", fontsize=9)
    ax2.set_ylabel("instance-discrimination accuracy", fontsize=9)
    ax2.set_ylim(0.0, 1.02)
    for ax in (ax1, ax2):
        ax.grid(True, alpha=0.3)
        ax.tick_params(labelsize=8)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    save_figure(fig, path)
