"""Report figures.  Everything renders off-screen and is written next to the CSVs."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

golden = (np.sqrt(5) - 1) / 2
width = 4.8
PARAMS = {
    "figure.figsize": (width, width * golden),
    "figure.dpi": 150,
    "font.size": 8,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "lines.linewidth": 1.2,
    "lines.markersize": 3.5,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "figure.subplot.left": 0.16,
    "figure.subplot.bottom": 0.17,
    "savefig.format": "png",
}
# no timestamps or versions in the files, so reruns are byte-identical
_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return path


def convergence(path, residuals, energies=None, title=""):
    """Residual (log scale) and, optionally, energy against iteration."""
    with plt.rc_context(PARAMS):
        fig, ax = plt.subplots()
        ax.semilogy(np.arange(len(residuals)), residuals, "-", color="#08589e", label="residual")
        ax.set_xlabel("iteration")
        ax.set_ylabel(r"$\|\delta Z\|_F / \|\bar\mu\|_F$")
        if energies is not None and len(energies) > 1:
            ax2 = ax.twinx()
            ax2.plot(np.arange(len(energies)), energies, "--", color="#4eb3d3", label="energy")
            ax2.set_ylabel("energy")
            ax2.grid(False)
        ax.set_title(title)
        return _save(fig, path)


def profile(path, x, curves, xlabel="x", ylabel="", title=""):
    """Several sampled functions of one variable (``curves``: label -> values)."""
    order = np.argsort(x)
    with plt.rc_context(PARAMS):
        fig, ax = plt.subplots()
        for label, y in curves.items():
            ax.plot(np.asarray(x)[order], np.asarray(y)[order], label=label)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def loglog_slope(path, ks, values, slope=None, reference=-2.0, title=""):
    ks, values = np.asarray(ks, float), np.abs(np.asarray(values, float))
    with plt.rc_context(PARAMS):
        fig, ax = plt.subplots()
        ax.loglog(ks, values, "o-", color="#08589e", label="measured")
        ref = values[0] * (ks / ks[0]) ** reference
        ax.loglog(ks, ref, ":", color="0.4", label=f"slope {reference:g}")
        ax.set_xlabel("k")
        ax.set_ylabel("sup remainder")
        if slope is not None:
            title = f"{title} (fitted slope {slope:.3f})".strip()
        ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def sequence(path, ks, values, limit=None, target=None, ylabel="", title=""):
    with plt.rc_context(PARAMS):
        fig, ax = plt.subplots()
        ax.plot(ks, values, "o-", color="#08589e", label="sequence")
        if limit is not None:
            ax.axhline(limit, ls="--", color="#4eb3d3", label="extrapolated")
        if target is not None:
            ax.axhline(target, ls=":", color="0.3", label="target")
        ax.set_xlabel("k")
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def weights(path, labels, values, title=""):
    """Bar chart of weight-block data such as ``b_nu``."""
    with plt.rc_context(PARAMS):
        fig, ax = plt.subplots()
        ax.bar(np.arange(len(values)), values, color="#2b8cbe")
        ax.set_xticks(np.arange(len(values)))
        ax.set_xticklabels(labels, rotation=90, fontsize=5)
        lo, hi = min(values), max(values)
        pad = 0.1 * (hi - lo) if hi > lo else 0.05 * abs(hi)
        ax.set_ylim(lo - pad, hi + pad)
        ax.set_ylabel("b")
        ax.set_title(title)
        return _save(fig, path)


def scan(path, angles, values, title=""):
    """Values of a torus-direction scan against the direction angle."""
    with plt.rc_context(PARAMS):
        fig, ax = plt.subplots()
        ax.plot(angles, values, "o", color="#08589e")
        ax.axhline(0, color="0.3", lw=0.8)
        ax.set_xlabel("direction angle")
        ax.set_title(title)
        return _save(fig, path)
