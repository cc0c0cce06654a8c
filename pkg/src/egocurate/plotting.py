"""Matplotlib defaults and byte-stable figure saving."""

from contextlib import contextmanager

import matplotlib

matplotlib.use("Agg")

from matplotlib.figure import Figure  # noqa: E402

RC = {
    "svg.hashsalt": "egocurate",
    "svg.fonttype": "path",
    "font.family": "DejaVu Sans",
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "image.cmap": "viridis",
    "path.simplify": False,
}


@contextmanager
def style():
    with matplotlib.rc_context(RC):
        yield


def new_figure(width=4.0, height=None, polar=False):
    """Figure plus a single axes; height defaults to the golden ratio."""
    if height is None:
        height = width * 0.618
    fig = Figure(figsize=(width, height))
    ax = fig.add_subplot(111, projection="polar" if polar else None)
    return fig, ax


def save(fig, path):
    # no timestamp so reruns produce identical bytes
    fig.savefig(path, format="svg", metadata={"Date": None})
