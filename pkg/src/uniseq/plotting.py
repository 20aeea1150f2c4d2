"""Report figures rendered straight to PNG files (no display, no global pyplot state)."""
from __future__ import annotations

import io
from pathlib import Path
from typing import Mapping, Sequence

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .io_utils import atomic_write_bytes

# no Software/date chunks, so identical data gives identical bytes
_PNG_META = {"Software": None}


def _save(fig: Figure, path: str | Path) -> Path:
    FigureCanvasAgg(fig)
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata=_PNG_META)
    atomic_write_bytes(path, buf.getvalue())
    return Path(path)


def loss_curve(history: Sequence[float], path: str | Path, title: str = "training loss") -> Path:
    fig = Figure(figsize=(5, 3.2))
    ax = fig.add_subplot()
    ax.plot(range(1, len(history) + 1), history, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log" if history and min(history) > 0 else "linear")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def metric_bars(values: Mapping[str, float], path: str | Path, title: str = "") -> Path:
    fig = Figure(figsize=(5, 3.2))
    ax = fig.add_subplot()
    names = list(values)
    ax.bar(names, [values[n] for n in names], color="#4c72b0")
    for i, n in enumerate(names):
        ax.annotate(f"{values[n]:.3f}", (i, values[n]), ha="center", va="bottom", fontsize=8)
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def grid_heatmap(rows: Sequence[Mapping], path: str | Path, x: str = "lr", y: str = "batch_size") -> Path:
    """Best dev score per (x, y) cell of a grid-search table."""
    xs = sorted({r[x] for r in rows})
    ys = sorted({r[y] for r in rows})
    cells = [[max((r["score"] for r in rows if r[x] == xv and r[y] == yv), default=float("nan"))
              for xv in xs] for yv in ys]
    fig = Figure(figsize=(5, 3.6))
    ax = fig.add_subplot()
    im = ax.imshow(cells, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(xs)), [f"{v:g}" for v in xs])
    ax.set_yticks(range(len(ys)), [f"{v:g}" for v in ys])
    ax.set_xlabel(x)
    ax.set_ylabel(y)
    fig.colorbar(im, ax=ax, label="dev score")
    fig.tight_layout()
    return _save(fig, path)
