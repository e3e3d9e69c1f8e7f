"""
Deterministic PNG rendering of element fields and diagnostic curves.

Element fields are sampled on a pixel grid by nearest element (the triangle
containing the pixel centre) and colored directly, so the image depends only
on the data. Curves go through matplotlib's Agg backend with the PNG metadata
stripped.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.tri import Triangulation  # noqa: E402
from PIL import Image  # noqa: E402

from .mesh import Mesh, load_mesh  # noqa: E402
from .phantoms import Phantom  # noqa: E402

BACKGROUND_RGB = (255, 255, 255)
COLORMAP = "viridis"


def element_index_grid(mesh: Mesh, size: int = 256) -> np.ndarray:
    """Element containing each pixel centre, ``-1`` outside the mesh; row 0 is the top."""
    lo = mesh.nodes.min(axis=0)
    hi = mesh.nodes.max(axis=0)
    span = float((hi - lo).max())
    step = span / size
    xs = lo[0] + (np.arange(size) + 0.5) * step
    ys = hi[1] - (np.arange(size) + 0.5) * step
    X, Y = np.meshgrid(xs, ys)
    finder = Triangulation(mesh.nodes[:, 0], mesh.nodes[:, 1], mesh.elements).get_trifinder()
    return np.asarray(finder(X, Y), dtype=int)


def field_image(mesh: Mesh, values, size: int = 256, vmin=None, vmax=None) -> np.ndarray:
    """RGB array (size x size x 3, uint8) of an element field."""
    values = np.asarray(values, dtype=float)
    if values.shape != (mesh.n_elements,):
        raise ValueError(f"expected {mesh.n_elements} element values, got {values.shape}")
    if not np.all(np.isfinite(values)):
        raise ValueError("element values must be finite")
    vmin = float(values.min()) if vmin is None else float(vmin)
    vmax = float(values.max()) if vmax is None else float(vmax)
    # a constant field maps to the middle of the colormap
    scaled = np.full(values.shape, 0.5) if vmax <= vmin else np.clip(
        (values - vmin) / (vmax - vmin), 0.0, 1.0)
    colors = (matplotlib.colormaps[COLORMAP](scaled)[:, :3] * 255).round().astype(np.uint8)
    idx = element_index_grid(mesh, size)
    img = np.empty(idx.shape + (3,), dtype=np.uint8)
    img[:] = BACKGROUND_RGB
    inside = idx >= 0
    img[inside] = colors[idx[inside]]
    return img


def save_field_png(path, mesh: Mesh, values, size: int = 256, vmin=None, vmax=None) -> None:
    Image.fromarray(field_image(mesh, values, size, vmin, vmax), mode="RGB").save(
        path, format="PNG", optimize=False)


def save_curves_png(path, x, series: dict, xlabel: str, ylabel: str, logy: bool = False,
                    title: str | None = None) -> None:
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    for label, y in series.items():
        ax.plot(x, y, marker="o", markersize=3, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if logy:
        ax.set_yscale("log")
    if title:
        ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, format="png", metadata={"Software": None})
    plt.close(fig)
    Path(path).write_bytes(buf.getvalue())


def _read_commented_csv(path):
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    if not rows:
        raise ValueError(f"{path}: empty table")
    header, body = rows[0], rows[1:]
    try:
        table = np.array([[float(v) for v in r] for r in body], dtype=float)
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric entry ({exc})") from exc
    return header, table.reshape(len(body), len(header))


def plot_file(path, target, mesh_path=None) -> None:
    """Render one output file of the command-line tools, chosen by its content."""
    path = Path(path)
    if path.suffix == ".json":
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ValueError(f"{path}: expected a JSON object")
        if "sigma" in doc:
            mesh, _ = load_mesh(mesh_path or doc.get("mesh"))
            save_field_png(target, mesh, doc["sigma"])
            return
        if "background" in doc:
            if mesh_path is None:
                raise ValueError("rendering a phantom needs --mesh")
            mesh, _ = load_mesh(mesh_path)
            save_field_png(target, mesh, Phantom.from_dict(doc).on_mesh(mesh))
            return
        raise ValueError(f"{path}: neither a reconstruction nor a phantom")

    header, table = _read_commented_csv(path)
    if header == ["iteration", "index", "accurate", "predicted"]:
        last = table[:, 0].max()
        rows = table[table[:, 0] == last]
        save_curves_png(target, rows[:, 1], {"accurate": rows[:, 2], "predicted": rows[:, 3]},
                        "index", "singular value", logy=True,
                        title=f"iteration {int(last)}")
    elif header[:1] == ["iteration"] and "objective" in header:
        save_curves_png(target, table[:, 0], {"criterion": table[:, header.index("criterion")]},
                        "iteration", "relative step", logy=True)
    elif header[:1] == ["iteration"]:
        save_curves_png(target, table[:, 0], {h: table[:, i] for i, h in enumerate(header)
                                              if i > 0},
                        "iteration", "spectral-norm Jacobian error")
    elif header[:1] == ["epoch"]:
        save_curves_png(target, table[:, 0], {"train": table[:, 1], "validation": table[:, 2]},
                        "epoch", "loss", logy=True)
    elif header[:2] == ["element", "sigma"]:
        if mesh_path is None:
            raise ValueError("rendering an element CSV needs --mesh")
        mesh, _ = load_mesh(mesh_path)
        save_field_png(target, mesh, table[:, 1])
    else:
        raise ValueError(f"{path}: unrecognized table with columns {header}")
