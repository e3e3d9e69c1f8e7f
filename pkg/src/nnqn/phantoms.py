"""Piecewise-constant conductivity phantoms evaluated at element centroids."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from matplotlib.tri import Triangulation

from .mesh import Mesh


class PhantomError(ValueError):
    pass


@dataclass
class Inclusion:
    shape: str
    center: tuple
    size: object
    value: float

    def contains(self, pts: np.ndarray) -> np.ndarray:
        d = pts - np.asarray(self.center, dtype=float)
        if self.shape == "disk":
            return np.hypot(d[:, 0], d[:, 1]) <= float(self.size)
        if self.shape == "rect":
            w, h = (self.size, self.size) if np.isscalar(self.size) else self.size
            return (np.abs(d[:, 0]) <= w / 2) & (np.abs(d[:, 1]) <= h / 2)
        raise PhantomError(f"unknown inclusion shape {self.shape!r}")


@dataclass
class Phantom:
    background: float
    inclusions: list = field(default_factory=list)

    @classmethod
    def from_dict(cls, doc: dict) -> "Phantom":
        try:
            incs = [Inclusion(i["shape"], tuple(i["center"]), i["size"], float(i["value"]))
                    for i in doc.get("inclusions", [])]
            return cls(float(doc["background"]), incs)
        except (KeyError, TypeError) as exc:
            raise PhantomError(f"malformed phantom: {exc}") from exc

    def to_dict(self) -> dict:
        return {"background": self.background,
                "inclusions": [{"shape": i.shape, "center": list(i.center), "size": i.size,
                                "value": i.value} for i in self.inclusions]}

    def validate(self, mesh: Mesh) -> None:
        values = [self.background] + [i.value for i in self.inclusions]
        if any(not v > 0 for v in values):
            raise PhantomError("phantom conductivities must be positive")
        finder = Triangulation(mesh.nodes[:, 0], mesh.nodes[:, 1], mesh.elements).get_trifinder()
        for inc in self.inclusions:
            if inc.shape not in ("disk", "rect"):
                raise PhantomError(f"unknown inclusion shape {inc.shape!r}")
            if finder(*inc.center) < 0:
                raise PhantomError(f"inclusion centre {inc.center} lies outside the domain")

    def on_mesh(self, mesh: Mesh) -> np.ndarray:
        sigma = np.full(mesh.n_elements, self.background)
        for inc in self.inclusions:
            sigma[inc.contains(mesh.centroids)] = inc.value
        return sigma


def load_phantom(path) -> Phantom:
    try:
        return Phantom.from_dict(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise PhantomError(f"{path}: {exc}") from exc


def save_phantom(path, phantom: Phantom) -> None:
    Path(path).write_text(json.dumps(phantom.to_dict(), indent=2))
