"""
Triangular meshes of the disk and the square with boundary electrodes.

Both generators are structured: the disk is built from concentric node rings
stitched together ring by ring, the square from a criss-cross grid. Boundary
edges are stored as one counter-clockwise cycle and electrodes are contiguous
runs of that cycle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class MeshError(ValueError):
    """Invalid mesh or electrode configuration."""


@dataclass(frozen=True, eq=False)
class Mesh:
    """Linear triangle mesh.

    Attributes
    ----------
    nodes : (N, 2) float array
        Node coordinates (cm).
    elements : (E, 3) int array
        Node indices per triangle, counter-clockwise.
    boundary_edges : (B, 2) int array
        Boundary edges ordered as one counter-clockwise cycle.
    """

    nodes: np.ndarray
    elements: np.ndarray
    boundary_edges: np.ndarray
    element_neighbors: tuple = field(init=False, repr=False)

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float)
        elements = np.array(self.elements, dtype=np.int64)
        boundary = np.array(self.boundary_edges, dtype=np.int64).reshape(-1, 2)
        for arr in (nodes, elements, boundary):
            arr.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "elements", elements)
        object.__setattr__(self, "boundary_edges", boundary)
        pairs, _ = _interior_edges(elements)
        neighbors = [[] for _ in range(len(elements))]
        for i, j in pairs:
            neighbors[i].append(int(j))
            neighbors[j].append(int(i))
        object.__setattr__(self, "element_neighbors", tuple(tuple(sorted(n)) for n in neighbors))

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.elements]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def areas(self) -> np.ndarray:
        return np.abs(self.signed_areas)

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.elements].mean(axis=1)

    @cached_property
    def basis_gradients(self) -> np.ndarray:
        """Gradients of the three P1 hat functions on every element, shape (E, 3, 2)."""
        p = self.nodes[self.elements]
        x, y = p[..., 0], p[..., 1]
        two_a = 2.0 * self.signed_areas[:, None]
        gx = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1) / two_a
        gy = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1) / two_a
        return np.stack([gx, gy], axis=2)

    @cached_property
    def interior_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Element pairs sharing an edge, shape (F, 2), and the shared edge lengths."""
        pairs, node_pairs = _interior_edges(self.elements)
        d = self.nodes[node_pairs[:, 0]] - self.nodes[node_pairs[:, 1]]
        return pairs, np.hypot(d[:, 0], d[:, 1])

    @cached_property
    def mean_element_diameter(self) -> float:
        p = self.nodes[self.elements]
        edges = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]], axis=1)
        return float(np.linalg.norm(edges, axis=2).max(axis=1).mean())

    @property
    def diameter(self) -> float:
        lo, hi = self.nodes.min(axis=0), self.nodes.max(axis=0)
        return float(np.hypot(*(hi - lo)))

    def validate(self) -> None:
        """Raise MeshError unless the structural invariants hold."""
        if np.any(self.signed_areas <= 0):
            raise MeshError("element with non-positive signed area")
        edge_count: dict[tuple[int, int], int] = {}
        for tri in self.elements:
            for a, b in ((0, 1), (1, 2), (2, 0)):
                key = tuple(sorted((int(tri[a]), int(tri[b]))))
                edge_count[key] = edge_count.get(key, 0) + 1
        for a, b in self.boundary_edges:
            if edge_count.get(tuple(sorted((int(a), int(b))))) != 1:
                raise MeshError(f"boundary edge ({a}, {b}) is not on exactly one element")
        n_boundary = sum(1 for c in edge_count.values() if c == 1)
        if n_boundary != len(self.boundary_edges):
            raise MeshError("boundary edge list does not cover the mesh boundary")
        for i, nbrs in enumerate(self.element_neighbors):
            for j in nbrs:
                if i not in self.element_neighbors[j]:
                    raise MeshError("element adjacency is not symmetric")


@dataclass(frozen=True, eq=False)
class ElectrodeLayout:
    """Electrodes as lists of indices into ``Mesh.boundary_edges``."""

    electrodes: tuple

    def __post_init__(self):
        object.__setattr__(self, "electrodes", tuple(tuple(int(i) for i in e) for e in self.electrodes))

    @property
    def n_electrodes(self) -> int:
        return len(self.electrodes)

    def validate(self, mesh: Mesh) -> None:
        seen: set[int] = set()
        n_b = len(mesh.boundary_edges)
        for k, edges in enumerate(self.electrodes):
            if not edges:
                raise MeshError(f"electrode {k} has no edges")
            if seen.intersection(edges):
                raise MeshError(f"electrode {k} overlaps another electrode")
            seen.update(edges)
            # consecutive boundary-cycle indices form a connected arc
            for a, b in zip(edges[:-1], edges[1:]):
                if (a + 1) % n_b != b:
                    raise MeshError(f"electrode {k} is not a connected boundary arc")


def _interior_edges(elements: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    local = np.array([[0, 1], [1, 2], [2, 0]])
    edges = np.sort(elements[:, local].reshape(-1, 2), axis=1)
    owner = np.repeat(np.arange(len(elements)), 3)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    edges, owner = edges[order], owner[order]
    same = np.all(edges[1:] == edges[:-1], axis=1)
    idx = np.nonzero(same)[0]
    pairs = np.stack([owner[idx], owner[idx + 1]], axis=1)
    return pairs, edges[idx]


def _orient(nodes: np.ndarray, elements: np.ndarray) -> np.ndarray:
    p = nodes[elements]
    d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    neg = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0] < 0
    elements = elements.copy()
    elements[neg] = elements[neg][:, [0, 2, 1]]
    return elements


def _stitch_rings(inner: list[int], key_in, outer: list[int], key_out) -> list[tuple[int, int, int]]:
    """Triangulate the annulus between two closed node rings.

    ``key(i)`` is the angular position of node ``i`` (``i`` may equal the ring
    length, meaning one full turn) as a ``(slot, fraction)`` pair compared
    exactly, so the pattern is invariant under any rotation by whole slots.
    """
    n_in, n_out = len(inner), len(outer)
    tris = []
    i = j = 0
    while i < n_in or j < n_out:
        if j < n_out and (i >= n_in or key_out(j + 1) < key_in(i + 1)):
            tris.append((inner[i % n_in], outer[j % n_out], outer[(j + 1) % n_out]))
            j += 1
        else:
            tris.append((inner[i % n_in], outer[j % n_out], inner[(i + 1) % n_in]))
            i += 1
    return tris


def _uniform_key(per_slot: int, offset: Fraction):
    def key(i):
        u = (i + offset) / per_slot
        whole = u.numerator // u.denominator
        return whole, u - whole
    return key


def _pattern_key(fractions):
    per_slot = len(fractions)

    def key(i):
        return i // per_slot, fractions[i % per_slot]
    return key


def _electrode_width(n_edges_per_slot: int, coverage: float, min_gap: int) -> int:
    width = int(round(coverage * n_edges_per_slot))
    return min(max(width, 1), n_edges_per_slot - min_gap)


def _slot_fractions(n_edges_per_slot: int, width: int, coverage: float, lead_edges: int):
    """Node positions within one slot (fractions of the slot, starting at 0).

    The slot holds ``lead_edges`` gap edges, then ``width`` electrode edges
    spanning exactly ``coverage`` of the slot, then the remaining gap edges.
    """
    trail_edges = n_edges_per_slot - width - lead_edges
    gap = 1.0 - coverage
    lead_len = gap / 2 if lead_edges else 0.0
    lengths = ([lead_len / max(lead_edges, 1)] * lead_edges + [coverage / width] * width
               + [(gap - lead_len) / trail_edges] * trail_edges)
    return np.concatenate([[0.0], np.cumsum(lengths)[:-1]])


def _check_common(target_elements: int, n_electrodes: int, coverage: float) -> None:
    if target_elements < 1:
        raise MeshError("target_elements must be positive")
    if n_electrodes < 2:
        raise MeshError("need at least two electrodes")
    if not 0.0 < coverage < 1.0:
        raise MeshError(f"electrode coverage {coverage} leaves no room between electrodes")


def _graded_rings(radius: float, boundary_size: float, grading: float, multiple: int,
                  min_boundary: int) -> tuple[np.ndarray, list[int]]:
    """Ring radii and node counts for a local size falling linearly from
    ``grading * boundary_size`` at the centre to ``boundary_size`` at the rim."""
    a = grading * boundary_size
    b = (grading - 1.0) * boundary_size / radius
    # s(r) = integral of dr / h(r) counts rings; spread them evenly in s
    total = radius / a if b == 0 else -np.log1p(-b * radius / a) / b
    n_rings = max(1, int(round(total)))
    s = np.arange(1, n_rings + 1) * total / n_rings
    radii = s * a if b == 0 else (a / b) * -np.expm1(-b * s)
    radii[-1] = radius
    sizes = a - b * radii
    counts = [multiple * max(1, int(round(2 * np.pi * r / (h * multiple))))
              for r, h in zip(radii, sizes)]
    counts[-1] = max(counts[-1], min_boundary)
    return radii, counts


def build_disk_mesh(radius: float, target_elements: int, n_electrodes: int = 16,
                    electrode_coverage: float = 0.5,
                    grading: float = 4.0) -> tuple[Mesh, ElectrodeLayout]:
    """Ring-structured triangulation of a disk centred at the origin.

    Every ring carries a multiple of ``n_electrodes`` nodes, so the mesh and
    the electrode layout share the rotational symmetry of order
    ``n_electrodes``. Element size shrinks linearly towards the rim, where
    elements are ``grading`` times smaller than at the centre. Boundary nodes
    are placed so that each electrode arc covers exactly
    ``electrode_coverage`` of its slot; electrode 0 is centred on the
    positive x axis.
    """
    if radius <= 0:
        raise MeshError("radius must be positive")
    if not grading >= 1.0:
        raise MeshError("grading must be at least 1")
    _check_common(target_elements, n_electrodes, electrode_coverage)
    min_boundary = max(24, 2 * n_electrodes)
    best = None
    for size in radius * np.geomspace(2.0, 1e-3, 400):
        radii, counts = _graded_rings(radius, size, grading, n_electrodes, min_boundary)
        n_el = counts[0] + sum(a + b for a, b in zip(counts[:-1], counts[1:]))
        score = abs(n_el - target_elements)
        if best is None or score < best[0]:
            best = (score, radii, counts)
    _, radii, counts = best
    n_rings = len(counts)

    slot = counts[-1] // n_electrodes
    width = _electrode_width(slot, electrode_coverage, 1)
    boundary_fractions = _slot_fractions(slot, width, electrode_coverage, 0)
    rotation = -np.pi * electrode_coverage / n_electrodes

    nodes = [(0.0, 0.0)]
    rings, keys = [], []
    for k, n in enumerate(counts, start=1):
        per_slot = n // n_electrodes
        if k == n_rings:
            key = _pattern_key(boundary_fractions)
        else:
            key = _uniform_key(per_slot, Fraction(1, 2) if k % 2 else Fraction(0))
        pos = np.array([s + float(f) for s, f in map(key, range(n))])
        theta = 2 * np.pi * pos / n_electrodes + rotation
        r = radii[k - 1]
        rings.append(list(range(len(nodes), len(nodes) + n)))
        keys.append(key)
        nodes.extend(zip(r * np.cos(theta), r * np.sin(theta)))
    nodes = np.array(nodes)

    tris = [(0, rings[0][j], rings[0][(j + 1) % counts[0]]) for j in range(counts[0])]
    for k in range(n_rings - 1):
        tris += _stitch_rings(rings[k], keys[k], rings[k + 1], keys[k + 1])
    elements = _orient(nodes, np.array(tris))
    outer = rings[-1]
    boundary = np.array([(outer[j], outer[(j + 1) % len(outer)]) for j in range(len(outer))])

    layout = ElectrodeLayout([[e * slot + i for i in range(width)] for e in range(n_electrodes)])
    mesh = Mesh(nodes, elements, boundary)
    layout.validate(mesh)
    return mesh, layout


def build_square_mesh(width: float, target_elements: int, n_electrodes: int = 16,
                      electrode_coverage: float = 0.5) -> tuple[Mesh, ElectrodeLayout]:
    """Criss-cross triangulation of ``[-w/2, w/2]^2`` with electrodes evenly split over the sides.

    Grid lines are graded so that every electrode spans exactly
    ``electrode_coverage`` of its slot, centred, with gap edges on both sides.
    """
    if width <= 0:
        raise MeshError("width must be positive")
    _check_common(target_elements, n_electrodes, electrode_coverage)
    if n_electrodes % 4:
        raise MeshError("square geometry needs a multiple of 4 electrodes")
    per_side = n_electrodes // 4
    slot = max(3, round(np.sqrt(target_elements / 2) / per_side))
    nx = per_side * slot
    w_edges = _electrode_width(slot, electrode_coverage, 2)
    lead = (slot - w_edges) // 2
    fractions = _slot_fractions(slot, w_edges, electrode_coverage, lead)
    ticks = (np.arange(per_side)[:, None] + fractions[None, :]).ravel() / per_side
    xs = width * (np.append(ticks, 1.0) - 0.5)

    X, Y = np.meshgrid(xs, xs)
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange((nx + 1) ** 2).reshape(nx + 1, nx + 1)
    tris = []
    for r in range(nx):
        for c in range(nx):
            a, b, d, e = idx[r, c], idx[r, c + 1], idx[r + 1, c + 1], idx[r + 1, c]
            if (r + c) % 2 == 0:
                tris += [(a, b, d), (a, d, e)]
            else:
                tris += [(a, b, e), (b, d, e)]
    elements = _orient(nodes, np.array(tris))

    # counter-clockwise from the bottom-left corner; the left and top sides run
    # against the grid direction, so their slots are mirrored
    ring = ([idx[0, c] for c in range(nx)] + [idx[r, nx] for r in range(nx)]
            + [idx[nx, c] for c in range(nx, 0, -1)] + [idx[r, 0] for r in range(nx, 0, -1)])
    boundary = np.array([(ring[j], ring[(j + 1) % len(ring)]) for j in range(len(ring))])
    electrodes = []
    for side in range(4):
        for e in range(per_side):
            start = lead if side < 2 else slot - lead - w_edges
            first = side * nx + e * slot + start
            electrodes.append(list(range(first, first + w_edges)))
    layout = ElectrodeLayout(electrodes)
    mesh = Mesh(nodes, elements, boundary)
    layout.validate(mesh)
    return mesh, layout


def element_adjacency_laplacian(mesh: Mesh) -> sp.csr_matrix:
    """Graph Laplacian of the element edge-adjacency graph."""
    pairs, _ = mesh.interior_edges
    n = mesh.n_elements
    i, j = pairs[:, 0], pairs[:, 1]
    adj = sp.coo_matrix((np.ones(len(pairs)), (i, j)), shape=(n, n))
    adj = (adj + adj.T).tocsr()
    degree = np.asarray(adj.sum(axis=1)).ravel()
    return (sp.diags(degree) - adj).tocsr()


def save_mesh(path, mesh: Mesh, layout: ElectrodeLayout, **meta) -> None:
    doc = {
        "nodes": mesh.nodes.tolist(),
        "elements": mesh.elements.tolist(),
        "boundary_edges": mesh.boundary_edges.tolist(),
        "electrodes": [list(e) for e in layout.electrodes],
    }
    if meta:
        doc["meta"] = meta
    Path(path).write_text(json.dumps(doc))


def load_mesh(path) -> tuple[Mesh, ElectrodeLayout]:
    try:
        doc = json.loads(Path(path).read_text())
        nodes, elements = doc["nodes"], doc["elements"]
        electrodes = doc["electrodes"]
    except (KeyError, json.JSONDecodeError) as exc:
        raise MeshError(f"malformed mesh file {path}: {exc}") from exc
    if "boundary_edges" in doc:
        boundary = doc["boundary_edges"]
    else:
        boundary = _boundary_cycle(np.asarray(elements))
    mesh = Mesh(np.asarray(nodes), np.asarray(elements), np.asarray(boundary))
    layout = ElectrodeLayout(electrodes)
    mesh.validate()
    layout.validate(mesh)
    return mesh, layout


def _boundary_cycle(elements: np.ndarray) -> np.ndarray:
    # directed edges of CCW triangles whose reverse is absent form the CCW boundary
    directed = elements[:, [[0, 1], [1, 2], [2, 0]]].reshape(-1, 2)
    present = {tuple(e) for e in directed.tolist()}
    succ = {a: b for a, b in directed.tolist() if (b, a) not in present}
    start = min(succ)
    cycle, a = [], start
    while True:
        b = succ[a]
        cycle.append((a, b))
        a = b
        if a == start:
            break
    return np.array(cycle)
