"""Triangulations with region tags.

A mesh serves double duty here: it carries the linear finite element space
(nodes, triangles, shape function gradients) and the control partition
(one diffusivity region per element). Meshes are immutable after
construction; all builders return fully validated instances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FLUX = "flux"
ESSENTIAL = "essential"

# Triangles flatter than this signed area are rejected as degenerate.
AREA_TOL = 1e-14


class MeshError(ValueError):
    """Invalid mesh data (topology, orientation, or region tags)."""


class MeshFormatError(MeshError):
    """Malformed mesh file; carries the offending 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class Mesh:
    """Immutable linear-triangle mesh with per-element region tags.

    Attributes
    ----------
    nodes : (n_nodes, 2) float array
        Node coordinates.
    elements : (n_elements, 3) int array
        Node indices per triangle, counter-clockwise.
    region_of_element : (n_elements,) int array
        Control region id per element, covering ``0..n_regions-1``.
    n_regions : int
        Number of control regions.
    boundary_edges : list of (node, node, kind)
        Edges owned by exactly one element, kind ``"flux"`` or
        ``"essential"``.
    dirichlet_nodes : dict
        Node id to prescribed value on the essential boundary.
    """

    nodes: np.ndarray
    elements: np.ndarray
    region_of_element: np.ndarray
    n_regions: int
    boundary_edges: list = field(default_factory=list)
    dirichlet_nodes: dict = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    def element_coords(self, e: int) -> np.ndarray:
        """Coordinates of element ``e`` as a (3, 2) array."""
        return self.nodes[self.elements[e]]

    def region_areas(self) -> np.ndarray:
        """Total area of each control region, shape (n_regions,)."""
        areas, _ = all_element_gradients(self)
        out = np.zeros(self.n_regions)
        np.add.at(out, self.region_of_element, areas)
        return out

    def region_nodes(self, region: int) -> np.ndarray:
        """Sorted ids of all nodes touching elements of ``region``."""
        mask = self.region_of_element == region
        return np.unique(self.elements[mask])


def _signed_areas(nodes: np.ndarray, elements: np.ndarray) -> np.ndarray:
    p = nodes[elements]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _extract_boundary_edges(elements: np.ndarray) -> list:
    """Edges owned by exactly one element, as (a, b) with a, b in element order."""
    counts: dict = {}
    for tri in elements:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (min(a, b), max(a, b))
            counts[key] = counts.get(key, 0) + 1
    bad = [k for k, v in counts.items() if v > 2]
    if bad:
        raise MeshError(f"edge {bad[0]} shared by more than two elements")
    return sorted(k for k, v in counts.items() if v == 1)


def from_arrays(
    nodes,
    elements,
    region_of_element,
    dirichlet_nodes: dict | None = None,
) -> Mesh:
    """Build a validated mesh from raw arrays.

    Clockwise triangles are reoriented, boundary edges extracted, and
    region tags checked to cover ``0..max`` with no gaps. Boundary edges
    with both endpoints in ``dirichlet_nodes`` are tagged essential, all
    others flux.
    """
    nodes = np.ascontiguousarray(nodes, dtype=float)
    elements = np.ascontiguousarray(elements, dtype=np.int64)
    regions = np.ascontiguousarray(region_of_element, dtype=np.int64)
    if nodes.ndim != 2 or nodes.shape[1] != 2:
        raise MeshError("nodes must be an (n, 2) array")
    if elements.ndim != 2 or elements.shape[1] != 3:
        raise MeshError("elements must be an (m, 3) array")
    if regions.shape != (elements.shape[0],):
        raise MeshError("region_of_element length must match element count")
    if elements.size and (elements.min() < 0 or elements.max() >= len(nodes)):
        raise MeshError("element node index out of range")
    for e, tri in enumerate(elements):
        if len(set(tri)) != 3:
            raise MeshError(f"element {e} repeats a node")

    # Reorient clockwise triangles; reject degenerate ones.
    areas = _signed_areas(nodes, elements)
    flip = areas < 0
    elements = elements.copy()
    elements[flip] = elements[flip][:, [0, 2, 1]]
    if np.any(np.abs(areas) <= AREA_TOL):
        e = int(np.argmin(np.abs(areas)))
        raise MeshError(f"element {e} is degenerate (area {areas[e]:.3e})")

    if regions.size:
        if regions.min() < 0:
            raise MeshError("negative region id")
        n_regions = int(regions.max()) + 1
        present = np.unique(regions)
        if len(present) != n_regions:
            missing = sorted(set(range(n_regions)) - set(present.tolist()))
            raise MeshError(f"region ids have gaps, missing {missing}")
    else:
        n_regions = 0

    dirichlet = dict(dirichlet_nodes or {})
    for n in dirichlet:
        if not 0 <= n < len(nodes):
            raise MeshError(f"dirichlet node {n} out of range")

    edges = _extract_boundary_edges(elements)
    boundary_edges = [
        (int(a), int(b), ESSENTIAL if (a in dirichlet and b in dirichlet) else FLUX)
        for a, b in edges
    ]

    nodes.setflags(write=False)
    elements.setflags(write=False)
    regions.setflags(write=False)
    return Mesh(nodes, elements, regions, n_regions, boundary_edges, dirichlet)


def build_unit_square(nx: int, ny: int, patch_nx: int = 1, patch_ny: int = 1) -> Mesh:
    """Uniform triangulation of the unit square with patch regions.

    Each of the ``nx * ny`` cells is split along its lower-left to
    upper-right diagonal, giving ``2*nx*ny`` triangles. Elements are
    tagged with the index of the axis-aligned patch containing their
    centroid, row-major over a ``patch_nx x patch_ny`` grid. All
    boundary edges are flux edges.

    Parameters
    ----------
    nx, ny : int
        Cells per side.
    patch_nx, patch_ny : int
        Control patches per side; must divide ``nx`` and ``ny``.
    """
    if not (nx >= patch_nx >= 1 and ny >= patch_ny >= 1):
        raise MeshError("need nx >= patch_nx >= 1 and ny >= patch_ny >= 1")
    if nx % patch_nx or ny % patch_ny:
        raise MeshError(
            f"patch grid {patch_nx}x{patch_ny} does not divide cell grid {nx}x{ny}"
        )

    xs = np.linspace(0.0, 1.0, nx + 1)
    ys = np.linspace(0.0, 1.0, ny + 1)
    xx, yy = np.meshgrid(xs, ys)
    nodes = np.column_stack([xx.ravel(), yy.ravel()])

    def nid(ix, iy):
        return iy * (nx + 1) + ix

    elements = []
    regions = []
    for iy in range(ny):
        for ix in range(nx):
            n00 = nid(ix, iy)
            n10 = nid(ix + 1, iy)
            n01 = nid(ix, iy + 1)
            n11 = nid(ix + 1, iy + 1)
            patch = (iy * patch_ny // ny) * patch_nx + (ix * patch_nx // nx)
            elements.append((n00, n10, n11))
            elements.append((n00, n11, n01))
            regions.extend((patch, patch))
    return from_arrays(nodes, np.array(elements), np.array(regions))


def element_gradients(mesh: Mesh, e: int):
    """Area and constant shape-function gradients of triangle ``e``.

    Returns
    -------
    area : float
    grads : (3, 2) array
        Gradient of each of the three linear shape functions; the rows
        sum to zero.
    """
    if not 0 <= e < mesh.n_elements:
        raise MeshError(f"element id {e} out of range")
    p = mesh.element_coords(e)
    d1 = p[1] - p[0]
    d2 = p[2] - p[0]
    area = 0.5 * (d1[0] * d2[1] - d1[1] * d2[0])
    if area <= AREA_TOL:
        raise MeshError(f"element {e} is degenerate (area {area:.3e})")
    # Gradient of N_a is the rotated opposite edge over twice the area.
    grads = np.empty((3, 2))
    for a in range(3):
        q1 = p[(a + 1) % 3]
        q2 = p[(a + 2) % 3]
        grads[a, 0] = (q1[1] - q2[1]) / (2.0 * area)
        grads[a, 1] = (q2[0] - q1[0]) / (2.0 * area)
    return area, grads


def all_element_gradients(mesh: Mesh):
    """Vectorized :func:`element_gradients` over the whole mesh.

    Returns
    -------
    areas : (n_elements,) array
    grads : (n_elements, 3, 2) array
    """
    p = mesh.nodes[mesh.elements]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    areas = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    grads = np.empty((mesh.n_elements, 3, 2))
    for a in range(3):
        q1 = p[:, (a + 1) % 3]
        q2 = p[:, (a + 2) % 3]
        grads[:, a, 0] = q1[:, 1] - q2[:, 1]
        grads[:, a, 1] = q2[:, 0] - q1[:, 0]
    grads /= (2.0 * areas)[:, None, None]
    return areas, grads


def save_mesh(mesh: Mesh, path) -> None:
    """Write a mesh in the line-oriented text format of :func:`load_mesh`."""
    lines = ["mesh 2d tri"]
    lines.append(f"nodes {mesh.n_nodes}")
    for x, y in mesh.nodes:
        lines.append(f"{float(x)!r} {float(y)!r}")
    lines.append(f"elements {mesh.n_elements}")
    for tri, r in zip(mesh.elements, mesh.region_of_element):
        lines.append(f"{tri[0]} {tri[1]} {tri[2]} {r}")
    if mesh.dirichlet_nodes:
        lines.append(f"dirichlet {len(mesh.dirichlet_nodes)}")
        for n in sorted(mesh.dirichlet_nodes):
            lines.append(f"{int(n)} {float(mesh.dirichlet_nodes[n])!r}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_mesh(path) -> Mesh:
    """Read a mesh text file.

    Format (``#`` starts a comment, blank lines ignored)::

        mesh 2d tri
        nodes N
        x y            # N lines
        elements M
        a b c region   # M lines, 0-based node ids
        dirichlet K    # optional
        node value     # K lines

    Clockwise triangles are reoriented. Malformed counts, out-of-range
    indices, and zero-area elements raise :class:`MeshFormatError` with
    the offending line number.
    """
    with open(path) as f:
        raw = f.readlines()

    # Significant lines with their original 1-based numbers.
    lines = []
    for i, text in enumerate(raw, start=1):
        stripped = text.split("#", 1)[0].strip()
        if stripped:
            lines.append((i, stripped))

    pos = 0

    def take(what: str):
        nonlocal pos
        if pos >= len(lines):
            last = lines[-1][0] if lines else 1
            raise MeshFormatError(f"unexpected end of file, expected {what}", last)
        item = lines[pos]
        pos += 1
        return item

    ln, header = take("header")
    if header != "mesh 2d tri":
        raise MeshFormatError(f"bad header {header!r}, expected 'mesh 2d tri'", ln)

    def section(name: str) -> int:
        ln, text = take(f"'{name}' section")
        parts = text.split()
        if len(parts) != 2 or parts[0] != name:
            raise MeshFormatError(f"expected '{name} <count>', got {text!r}", ln)
        try:
            count = int(parts[1])
        except ValueError:
            raise MeshFormatError(f"bad {name} count {parts[1]!r}", ln) from None
        if count < 0:
            raise MeshFormatError(f"negative {name} count", ln)
        return count

    n_nodes = section("nodes")
    nodes = np.empty((n_nodes, 2))
    for k in range(n_nodes):
        ln, text = take("node line")
        parts = text.split()
        if len(parts) != 2:
            raise MeshFormatError(f"expected 'x y', got {text!r}", ln)
        try:
            nodes[k] = [float(parts[0]), float(parts[1])]
        except ValueError:
            raise MeshFormatError(f"bad coordinate in {text!r}", ln) from None

    n_elements = section("elements")
    elements = np.empty((n_elements, 3), dtype=np.int64)
    regions = np.empty(n_elements, dtype=np.int64)
    element_lines = np.empty(n_elements, dtype=np.int64)
    for k in range(n_elements):
        ln, text = take("element line")
        parts = text.split()
        if len(parts) != 4:
            raise MeshFormatError(f"expected 'a b c region', got {text!r}", ln)
        try:
            vals = [int(p) for p in parts]
        except ValueError:
            raise MeshFormatError(f"bad integer in {text!r}", ln) from None
        elements[k] = vals[:3]
        regions[k] = vals[3]
        element_lines[k] = ln
        if min(vals[:3]) < 0 or max(vals[:3]) >= n_nodes:
            raise MeshFormatError(f"node index out of range in {text!r}", ln)
        if vals[3] < 0:
            raise MeshFormatError(f"negative region id in {text!r}", ln)

    dirichlet: dict = {}
    if pos < len(lines):
        n_dir = section("dirichlet")
        for _ in range(n_dir):
            ln, text = take("dirichlet line")
            parts = text.split()
            if len(parts) != 2:
                raise MeshFormatError(f"expected 'node value', got {text!r}", ln)
            try:
                node = int(parts[0])
                value = float(parts[1])
            except ValueError:
                raise MeshFormatError(f"bad dirichlet entry {text!r}", ln) from None
            if not 0 <= node < n_nodes:
                raise MeshFormatError(f"dirichlet node {node} out of range", ln)
            dirichlet[node] = value
    if pos < len(lines):
        ln, text = lines[pos]
        raise MeshFormatError(f"trailing content {text!r}", ln)

    # Per-element degenerate check, so errors can name the file line.
    areas = _signed_areas(nodes, elements)
    for k in range(n_elements):
        if abs(areas[k]) <= AREA_TOL:
            raise MeshFormatError(
                f"zero-area element ({elements[k].tolist()})", int(element_lines[k])
            )
    try:
        return from_arrays(nodes, elements, regions, dirichlet)
    except MeshError as exc:
        raise MeshFormatError(str(exc)) from exc


def meshes_equal(a: Mesh, b: Mesh) -> bool:
    """Structural equality of two meshes (exact coordinate match)."""
    return (
        np.array_equal(a.nodes, b.nodes)
        and np.array_equal(a.elements, b.elements)
        and np.array_equal(a.region_of_element, b.region_of_element)
        and a.n_regions == b.n_regions
        and a.boundary_edges == b.boundary_edges
        and a.dirichlet_nodes == b.dirichlet_nodes
    )
