"""Conforming triangulations of polygonal domains."""

from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import MeshFormatError

__all__ = ["TriMesh", "disk_mesh", "refine", "load_mesh", "save_mesh", "mesh_stats"]

MESH_HEADER = "plates-mesh v1"


class TriMesh:
    """Triangle mesh with cached P1 element geometry.

    Parameters
    ----------
    nodes : (n_nodes, 2) array
    tris : (n_tris, 3) int array, counter-clockwise vertex order
    """

    def __init__(self, nodes, tris, validate=True):
        self.nodes = np.ascontiguousarray(nodes, dtype=float)
        self.tris = np.ascontiguousarray(tris, dtype=np.int64)
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 2:
            raise MeshFormatError(f"nodes must have shape (n, 2), got {self.nodes.shape}")
        if self.tris.ndim != 2 or self.tris.shape[1] != 3:
            raise MeshFormatError(f"tris must have shape (m, 3), got {self.tris.shape}")
        if validate:
            check_mesh(self.nodes, self.tris)
        self._compute_geometry()

    def _compute_geometry(self):
        p = self.nodes[self.tris]  # (T, 3, 2)
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        self.areas = 0.5 * det
        # gradient of barycentric coordinate i is rot90(opposite edge) / (2 area)
        e0 = p[:, 2] - p[:, 1]
        e1 = p[:, 0] - p[:, 2]
        e2 = p[:, 1] - p[:, 0]
        edges = np.stack([e0, e1, e2], axis=1)
        self.grads = np.stack([-edges[..., 1], edges[..., 0]], axis=-1) / det[:, None, None]
        lengths = np.linalg.norm(edges, axis=-1)
        self.diameters = lengths.max(axis=1)
        self.edge_lengths = lengths
        self.centroids = p.mean(axis=1)
        self.area = float(self.areas.sum())
        self.eps = float(self.diameters.max())
        # lumped mass: integral of each hat function
        self.node_weights = np.bincount(
            self.tris.ravel(), weights=np.repeat(self.areas / 3.0, 3), minlength=self.n_nodes
        )
        self.boundary_nodes = np.unique(_boundary_edges(self.tris))
        self._grad_ops = None
        self._scatter = None

    @property
    def grad_ops(self):
        """Sparse ``(D1, D2)``, each ``(n_tris, n_nodes)``: element-wise partial derivatives."""
        if self._grad_ops is None:
            rows = np.repeat(np.arange(self.n_tris), 3)
            cols = self.tris.ravel()
            shape = (self.n_tris, self.n_nodes)
            self._grad_ops = tuple(
                sp.csr_matrix((self.grads[..., b].ravel(), (rows, cols)), shape=shape)
                for b in range(2)
            )
        return self._grad_ops

    @property
    def scatter_op(self):
        """Sparse ``(n_nodes, 3 n_tris)`` summing per-vertex element values into nodes."""
        if self._scatter is None:
            k = self.tris.size
            self._scatter = sp.csr_matrix(
                (np.ones(k), (self.tris.ravel(), np.arange(k))), shape=(self.n_nodes, k)
            )
        return self._scatter

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_tris(self):
        return self.tris.shape[0]

    def barycenter(self):
        return (self.areas[:, None] * self.centroids).sum(axis=0) / self.area

    def second_moments(self):
        """Exact ``int x_i x_j dx`` over the mesh, as a 2x2 array."""
        p = self.nodes[self.tris]
        mid = 0.5 * (p + np.roll(p, -1, axis=1))  # edge midpoints, exact for quadratics
        outer = np.einsum("tki,tkj->tij", mid, mid) / 3.0
        return np.einsum("t,tij->ij", self.areas, outer)

    def translated(self, shift):
        return TriMesh(self.nodes + np.asarray(shift, dtype=float), self.tris, validate=False)

    def recentered(self):
        return self.translated(-self.barycenter())


def _edges(tris):
    return np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])


def _boundary_edges(tris):
    e = np.sort(_edges(tris), axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    return uniq[counts == 1]


def check_mesh(nodes, tris, first_tri_line=None):
    """Validate index bounds, orientation and conformity.

    ``first_tri_line`` maps triangle indices to file line numbers in error messages.
    """

    def line(i):
        return None if first_tri_line is None else first_tri_line + i

    n = nodes.shape[0]
    bad = np.flatnonzero((tris < 0).any(axis=1) | (tris >= n).any(axis=1))
    if bad.size:
        raise MeshFormatError(
            f"triangle {bad[0]} references a node index outside [0, {n})", line(bad[0])
        )
    degenerate = np.flatnonzero(
        (tris[:, 0] == tris[:, 1]) | (tris[:, 1] == tris[:, 2]) | (tris[:, 0] == tris[:, 2])
    )
    if degenerate.size:
        raise MeshFormatError(f"triangle {degenerate[0]} repeats a vertex", line(degenerate[0]))
    p = nodes[tris]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    neg = np.flatnonzero(det <= 0)
    if neg.size:
        raise MeshFormatError(f"triangle {neg[0]} has negative area", line(neg[0]))
    # each directed edge at most once; an interior edge appears once per direction
    directed = _edges(tris)
    _, idx, counts = np.unique(directed, axis=0, return_index=True, return_counts=True)
    if (counts > 1).any():
        k = idx[np.flatnonzero(counts > 1)[0]] % tris.shape[0]
        raise MeshFormatError(f"triangle {k} shares a directed edge with another triangle", line(k))
    und = np.sort(directed, axis=1)
    _, counts = np.unique(und, axis=0, return_counts=True)
    if (counts > 2).any():
        raise MeshFormatError("an edge is shared by more than two triangles")
    used = np.zeros(n, dtype=bool)
    used[tris.ravel()] = True
    if not used.all():
        raise MeshFormatError(f"node {np.flatnonzero(~used)[0]} belongs to no triangle")
    hanging = _hanging_node(nodes, _boundary_edges(tris))
    if hanging is not None:
        raise MeshFormatError(f"node {hanging} lies inside an unmatched edge (hanging node)")


def _hanging_node(nodes, edges, chunk=256):
    """A node strictly inside one of ``edges``, or ``None``."""
    scale = np.ptp(nodes, axis=0).max()
    for s in range(0, len(edges), chunk):
        e = edges[s:s + chunk]
        a, b = nodes[e[:, 0]], nodes[e[:, 1]]
        d = b - a
        L2 = np.sum(d * d, axis=1)
        r = nodes[:, None, :] - a[None]  # (n, k, 2)
        t = np.einsum("nkc,kc->nk", r, d) / L2
        cross = r[..., 0] * d[:, 1] - r[..., 1] * d[:, 0]
        on = (np.abs(cross) <= 1e-12 * scale * np.sqrt(L2)) & (t > 1e-12) & (t < 1 - 1e-12)
        if on.any():
            return int(np.argwhere(on)[0, 0])
    return None


def refine(mesh: TriMesh, radius=None):
    """One round of red refinement.

    Each triangle is split into four through its edge midpoints.  If ``radius``
    is given, midpoints of boundary edges are pushed radially onto the circle
    of that radius about the origin.
    """
    tris = mesh.tris
    n = mesh.n_nodes
    e = np.sort(_edges(tris), axis=1)
    uniq, inverse, counts = np.unique(e, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    mids = 0.5 * (mesh.nodes[uniq[:, 0]] + mesh.nodes[uniq[:, 1]])
    if radius is not None:
        on_boundary = counts == 1
        r = np.linalg.norm(mids[on_boundary], axis=1)
        mids[on_boundary] *= (radius / r)[:, None]
    nodes = np.vstack([mesh.nodes, mids])
    m = tris.shape[0]
    mid = inverse.reshape(3, m).T + n  # midpoints of edges (01, 12, 20)
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    ab, bc, ca = mid[:, 0], mid[:, 1], mid[:, 2]
    new = np.concatenate(
        [
            np.stack([a, ab, ca], axis=1),
            np.stack([ab, b, bc], axis=1),
            np.stack([ca, bc, c], axis=1),
            np.stack([ab, bc, ca], axis=1),
        ]
    )
    return TriMesh(nodes, new, validate=False)


def disk_mesh(radius=1.0, refinements=0) -> TriMesh:
    """Polygonal disk: six-triangle hexagon fan, red-refined with boundary snapping."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    if refinements < 0:
        raise ValueError("refinements must be non-negative")
    ang = np.arange(6) * np.pi / 3
    nodes = np.vstack([[0.0, 0.0], radius * np.column_stack([np.cos(ang), np.sin(ang)])])
    tris = np.array([[0, 1 + i, 1 + (i + 1) % 6] for i in range(6)])
    mesh = TriMesh(nodes, tris)
    for _ in range(refinements):
        mesh = refine(mesh, radius)
    return mesh.recentered()


def save_mesh(mesh: TriMesh, path):
    lines = [MESH_HEADER, f"{mesh.n_nodes} {mesh.n_tris}"]
    lines += [f"{x:.17g} {y:.17g}" for x, y in mesh.nodes]
    lines += [f"{i} {j} {k}" for i, j, k in mesh.tris]
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh(path) -> TriMesh:
    text = Path(path).read_text().split("\n")
    if text and text[-1] == "":
        text = text[:-1]
    if not text or text[0].strip() != MESH_HEADER:
        raise MeshFormatError(f"expected header {MESH_HEADER!r}", 1)
    try:
        n_nodes, n_tris = (int(s) for s in text[1].split())
    except (IndexError, ValueError):
        raise MeshFormatError("expected '<n_nodes> <n_tris>'", 2) from None
    if n_nodes < 3 or n_tris < 1:
        raise MeshFormatError("mesh needs at least three nodes and one triangle", 2)
    if len(text) != 2 + n_nodes + n_tris:
        raise MeshFormatError(
            f"expected {2 + n_nodes + n_tris} lines for the declared counts, found {len(text)}",
            len(text),
        )
    nodes = np.empty((n_nodes, 2))
    for i in range(n_nodes):
        ln = 3 + i
        parts = text[2 + i].split()
        if len(parts) != 2:
            raise MeshFormatError("expected two coordinates", ln)
        try:
            nodes[i] = [float(s) for s in parts]
        except ValueError:
            raise MeshFormatError("malformed coordinate", ln) from None
    tris = np.empty((n_tris, 3), dtype=np.int64)
    for i in range(n_tris):
        ln = 3 + n_nodes + i
        parts = text[2 + n_nodes + i].split()
        if len(parts) != 3:
            raise MeshFormatError("expected three node indices", ln)
        try:
            tris[i] = [int(s) for s in parts]
        except ValueError:
            raise MeshFormatError("malformed node index", ln) from None
    check_mesh(nodes, tris, first_tri_line=3 + n_nodes)
    return TriMesh(nodes, tris, validate=False)


def _angles(mesh):
    L = mesh.edge_lengths  # edge i is opposite vertex i
    a, b, c = L[:, 0], L[:, 1], L[:, 2]
    cos_a = (b**2 + c**2 - a**2) / (2 * b * c)
    cos_b = (a**2 + c**2 - b**2) / (2 * a * c)
    cos_c = (a**2 + b**2 - c**2) / (2 * a * b)
    return np.degrees(np.arccos(np.clip(np.stack([cos_a, cos_b, cos_c], axis=1), -1, 1)))


def mesh_stats(mesh: TriMesh):
    """Shape diagnostics; ``n_dofs`` counts the four P1 fields u1, u2, z1, z2."""
    return {
        "eps": mesh.eps,
        "min_angle": float(_angles(mesh).min()),
        "quasi_uniformity_ratio": float(mesh.diameters.max() / mesh.diameters.min()),
        "n_nodes": mesh.n_nodes,
        "n_tris": mesh.n_tris,
        "n_dofs": 4 * mesh.n_nodes,
        "area": mesh.area,
    }
