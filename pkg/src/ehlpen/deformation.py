"""Elastic half-space deformation of the film.

The gap at a point is ``h00 + (x^2 + y^2) / 2`` plus the elastic term
``(2 / pi^2) * int u(x', y') / r``.  For a bilinear pressure this is a linear
map from nodal pressures to values at evaluation points, stored as a dense
influence matrix or, on the vertex lattice, as its block-Toeplitz generator.

Integrals over elements away from the evaluation point use a tensor Gauss
rule.  Elements whose closure contains the point are split into (up to) four
sub-rectangles meeting at it, and each corner-singular piece is integrated by
geometric subdivision towards the singular corner.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import signal, sparse

from .mesh import InvalidConfiguration, RectDualMesh, shape_values

__all__ = [
    "KERNEL_PREFACTOR",
    "KernelBudgetExceeded",
    "KernelMatrix",
    "SingularRule",
    "assemble_kernel_matrix",
    "build_kernel",
    "film_thickness",
    "gauss_rule",
    "kernel_generator",
    "load_kernel_cache",
    "regular_panel_integral",
    "rigid_gap",
    "save_kernel_cache",
    "singular_panel_integral",
]

log = logging.getLogger(__name__)

KERNEL_PREFACTOR = 2.0 / np.pi**2

# dense storage guard, in matrix entries (8 bytes each)
DIRECT_AUTO_LIMIT = 1100
DEFAULT_MAX_DENSE_ENTRIES = 40_000_000


class KernelBudgetExceeded(MemoryError):
    pass


@lru_cache(maxsize=None)
def gauss_rule(m: int):
    """m-point Gauss-Legendre nodes and weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(m)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    x.flags.writeable = False
    w.flags.writeable = False
    return x, w


@dataclass(frozen=True)
class SingularRule:
    theta: float = 0.5
    n_levels: int = 12
    m: int = 4

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise InvalidConfiguration("theta must lie in (0, 1), got %r" % (self.theta,))
        if self.n_levels < 1 or self.m < 2:
            raise InvalidConfiguration("need n_levels >= 1 and m >= 2")

    def nodes(self):
        """Nodes ``(P, 2)`` and weights ``(P,)`` on the unit square."""
        return _subdivision_nodes(self.theta, self.n_levels, self.m)


def _tensor_panel(x0, x1, y0, y1, m):
    g, w = gauss_rule(m)
    X, Y = np.meshgrid(x0 + (x1 - x0) * g, y0 + (y1 - y0) * g, indexing="ij")
    W = np.outer(w, w) * (x1 - x0) * (y1 - y0)
    return X.ravel(), Y.ravel(), W.ravel()


@lru_cache(maxsize=32)
def _subdivision_nodes(theta, n_levels, m):
    xs, ys, ws = [], [], []
    for i in range(1, n_levels + 1):
        outer, inner = theta ** (i - 1), theta**i
        # L-shaped annulus between [0, inner]^2 and [0, outer]^2
        for box in (
            (inner, outer, 0.0, inner),
            (0.0, inner, inner, outer),
            (inner, outer, inner, outer),
        ):
            x, y, w = _tensor_panel(*box, m)
            xs.append(x)
            ys.append(y)
            ws.append(w)
    # innermost square: same tensor rule, its nodes stay off the singular corner
    x, y, w = _tensor_panel(0.0, theta**n_levels, 0.0, theta**n_levels, m)
    xs.append(x)
    ys.append(y)
    ws.append(w)
    pts = np.column_stack([np.concatenate(xs), np.concatenate(ys)])
    wts = np.concatenate(ws)
    pts.flags.writeable = False
    wts.flags.writeable = False
    return pts, wts


def _inverse_distance(x, y):
    return 1.0 / np.sqrt(x * x + y * y)


def singular_panel_integral(F, theta=0.5, n_levels=12, m=4, kernel=None):
    """Integrate ``F * kernel`` over the unit square, singular at the origin.

    ``kernel`` defaults to ``1 / sqrt(x^2 + y^2)``.  Each subdivision level is
    the L-shaped region between the nested squares of side ``theta**i`` and
    ``theta**(i - 1)``, split into three rectangles with an ``m`` by ``m``
    Gauss rule each.
    """
    pts, wts = SingularRule(theta, n_levels, m).nodes()
    x, y = pts[:, 0], pts[:, 1]
    G = _inverse_distance(x, y) if kernel is None else np.asarray(kernel(x, y), dtype=float)
    vals = np.asarray(F(x, y), dtype=float) * G
    return float(np.dot(vals, wts))


def regular_panel_integral(eval_point, element, basis_index, m=4):
    """Gauss approximation of ``int_e N_i / |x - x'|`` on a rectangle.

    ``element`` is ``(x0, x1, y0, y1)``; ``basis_index`` picks the bilinear
    shape function by corner (0..3 counterclockwise from bottom-left), or
    ``None`` for the constant 1.  The point must lie outside the closed element.
    """
    x0, x1, y0, y1 = element
    px, py = eval_point
    if x0 <= px <= x1 and y0 <= py <= y1:
        raise ValueError("evaluation point lies in the element; use the singular path")
    g, w = gauss_rule(m)
    S, T = np.meshgrid(g, g, indexing="ij")
    W = np.outer(w, w)
    X = x0 + (x1 - x0) * S
    Y = y0 + (y1 - y0) * T
    N = np.ones_like(S) if basis_index is None else shape_values(S, T)[..., basis_index]
    jac = (x1 - x0) * (y1 - y0)
    return float(jac * np.sum(W * N / np.hypot(px - X, py - Y)))


def split_element_integrals(eval_point, element, rule: SingularRule):
    """Integrals of the four shape functions for a point inside the element.

    The element is cut into up to four sub-rectangles about the point; each
    has its singular corner at the point and goes through the subdivision
    rule.  Returns an array of 4 values (one per corner shape function).
    """
    x0, x1, y0, y1 = element
    px, py = eval_point
    hx, hy = x1 - x0, y1 - y0
    pts, wts = rule.nodes()
    out = np.zeros(4)
    for sx, a in ((1.0, x1 - px), (-1.0, px - x0)):
        for sy, b in ((1.0, y1 - py), (-1.0, py - y0)):
            if a <= 0.0 or b <= 0.0:
                continue
            X = px + sx * a * pts[:, 0]
            Y = py + sy * b * pts[:, 1]
            N = shape_values((X - x0) / hx, (Y - y0) / hy)
            G = 1.0 / np.hypot(a * pts[:, 0], b * pts[:, 1])
            out += a * b * ((wts * G) @ N)
    return out


def _regular_cell_integrals(px, py, hx, hy, m):
    """Shape-function integrals over the cell [0, hx] x [0, hy] seen from (px, py).

    ``px``, ``py`` are arrays of evaluation points relative to the cell origin.
    Returns ``px.shape + (4,)``.
    """
    g, w = gauss_rule(m)
    S, T = np.meshgrid(g, g, indexing="ij")
    S, T = S.ravel(), T.ravel()
    W = np.outer(w, w).ravel() * hx * hy
    N = shape_values(S, T) * W[:, None]  # (q, 4)
    px = np.asarray(px, dtype=float)[..., None]
    py = np.asarray(py, dtype=float)[..., None]
    inv_r = 1.0 / np.hypot(px - hx * S, py - hy * T)
    return inv_r @ N


class KernelMatrix:
    """Influence matrix mapping nodal pressures to elastic deformation.

    Rows are evaluation points, columns are mesh vertices, and the
    ``2 / pi^2`` prefactor is included.  Backed either by dense ``entries``
    or, when evaluation points are the mesh vertices, by the block-Toeplitz
    ``generator`` indexed ``[dj + ny, di + nx]``.

    Hat functions of boundary vertices are clipped by the domain, so only the
    interior columns are Toeplitz.  Pressures vanish on the boundary; the
    generator-backed product drops boundary values and dense entries built
    from the generator carry zero boundary columns.
    """

    def __init__(self, mesh: RectDualMesh, eval_points, entries=None, generator=None,
                 rule=None, m=4):
        if entries is None and generator is None:
            raise ValueError("need dense entries or a Toeplitz generator")
        self.mesh_id = mesh.mesh_id
        self.grid_shape = mesh.grid_shape
        self._interior = ~mesh.dirichlet_mask
        self.eval_points = np.asarray(eval_points, dtype=float)
        self._entries = entries
        self.generator = generator
        self.rule = rule if rule is not None else SingularRule()
        self.m = m
        self._trunc_cache = {}

    @property
    def shape(self):
        return (len(self.eval_points), self.grid_shape[0] * self.grid_shape[1])

    @property
    def on_vertices(self) -> bool:
        return self.generator is not None

    @property
    def entries(self) -> np.ndarray:
        if self._entries is None:
            self._entries = self._dense_from_generator()
        return self._entries

    def has_dense(self) -> bool:
        return self._entries is not None

    def _dense_from_generator(self, max_entries=DEFAULT_MAX_DENSE_ENTRIES):
        n = self.shape[1]
        if n * n > max_entries:
            raise KernelBudgetExceeded(
                "dense kernel of %d x %d entries exceeds budget %d" % (n, n, max_entries)
            )
        ny1, nx1 = self.grid_shape
        J, I = np.divmod(np.arange(n), nx1)
        di = I[:, None] - I[None, :]
        dj = J[:, None] - J[None, :]
        return self.generator[dj + ny1 - 1, di + nx1 - 1] * self._interior[None, :]

    def check_mesh(self, mesh: RectDualMesh):
        if mesh.mesh_id != self.mesh_id:
            raise ValueError(
                "kernel assembled for mesh %s, used with mesh %s" % (self.mesh_id, mesh.mesh_id)
            )

    def apply(self, u) -> np.ndarray:
        """Elastic deformation at the evaluation points for nodal pressure ``u``."""
        u = np.asarray(u, dtype=float)
        if self._entries is not None:
            return self._entries @ u
        ny1, nx1 = self.grid_shape
        u = np.where(self._interior, u, 0.0)
        full = signal.fftconvolve(u.reshape(ny1, nx1), self.generator, mode="full")
        return full[ny1 - 1 : 2 * ny1 - 1, nx1 - 1 : 2 * nx1 - 1].ravel()

    def truncated(self, radius: int = 2) -> sparse.csr_matrix:
        """Sparse copy keeping only vertex offsets with ``max(|di|, |dj|) <= radius``."""
        if not self.on_vertices:
            raise ValueError("truncation needs a vertex-lattice kernel")
        if radius in self._trunc_cache:
            return self._trunc_cache[radius]
        ny1, nx1 = self.grid_shape
        n = ny1 * nx1
        rows, cols, vals = [], [], []
        J, I = np.divmod(np.arange(n), nx1)
        for dj in range(-radius, radius + 1):
            for di in range(-radius, radius + 1):
                ok = (I + di >= 0) & (I + di < nx1) & (J + dj >= 0) & (J + dj < ny1)
                r = np.flatnonzero(ok)
                rows.append(r)
                cols.append(r + di + nx1 * dj)
                # entry (i, k) is generator[i - k]
                vals.append(np.full(r.size, self.generator[-dj + ny1 - 1, -di + nx1 - 1]))
        mat = sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        )
        self._trunc_cache[radius] = mat
        return mat


def kernel_generator(mesh: RectDualMesh, m=4, rule: SingularRule | None = None) -> np.ndarray:
    """Block-Toeplitz generator of the vertex-to-vertex influence matrix.

    ``g[dj + ny, di + nx]`` is the deformation at a vertex caused by a unit
    nodal pressure at the vertex offset by ``(-di, -dj)`` cells.  Built from
    shape-function integrals over a single reference cell seen from every
    lattice point, which is exact reuse on a uniform mesh.
    """
    rule = rule if rule is not None else SingularRule()
    nx, ny, hx, hy = mesh.nx, mesh.ny, mesh.hx, mesh.hy
    # lattice points relative to a reference cell with corners (0,0)..(1,1)
    P = np.arange(-nx, nx + 2)
    Q = np.arange(-ny, ny + 2)
    PP, QQ = np.meshgrid(P, Q)
    E = _regular_cell_integrals(PP * hx, QQ * hy, hx, hy, m)
    for p in (0, 1):
        for q in (0, 1):
            E[q + ny, p + nx] = split_element_integrals(
                (p * hx, q * hy), (0.0, hx, 0.0, hy), rule
            )
    g = np.zeros((2 * ny + 1, 2 * nx + 1))
    # the anchor vertex is corner c of the cell whose origin is (-cx, -cy)
    for c, (cx, cy) in enumerate(((0, 0), (1, 0), (1, 1), (0, 1))):
        # eval offset d = (di, dj) lies at lattice point d + (cx, cy) of that cell
        g += E[cy : cy + 2 * ny + 1, cx : cx + 2 * nx + 1, c]
    return KERNEL_PREFACTOR * g


def assemble_kernel_matrix(mesh: RectDualMesh, m=4, singular_rule: SingularRule | None = None,
                           eval_points=None, max_entries=DEFAULT_MAX_DENSE_ENTRIES) -> KernelMatrix:
    """Dense influence matrix by direct (evaluation point, element) quadrature.

    Elements whose closure holds the evaluation point are split about it and
    routed to the singular rule; all others use the ``m`` by ``m`` Gauss rule.
    """
    rule = singular_rule if singular_rule is not None else SingularRule()
    pts = mesh.vertices if eval_points is None else np.atleast_2d(np.asarray(eval_points, float))
    n_rows, n_cols = len(pts), mesh.num_vertices
    if n_rows * n_cols > max_entries:
        raise KernelBudgetExceeded(
            "dense kernel %d x %d exceeds the budget of %d entries; "
            "use build_kernel(..., method='toeplitz') for vertex evaluation"
            % (n_rows, n_cols, max_entries)
        )
    hx, hy = mesh.hx, mesh.hy
    origins = mesh.cell_origins
    corners = mesh.rectangles
    G = np.zeros((n_rows, n_cols))
    tol = 1e-12 * max(hx, hy)
    for r, (px, py) in enumerate(pts):
        rel_x = px - origins[:, 0]
        rel_y = py - origins[:, 1]
        inside = (rel_x >= -tol) & (rel_x <= hx + tol) & (rel_y >= -tol) & (rel_y <= hy + tol)
        vals = np.empty((mesh.num_cells, 4))
        out = ~inside
        vals[out] = _regular_cell_integrals(rel_x[out], rel_y[out], hx, hy, m)
        for c in np.flatnonzero(inside):
            x0, y0 = origins[c]
            sx = min(max(px, x0), x0 + hx)
            sy = min(max(py, y0), y0 + hy)
            vals[c] = split_element_integrals((sx, sy), (x0, x0 + hx, y0, y0 + hy), rule)
        np.add.at(G[r], corners.ravel(), vals.ravel())
    G *= KERNEL_PREFACTOR
    generator = kernel_generator(mesh, m, rule) if eval_points is None else None
    return KernelMatrix(mesh, pts, entries=G, generator=generator, rule=rule, m=m)


def build_kernel(mesh: RectDualMesh, m=4, singular_rule: SingularRule | None = None,
                 method="auto", max_entries=DEFAULT_MAX_DENSE_ENTRIES, cache_dir=None) -> KernelMatrix:
    """Kernel for vertex evaluation points.

    ``method="dense"`` runs the direct assembly, ``"toeplitz"`` builds only the
    generator (FFT application), ``"auto"`` assembles directly for small
    meshes (up to ``DIRECT_AUTO_LIMIT`` vertices) and uses the generator
    otherwise.
    """
    rule = singular_rule if singular_rule is not None else SingularRule()
    n = mesh.num_vertices
    if method == "auto":
        method = "dense" if n <= DIRECT_AUTO_LIMIT else "toeplitz"
    if method == "dense":
        return assemble_kernel_matrix(mesh, m, rule, max_entries=max_entries)
    if method != "toeplitz":
        raise InvalidConfiguration("unknown kernel method %r" % (method,))
    gen = None
    path = None
    if cache_dir is not None:
        import os

        path = os.path.join(cache_dir, "kernel_%s.bin" % cache_key(mesh, m, rule))
        if os.path.exists(path):
            gen = load_kernel_cache(path, cache_key(mesh, m, rule))
    if gen is None:
        gen = kernel_generator(mesh, m, rule)
        if path is not None:
            save_kernel_cache(path, gen, cache_key(mesh, m, rule))
    return KernelMatrix(mesh, mesh.vertices, generator=gen, rule=rule, m=m)


def rigid_gap(points) -> np.ndarray:
    points = np.atleast_2d(points)
    return 0.5 * (points[:, 0] ** 2 + points[:, 1] ** 2)


def film_thickness(h00, pressure, kernel: KernelMatrix, eval_points=None, mesh=None):
    """Film thickness ``h00 + (x^2 + y^2)/2 + G u`` at the kernel's evaluation points."""
    if mesh is not None:
        kernel.check_mesh(mesh)
    pts = kernel.eval_points if eval_points is None else np.atleast_2d(eval_points)
    if pts.shape != kernel.eval_points.shape or not np.array_equal(pts, kernel.eval_points):
        raise ValueError("evaluation points differ from those the kernel was assembled for")
    return h00 + rigid_gap(pts) + kernel.apply(pressure)


# -- binary cache -------------------------------------------------------------------------
_MAGIC = b"EHLK0001"


def cache_key(mesh: RectDualMesh, m: int, rule: SingularRule) -> str:
    text = "%s:%d:%r:%d:%d" % (mesh.mesh_id, m, rule.theta, rule.n_levels, rule.m)
    return hashlib.sha256(text.encode()).hexdigest()[:32]


def save_kernel_cache(path, array, key: str):
    """Header (magic, rows, cols, 32-byte key) then row-major float64 data."""
    array = np.ascontiguousarray(array, dtype="<f8")
    rows, cols = array.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<QQ", rows, cols))
        fh.write(key.encode("ascii").ljust(32, b"\0")[:32])
        fh.write(array.tobytes(order="C"))


def load_kernel_cache(path, key: str | None = None) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError("%s is not a kernel cache file" % path)
        rows, cols = struct.unpack("<QQ", fh.read(16))
        stored = fh.read(32).rstrip(b"\0").decode("ascii")
        if key is not None and stored != key:
            raise ValueError("kernel cache key mismatch: %s != %s" % (stored, key))
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != rows * cols:
        raise ValueError("truncated kernel cache %s" % path)
    return data.reshape(rows, cols).astype(float)
