"""Uniform rectangular primal mesh with its four-triangle dual partition.

Vertices are numbered lexicographically, ``k = i + (nx + 1) * j`` with ``i``
running along x.  Rectangles store their corners counterclockwise starting at
the bottom-left one (A1, A2, A3, A4).  Dual triangle ``j`` of a rectangle is
``(A_{j+1}, C, A_j)``: its base is the rectangle side ``A_j A_{j+1}`` and its
apex is the rectangle centre ``C``.  Triangle 0 sits on the bottom side and the
enumeration runs counterclockwise.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np

__all__ = [
    "InvalidConfiguration",
    "Edge",
    "RectDualMesh",
    "build_mesh",
    "gamma_project",
    "jump_and_average",
    "shape_values",
    "shape_gradients",
]


class InvalidConfiguration(ValueError):
    """Raised for meshes, cases or configs that violate their preconditions."""


# reference corners of the unit square, counterclockwise from bottom-left
REF_CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
REF_CENTER = np.array([0.5, 0.5])


def shape_values(s, t):
    """Bilinear shape functions on the unit square, stacked on the last axis."""
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    return np.stack([(1 - s) * (1 - t), s * (1 - t), s * t, (1 - s) * t], axis=-1)


def shape_gradients(s, t, hx, hy):
    """Physical gradients of the bilinear shape functions.

    Returns an array of shape ``s.shape + (4, 2)``.
    """
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    ds = np.stack([-(1 - t), (1 - t), t, -t], axis=-1) / hx
    dt = np.stack([-(1 - s), -s, s, (1 - s)], axis=-1) / hy
    return np.stack([ds, dt], axis=-1)


class Edge(NamedTuple):
    """One primal edge.  ``normals[1]`` is ``None`` on the domain boundary."""

    index: int
    vertices: tuple[int, int]
    length: float
    normals: tuple[np.ndarray, np.ndarray | None]
    cells: tuple[int, int]

    @property
    def is_boundary(self) -> bool:
        return self.cells[1] < 0


@dataclass(frozen=True, eq=False)
class RectDualMesh:
    """Immutable uniform mesh over ``[x0, x1] x [y0, y1]``."""

    domain_bounds: tuple[float, float, float, float]
    nx: int
    ny: int

    # -- sizes -------------------------------------------------------------
    @property
    def hx(self) -> float:
        x0, x1, _, _ = self.domain_bounds
        return (x1 - x0) / self.nx

    @property
    def hy(self) -> float:
        _, _, y0, y1 = self.domain_bounds
        return (y1 - y0) / self.ny

    @property
    def h(self) -> float:
        """Mesh parameter: the largest element diameter."""
        return float(np.hypot(self.hx, self.hy))

    @property
    def num_vertices(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def num_cells(self) -> int:
        return self.nx * self.ny

    @property
    def grid_shape(self) -> tuple[int, int]:
        """Shape of nodal arrays reshaped as ``(ny + 1, nx + 1)``."""
        return (self.ny + 1, self.nx + 1)

    @property
    def area(self) -> float:
        x0, x1, y0, y1 = self.domain_bounds
        return (x1 - x0) * (y1 - y0)

    @cached_property
    def mesh_id(self) -> str:
        """Stable provenance tag used to match kernels and fields to meshes."""
        text = "rect:%r:%d:%d" % (tuple(float(b) for b in self.domain_bounds), self.nx, self.ny)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    # -- geometry ----------------------------------------------------------
    @cached_property
    def x(self) -> np.ndarray:
        x0, x1, _, _ = self.domain_bounds
        return np.linspace(x0, x1, self.nx + 1)

    @cached_property
    def y(self) -> np.ndarray:
        _, _, y0, y1 = self.domain_bounds
        return np.linspace(y0, y1, self.ny + 1)

    @cached_property
    def vertices(self) -> np.ndarray:
        X, Y = np.meshgrid(self.x, self.y)
        return np.column_stack([X.ravel(), Y.ravel()])

    @cached_property
    def rectangles(self) -> np.ndarray:
        """Corner indices ``(num_cells, 4)`` ordered A1..A4 counterclockwise."""
        I, J = np.meshgrid(np.arange(self.nx), np.arange(self.ny))
        bl = (I + (self.nx + 1) * J).ravel()
        return np.column_stack([bl, bl + 1, bl + self.nx + 2, bl + self.nx + 1])

    @cached_property
    def cell_origins(self) -> np.ndarray:
        return self.vertices[self.rectangles[:, 0]]

    @cached_property
    def centers(self) -> np.ndarray:
        return self.cell_origins + 0.5 * np.array([self.hx, self.hy])

    @cached_property
    def dual_triangles(self) -> np.ndarray:
        """Triangle coordinates ``(num_cells, 4, 3, 2)`` as (A_{j+1}, C, A_j)."""
        corners = self.vertices[self.rectangles]
        nxt = np.roll(corners, -1, axis=1)
        center = np.broadcast_to(self.centers[:, None, :], corners.shape)
        return np.stack([nxt, center, corners], axis=2)

    def dual_triangle_areas(self) -> np.ndarray:
        tri = self.dual_triangles
        a = tri[..., 1, :] - tri[..., 0, :]
        b = tri[..., 2, :] - tri[..., 0, :]
        return 0.5 * np.abs(a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0])

    # -- degrees of freedom --------------------------------------------------
    @cached_property
    def dirichlet_mask(self) -> np.ndarray:
        mask = np.zeros(self.grid_shape, dtype=bool)
        mask[0, :] = mask[-1, :] = True
        mask[:, 0] = mask[:, -1] = True
        mask = mask.ravel()
        mask.flags.writeable = False
        return mask

    @cached_property
    def free_dofs(self) -> np.ndarray:
        return np.flatnonzero(~self.dirichlet_mask)

    @cached_property
    def vertex_weights(self) -> np.ndarray:
        """``w_k = sum_T |T| * (gamma phi_k)|_T``; equals the integral of phi_k."""
        w = np.zeros(self.num_vertices)
        np.add.at(w, self.rectangles.ravel(), 0.25 * self.hx * self.hy)
        return w

    def zero_field(self) -> np.ndarray:
        return np.zeros(self.num_vertices)

    def check_field(self, v, name="field") -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.num_vertices,):
            raise ValueError(
                "%s has shape %s, mesh has %d vertices" % (name, v.shape, self.num_vertices)
            )
        return v

    def apply_dirichlet(self, v) -> np.ndarray:
        v = np.array(self.check_field(v), dtype=float)
        v[self.dirichlet_mask] = 0.0
        return v

    def as_grid(self, v) -> np.ndarray:
        return np.asarray(v).reshape(self.grid_shape)

    def cell_values(self, v) -> np.ndarray:
        """Corner values ``(num_cells, 4)`` of a nodal field."""
        return np.asarray(v)[self.rectangles]

    def evaluate(self, v, points) -> np.ndarray:
        """Evaluate the bilinear interpolant of ``v`` at arbitrary points."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        x0, _, y0, _ = self.domain_bounds
        fx = (points[:, 0] - x0) / self.hx
        fy = (points[:, 1] - y0) / self.hy
        i = np.clip(np.floor(fx).astype(int), 0, self.nx - 1)
        j = np.clip(np.floor(fy).astype(int), 0, self.ny - 1)
        s = fx - i
        t = fy - j
        cells = i + self.nx * j
        N = shape_values(s, t)
        return np.einsum("pc,pc->p", N, self.cell_values(v)[cells])

    # -- edges -----------------------------------------------------------------
    @cached_property
    def _edge_tables(self):
        nx, ny = self.nx, self.ny
        stride = nx + 1
        verts, cells, normals = [], [], []
        # horizontal edges, row j = 0..ny (cell below is j-1, above is j)
        for j in range(ny + 1):
            for i in range(nx):
                k = i + stride * j
                verts.append((k, k + 1))
                below = i + nx * (j - 1) if j > 0 else -1
                above = i + nx * j if j < ny else -1
                if below >= 0 and above >= 0:
                    cells.append((below, above))
                    normals.append(((0.0, 1.0), (0.0, -1.0)))
                elif below >= 0:
                    cells.append((below, -1))
                    normals.append(((0.0, 1.0), (np.nan, np.nan)))
                else:
                    cells.append((above, -1))
                    normals.append(((0.0, -1.0), (np.nan, np.nan)))
        # vertical edges, column i = 0..nx (cell left is i-1, right is i)
        for j in range(ny):
            for i in range(nx + 1):
                k = i + stride * j
                verts.append((k, k + stride))
                left = (i - 1) + nx * j if i > 0 else -1
                right = i + nx * j if i < nx else -1
                if left >= 0 and right >= 0:
                    cells.append((left, right))
                    normals.append(((1.0, 0.0), (-1.0, 0.0)))
                elif left >= 0:
                    cells.append((left, -1))
                    normals.append(((1.0, 0.0), (np.nan, np.nan)))
                else:
                    cells.append((right, -1))
                    normals.append(((-1.0, 0.0), (np.nan, np.nan)))
        verts = np.array(verts, dtype=int)
        cells = np.array(cells, dtype=int)
        normals = np.array(normals, dtype=float)
        lengths = np.linalg.norm(
            self.vertices[verts[:, 1]] - self.vertices[verts[:, 0]], axis=1
        )
        return verts, cells, normals, lengths

    @property
    def edge_vertices(self) -> np.ndarray:
        return self._edge_tables[0]

    @property
    def edge_cells(self) -> np.ndarray:
        """``(num_edges, 2)``; second entry is -1 on boundary edges."""
        return self._edge_tables[1]

    @property
    def edge_normals(self) -> np.ndarray:
        """Outward normals of the first and second adjacent cell (NaN if absent)."""
        return self._edge_tables[2]

    @property
    def edge_lengths(self) -> np.ndarray:
        return self._edge_tables[3]

    @property
    def boundary_edges(self) -> np.ndarray:
        return self.edge_cells[:, 1] < 0

    @property
    def num_edges(self) -> int:
        return len(self.edge_lengths)

    def edge(self, k: int) -> Edge:
        n1, n2 = self.edge_normals[k]
        c1, c2 = self.edge_cells[k]
        return Edge(
            index=k,
            vertices=tuple(int(v) for v in self.edge_vertices[k]),
            length=float(self.edge_lengths[k]),
            normals=(n1.copy(), None if c2 < 0 else n2.copy()),
            cells=(int(c1), int(c2)),
        )

    def summary(self) -> str:
        x0, x1, y0, y1 = self.domain_bounds
        n_int = int((~self.boundary_edges).sum())
        return "\n".join(
            [
                "mesh_id = %s" % self.mesh_id,
                "domain = [%g, %g] x [%g, %g]" % (x0, x1, y0, y1),
                "cells = %d x %d (%d rectangles, %d dual triangles)"
                % (self.nx, self.ny, self.num_cells, 4 * self.num_cells),
                "vertices = %d (%d free)" % (self.num_vertices, len(self.free_dofs)),
                "edges = %d interior, %d boundary" % (n_int, self.num_edges - n_int),
                "hx = %.6g, hy = %.6g, h = %.6g" % (self.hx, self.hy, self.h),
            ]
        )


def build_mesh(domain_bounds, nx: int, ny: int) -> RectDualMesh:
    """Build a uniform ``nx`` by ``ny`` rectangular mesh and its dual partition."""
    try:
        x0, x1, y0, y1 = (float(b) for b in domain_bounds)
    except (TypeError, ValueError) as exc:
        raise InvalidConfiguration("domain_bounds must be (x0, x1, y0, y1)") from exc
    if not (np.isfinite([x0, x1, y0, y1]).all() and x0 < x1 and y0 < y1):
        raise InvalidConfiguration("empty or inverted domain %r" % ((x0, x1, y0, y1),))
    if int(nx) != nx or int(ny) != ny or nx < 2 or ny < 2:
        raise InvalidConfiguration("need integer nx, ny >= 2, got %r, %r" % (nx, ny))
    return RectDualMesh((x0, x1, y0, y1), int(nx), int(ny))


def gamma_project(v, mesh: RectDualMesh, m: int = 2) -> np.ndarray:
    """Edge-mean map onto piecewise constants of the dual partition.

    ``v`` is either a nodal array (bilinear field) or a callable ``f(x, y)``.
    Returns ``(num_cells, 4)``: the mean of ``v`` over the base side of each
    dual triangle, taken from inside the owning rectangle.
    """
    if callable(v):
        g, w = np.polynomial.legendre.leggauss(m)
        g = 0.5 * (g + 1.0)
        w = 0.5 * w
        corners = mesh.vertices[mesh.rectangles]
        a = corners[:, :, None, :]
        b = np.roll(corners, -1, axis=1)[:, :, None, :]
        pts = a + (b - a) * g[None, None, :, None]
        vals = np.asarray(v(pts[..., 0], pts[..., 1]), dtype=float)
        return vals @ w
    cv = mesh.cell_values(mesh.check_field(v))
    # trace of a bilinear field on a side is linear: mean = endpoint average
    return 0.5 * (cv + np.roll(cv, -1, axis=1))


def jump_and_average(inner, outer, edge: Edge):
    """Jump and average of a trace pair on ``edge``.

    Scalars give a vector jump ``q1 n1 + q2 n2``; vectors give the scalar jump
    ``w1.n1 + w2.n2``.  On boundary edges ``outer`` must be ``None`` and the
    one-sided conventions ``{q} = q``, ``[q] = q n``, ``[w] = w.n`` apply.
    """
    n1, n2 = edge.normals
    q1 = np.asarray(inner, dtype=float)
    if edge.is_boundary:
        if outer is not None:
            raise ValueError("boundary edge %d takes a single trace" % edge.index)
        jump = q1 * n1 if q1.ndim == 0 else float(q1 @ n1)
        return jump, q1
    if outer is None:
        raise ValueError("interior edge %d needs traces from both cells" % edge.index)
    q2 = np.asarray(outer, dtype=float)
    if q1.shape != q2.shape:
        raise ValueError("trace shapes differ: %s vs %s" % (q1.shape, q2.shape))
    if q1.ndim == 0:
        jump = q1 * n1 + q2 * n2
    else:
        jump = float(q1 @ n1 + q2 @ n2)
    return jump, 0.5 * (q1 + q2)
