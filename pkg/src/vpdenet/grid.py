"""Uniform-grid fields and second-order finite-difference operators.

The domain is the unit square discretized with m nodes per side (boundary
nodes included), spacing h = 1/(m-1).  Node (i, j) of the row-major value
array sits at (x, y) = (j*h, i*h).

Three problem families share one 5-point assembly:

    mass_sign * (2*pi*kappa)^2 (1 + eta) u  -  div(a grad u) = f

* ``poisson``   : mass_sign = +1, kappa_sq = 1, a = 1, Neumann flux data g
* ``helmholtz`` : mass_sign = -1, kappa_sq > 0, a = 1, Neumann, g = 0
* ``darcy``     : no mass term, variable a > 0, homogeneous Dirichlet

Neumann conditions use mirrored ghost nodes; the resulting rows are scaled
by 1/2 on edges and 1/4 at corners (the finite-volume node weights), which
keeps the assembled matrix exactly symmetric.  Dirichlet unknowns are the
(m-2)^2 interior nodes.  Flux coefficients for variable a use the harmonic
mean of the nodal values at each cell face.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.sparse as sp


class Family(Enum):
    POISSON = "poisson"
    HELMHOLTZ = "helmholtz"
    DARCY = "darcy"


FAMILY_CODES = {Family.POISSON: 0, Family.HELMHOLTZ: 1, Family.DARCY: 2}
FAMILY_FROM_CODE = {v: k for k, v in FAMILY_CODES.items()}


@dataclass(frozen=True)
class GridField:
    """Scalar field sampled on the m x m node grid."""

    values: np.ndarray
    m: int
    h: float

    @classmethod
    def from_values(cls, values: np.ndarray) -> "GridField":
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ValueError(f"expected a square value array, got {values.shape}")
        m = values.shape[0]
        if m < 3:
            raise ValueError(f"need at least 3 nodes per side, got m={m}")
        if not np.all(np.isfinite(values)):
            raise ValueError("field contains non-finite values")
        return cls(values=values, m=m, h=1.0 / (m - 1))

    @classmethod
    def zeros(cls, m: int) -> "GridField":
        return cls.from_values(np.zeros((m, m)))


def grid_coords(m: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (x, y) coordinate arrays of shape (m, m)."""
    t = np.linspace(0.0, 1.0, m)
    x, y = np.meshgrid(t, t, indexing="xy")
    return x, y


@dataclass(frozen=True)
class BoundaryFlux:
    """Outward normal-derivative data g on the four sides (length-m each)."""

    left: np.ndarray
    right: np.ndarray
    bottom: np.ndarray
    top: np.ndarray

    @classmethod
    def zeros(cls, m: int) -> "BoundaryFlux":
        z = np.zeros(m)
        return cls(z.copy(), z.copy(), z.copy(), z.copy())


@dataclass(frozen=True)
class ProblemSpec:
    """One PDE family with its constants and boundary/source conventions."""

    family: Family
    kappa_sq: float          # (2*pi*kappa)^2
    beta: int                # sign of the diffusion term in the prototype form
    contrast_scale: float    # ring amplitude c (coefficient generator)
    boundary: str            # "neumann" | "dirichlet0"
    source_kind: str         # "manufactured" | "gaussians" | "one"

    def __post_init__(self):
        if self.family is Family.POISSON:
            ok = self.beta == -1 and self.kappa_sq == 1.0 and self.boundary == "neumann"
        elif self.family is Family.HELMHOLTZ:
            ok = self.beta == 1 and self.kappa_sq > 0 and self.boundary == "neumann"
        else:
            ok = self.beta == -1 and self.kappa_sq == 0.0 and self.boundary == "dirichlet0"
        if not ok:
            raise ValueError(f"inconsistent constants for family {self.family}")

    @property
    def mass_sign(self) -> float:
        """Sign of the zeroth-order term as the equations are actually posed."""
        if self.family is Family.POISSON:
            return 1.0
        if self.family is Family.HELMHOLTZ:
            return -1.0
        return 0.0


def poisson_spec(contrast_scale: float = 6.0e5) -> ProblemSpec:
    return ProblemSpec(Family.POISSON, 1.0, -1, contrast_scale, "neumann", "manufactured")


def helmholtz_spec(kappa_sq: float = 100.0, contrast_scale: float = 0.5) -> ProblemSpec:
    return ProblemSpec(Family.HELMHOLTZ, kappa_sq, 1, contrast_scale, "neumann", "gaussians")


def darcy_spec() -> ProblemSpec:
    return ProblemSpec(Family.DARCY, 0.0, -1, 0.0, "dirichlet0", "one")


@dataclass(frozen=True)
class SparseOperator:
    """CSR-backed 5-point operator with symmetry/definiteness metadata."""

    matrix: sp.csr_matrix
    symmetric: bool
    definiteness: str  # "spd" | "indefinite"

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def diagonal(self) -> np.ndarray:
        return self.matrix.diagonal()


def _node_weights(m: int) -> np.ndarray:
    """Finite-volume node weights: 1 interior, 1/2 edges, 1/4 corners."""
    w = np.ones((m, m))
    w[0, :] *= 0.5
    w[-1, :] *= 0.5
    w[:, 0] *= 0.5
    w[:, -1] *= 0.5
    return w


def _harmonic_faces(a: np.ndarray):
    """Harmonic mean of a at horizontal and vertical cell faces."""
    ah = 2.0 * a[:, :-1] * a[:, 1:] / (a[:, :-1] + a[:, 1:])
    av = 2.0 * a[:-1, :] * a[1:, :] / (a[:-1, :] + a[1:, :])
    return ah, av


def assemble_operator(spec: ProblemSpec, eta: GridField, a: GridField) -> SparseOperator:
    """Assemble the sparse 5-point matrix A[eta, a] for the given family.

    Poisson / Darcy matrices are SPD; Helmholtz is symmetric indefinite.
    """
    if eta.m != a.m:
        raise ValueError(f"eta and a shapes differ: {eta.m} vs {a.m}")
    m, h = eta.m, eta.h
    if spec.family is Family.DARCY and np.any(a.values <= 0):
        raise ValueError("darcy coefficient a must be strictly positive")

    ah, av = _harmonic_faces(a.values)
    inv_h2 = 1.0 / (h * h)

    if spec.boundary == "neumann":
        idx = np.arange(m * m).reshape(m, m)
        rows, cols, vals = [], [], []

        def add_edges(p, q, t):
            rows.extend((p, q, p, q))
            cols.extend((p, q, q, p))
            vals.extend((t, t, -t, -t))

        # horizontal edges (i, j)-(i, j+1); weight 1/2 when the edge lies on y=0/y=1
        th = ah * inv_h2
        th[0, :] *= 0.5
        th[-1, :] *= 0.5
        add_edges(idx[:, :-1].ravel(), idx[:, 1:].ravel(), th.ravel())
        # vertical edges (i, j)-(i+1, j); weight 1/2 on x=0/x=1
        tv = av * inv_h2
        tv[:, 0] *= 0.5
        tv[:, -1] *= 0.5
        add_edges(idx[:-1, :].ravel(), idx[1:, :].ravel(), tv.ravel())

        diag = spec.mass_sign * spec.kappa_sq * _node_weights(m) * (1.0 + eta.values)
        all_nodes = idx.ravel()
        rows.append(all_nodes)
        cols.append(all_nodes)
        vals.append(diag.ravel())

        n = m * m
    else:
        # Dirichlet: interior unknowns; faces to eliminated boundary nodes
        # contribute to the diagonal only.
        mi = m - 2
        n = mi * mi
        idx = np.arange(n).reshape(mi, mi)
        rows, cols, vals = [], [], []

        # faces touching interior node (i, j), i/j in 1..m-2
        west = ah[1:-1, 0:mi] * inv_h2          # face (i, j-1)-(i, j)
        east = ah[1:-1, 1 : mi + 1] * inv_h2    # face (i, j)-(i, j+1)
        south = av[0:mi, 1:-1] * inv_h2
        north = av[1 : mi + 1, 1:-1] * inv_h2
        diag = west + east + south + north

        def couple(p, q, t):
            rows.extend((p, q))
            cols.extend((q, p))
            vals.extend((-t, -t))

        couple(idx[:, :-1].ravel(), idx[:, 1:].ravel(), east[:, :-1].ravel())
        couple(idx[:-1, :].ravel(), idx[1:, :].ravel(), north[:-1, :].ravel())
        all_nodes = idx.ravel()
        rows.append(all_nodes)
        cols.append(all_nodes)
        vals.append(diag.ravel())

    rows = np.concatenate([np.atleast_1d(r) for r in rows])
    cols = np.concatenate([np.atleast_1d(c) for c in cols])
    vals = np.concatenate([np.atleast_1d(v) for v in vals])
    matrix = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    matrix.sum_duplicates()

    definiteness = "indefinite" if spec.family is Family.HELMHOLTZ else "spd"
    return SparseOperator(matrix=matrix, symmetric=True, definiteness=definiteness)


def assemble_rhs(spec: ProblemSpec, f: GridField, flux: BoundaryFlux | None = None) -> np.ndarray:
    """Build the discrete right-hand side matching :func:`assemble_operator`.

    Neumann data enters through the mirrored ghost nodes as 2*g/h on each
    boundary side, then the row is scaled by the same node weight as the
    matrix row.
    """
    m, h = f.m, f.h
    if spec.boundary == "neumann":
        b = f.values.copy()
        if flux is not None:
            b[:, 0] += 2.0 * flux.left / h
            b[:, -1] += 2.0 * flux.right / h
            b[0, :] += 2.0 * flux.bottom / h
            b[-1, :] += 2.0 * flux.top / h
        b *= _node_weights(m)
        return b.ravel()
    if flux is not None:
        raise ValueError("dirichlet problems take no flux data")
    return f.values[1:-1, 1:-1].ravel().copy()


def apply_operator(A: SparseOperator, u: np.ndarray) -> np.ndarray:
    """Exact sparse matvec y = A u."""
    u = np.asarray(u)
    if u.shape != (A.n,):
        raise ValueError(f"operand length {u.shape} incompatible with n={A.n}")
    return A.matrix @ u


def field_to_vector(spec: ProblemSpec, field: GridField) -> np.ndarray:
    """Flatten a grid field to the unknown vector of the family's operator."""
    if spec.boundary == "neumann":
        return field.values.ravel().copy()
    return field.values[1:-1, 1:-1].ravel().copy()


def vector_to_field(spec: ProblemSpec, vec: np.ndarray, m: int) -> GridField:
    """Embed an unknown vector back into an m x m field (zero Dirichlet rim)."""
    if spec.boundary == "neumann":
        return GridField.from_values(vec.reshape(m, m))
    out = np.zeros((m, m))
    out[1:-1, 1:-1] = vec.reshape(m - 2, m - 2)
    return GridField.from_values(out)


def _stencil_matrix_1d(m: int, h: float) -> np.ndarray:
    """Dense 1D differentiation matrix: central interior, one-sided 2nd order ends."""
    s = np.zeros((m, m))
    rows = np.arange(1, m - 1)
    s[rows, rows - 1] = -0.5 / h
    s[rows, rows + 1] = 0.5 / h
    s[0, 0], s[0, 1], s[0, 2] = -1.5 / h, 2.0 / h, -0.5 / h
    s[-1, -1], s[-1, -2], s[-1, -3] = 1.5 / h, -2.0 / h, 0.5 / h
    return s


def fd_gradient(u: GridField) -> tuple[GridField, GridField]:
    """Second-order (d/dx, d/dy) of a grid field.

    This is also the fixed, non-learnable derivative stencil used inside the
    training loss.
    """
    dx = gradient_values(u.values, u.h, axis=1)
    dy = gradient_values(u.values, u.h, axis=0)
    return GridField.from_values(dx), GridField.from_values(dy)


def gradient_values(values: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Apply the gradient stencil along one axis of a (..., m) array."""
    v = np.moveaxis(values, axis, -1)
    out = np.empty_like(v)
    out[..., 1:-1] = (v[..., 2:] - v[..., :-2]) / (2.0 * h)
    out[..., 0] = (-3.0 * v[..., 0] + 4.0 * v[..., 1] - v[..., 2]) / (2.0 * h)
    out[..., -1] = (3.0 * v[..., -1] - 4.0 * v[..., -2] + v[..., -3]) / (2.0 * h)
    return np.moveaxis(out, -1, axis)
