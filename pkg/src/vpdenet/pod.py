"""POD/Galerkin baseline: snapshot SVD, rank truncation, per-sample reduced
solves, and full-field reconstruction."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .grid import SparseOperator
from .linsolve import solve_dense

EPB_MAGIC = b"EPB1"
_EPB_HEADER = struct.Struct("<4sII")  # magic, n, r
ENERGY_DEFAULT = 0.9999


@dataclass
class PodModel:
    basis: np.ndarray            # n x r_max, column-orthonormal
    singular_values: np.ndarray  # full spectrum, nonincreasing
    r: int
    spec_hash: str = ""          # identifies the training data provenance

    @property
    def n(self) -> int:
        return self.basis.shape[0]

    def basis_r(self, r: int | None = None) -> np.ndarray:
        r = self.r if r is None else r
        if not 1 <= r <= self.basis.shape[1]:
            raise ValueError(f"rank {r} outside 1..{self.basis.shape[1]}")
        return self.basis[:, :r]


def select_rank(singular_values: np.ndarray, energy: float = ENERGY_DEFAULT) -> int:
    """Smallest r capturing the requested fraction of sum(sigma^2)."""
    sq = singular_values ** 2
    cum = np.cumsum(sq) / sq.sum()
    return int(np.searchsorted(cum, energy) + 1)


def fit_pod(snapshots: np.ndarray, r: int | None = None,
            energy: float = ENERGY_DEFAULT, spec_hash: str = "") -> PodModel:
    """Thin SVD of the n x s snapshot matrix (columns are solutions).

    Keeps every left singular vector so error curves can sweep the rank;
    `r` fixes the active rank, otherwise the energy criterion picks it.
    """
    X = np.asarray(snapshots, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("snapshots must form an n x s matrix")
    n, s = X.shape
    if not np.any(X):
        raise ValueError("degenerate all-zero snapshot matrix")
    U, sv, _ = np.linalg.svd(X, full_matrices=False)
    if r is None:
        r = select_rank(sv, energy)
    if not 1 <= r <= min(n, s):
        raise ValueError(f"rank {r} outside 1..{min(n, s)}")
    return PodModel(basis=U, singular_values=sv, r=r, spec_hash=spec_hash)


def snapshots_from_fields(fields: np.ndarray) -> np.ndarray:
    """(s, m, m) solution fields -> n x s snapshot matrix."""
    s = fields.shape[0]
    return fields.reshape(s, -1).T.copy()


def pod_solve(model: PodModel, A: SparseOperator, f: np.ndarray,
              r: int | None = None) -> np.ndarray:
    """Galerkin solve on the reduced basis: assemble Ur^T A Ur (one sparse
    matvec per basis column), LU-solve the r x r system, lift back."""
    Ur = model.basis_r(r)
    if A.n != model.n:
        raise ValueError(f"operator size {A.n} does not match basis rows {model.n}")
    AUr = A.matrix @ Ur
    Ar = Ur.T @ AUr
    fr = Ur.T @ f
    uhat = solve_dense(Ar, fr)
    return Ur @ uhat


def projection_error_curve(model: PodModel, snapshots: np.ndarray, ranks) -> list:
    """Relative Frobenius reconstruction error of the snapshots per rank;
    non-increasing in r by construction (nested subspaces)."""
    X = np.asarray(snapshots, dtype=np.float64)
    xnorm = np.linalg.norm(X)
    out = []
    for r in ranks:
        Ur = model.basis_r(r)
        err = np.linalg.norm(X - Ur @ (Ur.T @ X)) / xnorm
        out.append((int(r), float(err)))
    return out


def eckart_young_error(singular_values: np.ndarray, r: int) -> float:
    """Relative Frobenius error of the optimal rank-r approximation:
    sqrt(sum_{i>r} sigma_i^2) / ||X||_F."""
    sq = singular_values ** 2
    return float(np.sqrt(sq[r:].sum() / sq.sum()))


def galerkin_error_curve(model: PodModel, assemble_fn, rhs_fn, coeffs, truths, ranks) -> list:
    """Mean relative solve error over a sample set for each rank.

    `assemble_fn(coeff)` builds the operator, `rhs_fn()` the right-hand
    side; truths are the full-order solutions as flat vectors.
    """
    out = []
    systems = [(assemble_fn(c), rhs_fn(c)) for c in coeffs]
    for r in ranks:
        errs = []
        for (A, b), truth in zip(systems, truths):
            u = pod_solve(model, A, b, r=r)
            errs.append(np.linalg.norm(u - truth) / np.linalg.norm(truth))
        out.append((int(r), float(np.mean(errs))))
    return out


def pod_error_curve(model: PodModel, dataset, ranks=None) -> list:
    """Mean relative Galerkin solve error on a dataset per rank.

    Reassembles each sample's operator from the dataset spec; ranks default
    to a power-of-two ladder capped at the model's stored rank.
    """
    from . import datagen as dg
    from . import grid as g

    if ranks is None:
        ranks = [r for r in 2 ** np.arange(16) if r <= model.r] or [model.r]
        if ranks[-1] != model.r:
            ranks.append(model.r)
    spec, m = dataset.spec, dataset.m
    ones = g.GridField.from_values(np.ones((m, m)))
    fsrc, flux = dg.source_for_spec(spec, m)
    b = g.assemble_rhs(spec, fsrc, flux)

    def assemble(coeff_values):
        coeff = g.GridField.from_values(coeff_values)
        if spec.family is g.Family.DARCY:
            return g.assemble_operator(spec, g.GridField.zeros(m), coeff)
        return g.assemble_operator(spec, coeff, ones)

    truths = [g.field_to_vector(spec, g.GridField.from_values(u))
              for u in dataset.solution]
    return galerkin_error_curve(model, assemble, lambda c: b,
                                dataset.coeff, truths, ranks)


# ---------------------------------------------------------------------------
# persistence ("EPB1")

def save_pod(model: PodModel, path: str) -> None:
    Ur = model.basis_r()
    with open(path, "wb") as fh:
        fh.write(_EPB_HEADER.pack(EPB_MAGIC, model.n, model.r))
        fh.write(np.asfortranarray(Ur).astype("<f8").tobytes(order="F"))
        fh.write(model.singular_values.astype("<f8").tobytes())


def load_pod(path: str) -> PodModel:
    with open(path, "rb") as fh:
        head = fh.read(_EPB_HEADER.size)
        if len(head) < _EPB_HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, n, r = _EPB_HEADER.unpack(head)
        if magic != EPB_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        payload = fh.read()
    need = n * r * 8
    if len(payload) < need:
        raise ValueError(f"{path}: truncated basis payload")
    basis = np.frombuffer(payload[:need], dtype="<f8").reshape(n, r, order="F").copy()
    sv = np.frombuffer(payload[need:], dtype="<f8").copy()
    if sv.size < r:
        raise ValueError(f"{path}: truncated singular values")
    return PodModel(basis=basis, singular_values=sv, r=r)
