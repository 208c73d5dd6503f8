"""Error metrics, error-distribution summaries, QoI statistics, and the
inverse-problem dataset transform."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace

import numpy as np

from .datagen import Dataset
from .grid import gradient_values

HISTOGRAM_BINS = 30


@dataclass
class MetricReport:
    err_u: np.ndarray       # per-sample relative L2 of the field
    err_dx: np.ndarray      # per-sample relative L2 of d/dx
    err_dy: np.ndarray
    hist_edges: np.ndarray  # log-spaced bin edges over err_u
    hist_counts: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.err_u.mean())

    @property
    def median(self) -> float:
        return float(np.median(self.err_u))

    @property
    def max(self) -> float:
        return float(self.err_u.max())

    @property
    def std(self) -> float:
        return float(self.err_u.std())

    @property
    def mean_grad(self) -> float:
        """Mean over samples of the averaged derivative-component errors."""
        return float(((self.err_dx + self.err_dy) / 2.0).mean())


def _rel_l2(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    s = pred.shape[0]
    num = np.linalg.norm((pred - truth).reshape(s, -1), axis=1)
    den = np.linalg.norm(truth.reshape(s, -1), axis=1)
    if np.any(den == 0.0):
        raise ValueError(f"zero-norm truth at sample {int(np.nonzero(den == 0)[0][0])}")
    return num / den


def relative_errors(preds: np.ndarray, truths: np.ndarray, h: float) -> MetricReport:
    """Per-sample relative L2 errors of the field and of both derivative
    components (fixed second-order stencil), plus histogram data."""
    preds = np.asarray(preds, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if preds.shape != truths.shape:
        raise ValueError(f"shape mismatch: {preds.shape} vs {truths.shape}")
    err_u = _rel_l2(preds, truths)
    err_dx = _rel_l2(gradient_values(preds, h, axis=2),
                     gradient_values(truths, h, axis=2))
    err_dy = _rel_l2(gradient_values(preds, h, axis=1),
                     gradient_values(truths, h, axis=1))
    lo = max(err_u.min(), 1e-16)
    hi = max(err_u.max(), lo * (1 + 1e-12))
    edges = np.geomspace(lo, hi, HISTOGRAM_BINS + 1)
    counts, _ = np.histogram(err_u, bins=edges)
    return MetricReport(err_u=err_u, err_dx=err_dx, err_dy=err_dy,
                        hist_edges=edges, hist_counts=counts)


# ---------------------------------------------------------------------------
# quantities of interest

@dataclass(frozen=True)
class QoiSpec:
    kind: str                      # "l2_norm" | "l1_norm" | "sum_abs_dx" | "linear"
    matrix: np.ndarray | None = None  # (d_q, n) for the linear kind

    def __post_init__(self):
        if self.kind == "linear":
            if self.matrix is None or self.matrix.ndim != 2 or self.matrix.shape[0] < 1:
                raise ValueError("linear QoI needs a (d_q, n) matrix")
            if not np.all(np.isfinite(self.matrix)):
                raise ValueError("linear QoI matrix must be finite")


def qoi_values(samples: np.ndarray, q: QoiSpec, h: float) -> np.ndarray:
    """Evaluate the QoI on (s, m, m) solution fields -> (s,) or (s, d_q)."""
    s = samples.shape[0]
    flat = samples.reshape(s, -1)
    if q.kind == "l2_norm":
        return np.linalg.norm(flat, axis=1)
    if q.kind == "l1_norm":
        return np.abs(flat).sum(axis=1)
    if q.kind == "sum_abs_dx":
        return np.abs(gradient_values(samples, h, axis=2)).reshape(s, -1).sum(axis=1)
    if q.kind == "linear":
        return flat @ q.matrix.T
    raise ValueError(f"unknown QoI kind {q.kind!r}")


def qoi_stats(values: np.ndarray) -> tuple[float, float, float]:
    """(mean, sample standard deviation, 3-sigma extreme-event frequency)."""
    values = np.asarray(values, dtype=np.float64).ravel()
    s = values.size
    if s < 2:
        raise ValueError("need at least 2 samples for sigma and p_ext")
    mu = values.sum() / s
    sigma = np.sqrt(((values - mu) ** 2).sum() / (s - 1))
    p_ext = float(np.mean(np.abs(values - mu) > 3.0 * sigma))
    return float(mu), float(sigma), p_ext


# ---------------------------------------------------------------------------
# inverse problem

def invert_dataset(ds: Dataset) -> Dataset:
    """Swap input/target roles: inputs become (u, f), the target becomes the
    coefficient field.  Applying it twice restores the original exactly."""
    return replace(ds, inverse=not ds.inverse)


# ---------------------------------------------------------------------------
# report serialization

def report_to_csv(report: MetricReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample", "rel_l2_u", "rel_l2_dx", "rel_l2_dy"])
    for i in range(report.err_u.size):
        w.writerow([i, repr(float(report.err_u[i])), repr(float(report.err_dx[i])),
                    repr(float(report.err_dy[i]))])
    return buf.getvalue()


def report_summary(report: MetricReport) -> str:
    lines = [
        f"samples: {report.err_u.size}",
        f"mean_rel_l2_u: {report.mean:.6e}",
        f"median_rel_l2_u: {report.median:.6e}",
        f"max_rel_l2_u: {report.max:.6e}",
        f"std_rel_l2_u: {report.std:.6e}",
        f"mean_grad_err: {report.mean_grad:.6e}",
        "histogram (log-spaced bins over rel_l2_u):",
    ]
    for i in range(HISTOGRAM_BINS):
        lines.append(f"  [{report.hist_edges[i]:.3e}, {report.hist_edges[i+1]:.3e}): "
                     f"{int(report.hist_counts[i])}")
    return "\n".join(lines) + "\n"


def write_field_pgm(path: str, field: np.ndarray) -> None:
    """8-bit PGM dump of one field for visual inspection."""
    f = np.asarray(field, dtype=np.float64)
    lo, hi = f.min(), f.max()
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    img = ((f - lo) * scale).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())
