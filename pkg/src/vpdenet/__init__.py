"""Surrogate modeling pipeline for elliptic PDEs with random, high-contrast
coefficients: data generation with a verified finite-difference ground truth,
an iterated V-block convolutional network, and a POD/Galerkin baseline."""

__version__ = "0.1.0"

from .grid import (Family, GridField, ProblemSpec, SparseOperator,  # noqa: F401
                   assemble_operator, assemble_rhs, apply_operator,
                   darcy_spec, fd_gradient, helmholtz_spec, poisson_spec)
from .datagen import (Dataset, GrfParams, RingFieldParams, SourceSpec,  # noqa: F401
                      build_dataset, diagonal_scale_dataset,
                      diagonal_unscale_dataset, make_source, read_dataset,
                      sample_darcy_field, sample_ring_field, write_dataset)
from .linsolve import SolveReport, solve_cg, solve_dense, solve_gmres  # noqa: F401
from .pod import PodModel, fit_pod, pod_error_curve, pod_solve  # noqa: F401
from .model import (VNetConfig, VNetModel, build_model, count_params,  # noqa: F401
                    load_model, save_model)
from .train import TrainConfig, TrainState, h1_loss  # noqa: F401
from .evaluate import (MetricReport, QoiSpec, invert_dataset,  # noqa: F401
                       qoi_stats, qoi_values, relative_errors)
