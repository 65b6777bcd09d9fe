"""Stationary and Barrier Matérn fields on triangle meshes.

The package builds sparse precision matrices for Gaussian fields whose
correlation cannot cross physical barriers such as land in a sea, fits
Gaussian-likelihood models with them, and runs the accompanying
benchmark experiments.

Typical use::

    from barrierfield import regular_mesh, BarrierGeometry, mark_barrier, build_model

    mesh = mark_barrier(regular_mesh((0, 10, 0, 10), 0.2, 6.0),
                        BarrierGeometry.rectangles((-7, 17, 5, 5.5)))
    Qop = build_model(mesh, "MB").precision(range_=4.0)
"""
from .fem import FemMatrices, assemble, stiffness_total
from .gmrf import Factorization, NotPositiveDefiniteError, analyze, factorize
from .inference import (
    FitResult,
    GridSpec,
    ObservationSet,
    PcPriors,
    fit,
    log_marginal_likelihood,
    pc_log_prior,
    predict,
)
from .mesh import (
    BarrierGeometry,
    MeshError,
    Projector,
    TriangleMesh,
    build_regular_mesh,
    load_mesh,
    mark_barrier,
    project_points,
    regular_mesh,
    restrict_to_subdomain,
    save_mesh,
)
from .precision import (
    BarrierSpec,
    PrecisionOperator,
    SpatialModel,
    assemble_A,
    assemble_Q,
    build_model,
    correlation_surface,
    marginal_sd,
    matern_correlation,
    point_correlation,
    rescale_to_unit_variance,
)

__version__ = "0.1.0"
