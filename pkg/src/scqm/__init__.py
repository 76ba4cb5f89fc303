"""Robust subspace-constrained quadratic models.

A model maps latent coordinates ``tau`` in R^d to R^D through
``f(tau) = c + U tau + V Theta^T vech(tau tau^T)`` where ``Q = [U, V]`` has
orthonormal columns.  Fitting minimizes a robust loss of the residuals by
block gradient descent with a QR retraction for ``Q``.
"""

from .analysis import (
    ConvexityCertificate,
    SingularHessianError,
    convexity_radius,
    frechet_mean,
    hessian_tau,
    l2_sensitivity_decomposition,
    max_slice_norm,
    sensitivity,
    verify_convexity_ball,
)
from .datagen import (
    Dataset,
    circle_dataset,
    noise_dataset,
    sample_generalized_gaussian,
    sample_radial_laplace,
    sphere_dataset,
)
from .losses import LossError, LossSpec, format_loss, loss_gradient, loss_hessian, loss_value, parse_loss
from .optimizer import (
    DivergenceError,
    FitConfig,
    FitResult,
    FitTrace,
    KKTResiduals,
    fit,
    fit_batch,
    grad_c,
    grad_Q,
    grad_tau,
    grad_theta,
    kkt_residuals,
    objective,
)
from .pipeline import (
    BenchReport,
    DenoiseConfig,
    benchmark_sphere,
    denoise,
    latent_grid_decode,
    mse,
    neighborhoods,
    toy_circle,
)
from .projection import Projection, project
from .quadmap import (
    ModelError,
    QuadraticModel,
    evaluate,
    hessian_f,
    jacobian_tau,
    reparameterize,
    vech,
)
from .stiefel import RankDeficientError, retract_qr, tangent_project

__version__ = "0.1.0"
