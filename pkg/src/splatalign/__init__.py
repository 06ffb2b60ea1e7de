"""splatalign: registration of 3D Gaussian splat models via entropic OT over Sim(3)."""

__version__ = "0.1.0"

from .bures import CostMatrix, build_cost_matrix, gaussian_w2_sq, spd_sqrt
from .core import (
    Camera,
    GaussianComponent,
    GaussianMixture,
    Quaternion,
    Sim3Params,
    covariance_from_splat_params,
    normalize_weights,
    quat_to_rotation,
    sim3_apply_component,
    sim3_apply_mixture,
    sim3_compose,
    sim3_invert,
)
from .io import (
    read_manifest,
    read_splat_ply,
    read_trajectory,
    write_manifest,
    write_report,
    write_splat_ply,
    write_trajectory,
)
from .pipeline import (
    PipelineConfig,
    PipelineReport,
    SceneManifest,
    Submap,
    ate_rmse,
    generate_synthetic_scene,
    merge_maps,
    prune,
    register_pair,
    run_incremental,
    umeyama_alignment,
)
from .registration import (
    JointLossWeights,
    OptimizerConfig,
    RegistrationResult,
    estimate_initial_scale,
    joint_loss,
    mw2_loss_and_gradient,
    optimize_sim3,
)
from .render import RenderOutput, depth_loss, photometric_loss, project_gaussian, render
from .sinkhorn import (
    SinkhornConfig,
    TransportPlan,
    dump_plan,
    exact_ot_oracle,
    mw2_distance,
    sinkhorn_log,
    sinkhorn_plain,
)

__all__ = [
    "Camera",
    "CostMatrix",
    "GaussianComponent",
    "GaussianMixture",
    "JointLossWeights",
    "OptimizerConfig",
    "PipelineConfig",
    "PipelineReport",
    "Quaternion",
    "RegistrationResult",
    "RenderOutput",
    "SceneManifest",
    "Sim3Params",
    "SinkhornConfig",
    "Submap",
    "TransportPlan",
    "ate_rmse",
    "build_cost_matrix",
    "covariance_from_splat_params",
    "depth_loss",
    "dump_plan",
    "estimate_initial_scale",
    "exact_ot_oracle",
    "gaussian_w2_sq",
    "generate_synthetic_scene",
    "joint_loss",
    "merge_maps",
    "mw2_distance",
    "mw2_loss_and_gradient",
    "normalize_weights",
    "optimize_sim3",
    "photometric_loss",
    "project_gaussian",
    "prune",
    "quat_to_rotation",
    "read_manifest",
    "read_splat_ply",
    "read_trajectory",
    "register_pair",
    "render",
    "run_incremental",
    "sim3_apply_component",
    "sim3_apply_mixture",
    "sim3_compose",
    "sim3_invert",
    "sinkhorn_log",
    "sinkhorn_plain",
    "spd_sqrt",
    "umeyama_alignment",
    "write_manifest",
    "write_report",
    "write_splat_ply",
    "write_trajectory",
    "__version__",
]
