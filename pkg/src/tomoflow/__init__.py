"""tomoflow: CT reconstruction toolkit with matched differentiable projectors,
analytic and iterative baselines, and an ODE-based learned reconstructor."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DataFormatError,
    DivergenceError,
    InvalidGeometryError,
    ShapeMismatchError,
    TomoflowError,
)
from .geometry import (
    ConeGeometry,
    FanGeometry,
    Ray,
    VolumeGrid,
    geometry_from_dict,
    geometry_to_dict,
    load_geometry,
    make_cone_geometry,
    make_fan_geometry,
    ray_bundle,
    ray_for,
    save_geometry,
)
from .projector import (
    BoundProjector,
    Sinogram,
    Volume,
    back_project,
    bind,
    dense_matrix,
    forward_project,
    get_default_threads,
    op_norm_estimate,
    set_default_threads,
)
from .analytic import fbp_fan, fdk_cone, ramp_filter
from .classical import IterConfig, sirt, tv_gradient, tv_reconstruct, tv_value
from .network import (
    NetArch,
    NetParams,
    init_params,
    load_net_params,
    net_forward,
    net_vjp,
    save_net_params,
)
from .ode import (
    AdjointResult,
    AllocationProbe,
    NodeDynamics,
    OdeConfig,
    SolveLog,
    adjoint_backward,
    dynamics,
    initial_volume,
    reconstruct_node,
    rk4_solve,
)
from .training import (
    AdamState,
    Checkpoint,
    TrainConfig,
    adam_step,
    fov_mask,
    l1_fov_loss,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .phantoms import (
    NoiseModel,
    PhantomSpec,
    make_phantom,
    shepp_logan_value,
    simulate_measurement,
)
from .metrics import compute_metrics, psnr, rmse, ssim
from .dataio import (
    center_slices,
    load_sinogram,
    load_volume,
    read_metrics,
    save_sinogram,
    save_volume,
    write_manifest,
    write_metrics,
    write_pgm,
)

__all__ = [
    "__version__",
    "TomoflowError",
    "InvalidGeometryError",
    "ShapeMismatchError",
    "DataFormatError",
    "ConfigError",
    "DivergenceError",
    "VolumeGrid",
    "FanGeometry",
    "ConeGeometry",
    "Ray",
    "make_fan_geometry",
    "make_cone_geometry",
    "ray_for",
    "ray_bundle",
    "geometry_to_dict",
    "geometry_from_dict",
    "save_geometry",
    "load_geometry",
    "Volume",
    "Sinogram",
    "forward_project",
    "back_project",
    "bind",
    "BoundProjector",
    "dense_matrix",
    "op_norm_estimate",
    "set_default_threads",
    "get_default_threads",
    "fbp_fan",
    "fdk_cone",
    "ramp_filter",
    "IterConfig",
    "sirt",
    "tv_value",
    "tv_gradient",
    "tv_reconstruct",
    "NetArch",
    "NetParams",
    "init_params",
    "net_forward",
    "net_vjp",
    "save_net_params",
    "load_net_params",
    "OdeConfig",
    "SolveLog",
    "AllocationProbe",
    "NodeDynamics",
    "AdjointResult",
    "rk4_solve",
    "dynamics",
    "adjoint_backward",
    "initial_volume",
    "reconstruct_node",
    "fov_mask",
    "l1_fov_loss",
    "AdamState",
    "adam_step",
    "TrainConfig",
    "Checkpoint",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "PhantomSpec",
    "NoiseModel",
    "make_phantom",
    "shepp_logan_value",
    "simulate_measurement",
    "rmse",
    "psnr",
    "ssim",
    "compute_metrics",
    "save_volume",
    "load_volume",
    "save_sinogram",
    "load_sinogram",
    "write_pgm",
    "center_slices",
    "write_metrics",
    "read_metrics",
    "write_manifest",
]
