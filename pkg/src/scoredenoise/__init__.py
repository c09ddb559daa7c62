"""Score-based point cloud denoising."""

from .denoise import DenoiseConfig, NetworkModel, StepSchedule, denoise_cloud, upsample_via_denoise
from .geometry import SpatialIndex, extract_patches, normalize_unit_sphere, read_xyz, write_xyz
from .metrics import chamfer_distance, evaluate, point_to_mesh
from .mesh import SamplingConfig, TriangleMesh, load_mesh, sample_surface
from .network import NetworkConfig, init_params, load_checkpoint, save_checkpoint
from .noise import NoiseModel, parse_noise, perturb
from .training import TrainConfig, train

__version__ = "0.1.0"
