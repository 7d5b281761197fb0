"""Octree neural signed distance fields with a biharmonic smoothness loss,
marching-cubes extraction and cotangent-Laplacian mesh refinement."""

from .estimator import LaplacianRefiner, NeuralSDFMapper
from .field import MultiScaleField, eval_batch, load_checkpoint, save_checkpoint
from .mesh import TriangleMesh, extract_mesh, marching_cubes, read_mesh, write_mesh
from .metrics import ReconReport, evaluate, evaluate_mesh
from .octree import OctreeGrid, build as build_octree
from .pointcloud import PointCloud, SamplingConfig, load_pointcloud, sample_rays
from .refine import RefineConfig, cotan_laplacian, refine as refine_mesh
from .scenes import SyntheticScene, sphere_scene, synth_scan
from .training import LossConfig, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "LaplacianRefiner", "NeuralSDFMapper", "MultiScaleField", "eval_batch", "load_checkpoint", "save_checkpoint",
    "TriangleMesh", "extract_mesh", "marching_cubes", "read_mesh", "write_mesh", "ReconReport", "evaluate",
    "evaluate_mesh", "OctreeGrid", "build_octree", "PointCloud", "SamplingConfig", "load_pointcloud", "sample_rays",
    "RefineConfig", "cotan_laplacian", "refine_mesh", "SyntheticScene", "sphere_scene", "synth_scan", "LossConfig",
    "TrainConfig", "train",
]
