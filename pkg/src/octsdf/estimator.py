"""scikit-learn style front end.

>>> mapper = NeuralSDFMapper(voxel_size=0.05, steps=500).fit(points, sensor_origins=origins)
>>> sdf = mapper.predict(queries)
>>> mesh = mapper.extract_mesh()
>>> smooth = LaplacianRefiner(eta=0.5).fit_transform(mesh)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import mesh as mesh_mod
from . import refine as refine_mod
from .field import eval_batch
from .metrics import evaluate_mesh
from .pointcloud import PointCloud, SamplingConfig
from .training import LossConfig, TrainConfig, train


class NeuralSDFMapper(BaseEstimator):
    """Learn a signed distance field from LiDAR points.

    ``fit`` takes points ``(n, 3)`` in world coordinates. Pass the sensor
    position of every point through ``sensor_origins`` (``(n, 3)`` or a single
    3-vector); without it every ray starts at the world origin.
    """

    def __init__(self, levels=3, voxel_size=0.1, feature_dim=128, width=128, depth=2, steps=2000,
                 batch_size=1024, lr_features=1e-3, lr_mlp=1e-4, lambda_bce=1.0, lambda_eikonal=0.1,
                 lambda_hessian=1.0, hessian_scale=1e-11, sigma_occ=None, fdm_step=None, n_hessian_samples=None,
                 truncation=0.3, n_surface=4, n_free=2, random_state=0, n_threads=1):
        self.levels = levels
        self.voxel_size = voxel_size
        self.feature_dim = feature_dim
        self.width = width
        self.depth = depth
        self.steps = steps
        self.batch_size = batch_size
        self.lr_features = lr_features
        self.lr_mlp = lr_mlp
        self.lambda_bce = lambda_bce
        self.lambda_eikonal = lambda_eikonal
        self.lambda_hessian = lambda_hessian
        self.hessian_scale = hessian_scale
        self.sigma_occ = sigma_occ
        self.fdm_step = fdm_step
        self.n_hessian_samples = n_hessian_samples
        self.truncation = truncation
        self.n_surface = n_surface
        self.n_free = n_free
        self.random_state = random_state
        self.n_threads = n_threads

    def train_config(self) -> TrainConfig:
        loss = LossConfig.for_voxel(
            self.voxel_size,
            self.batch_size,
            lambda_bce=self.lambda_bce,
            lambda_eikonal=self.lambda_eikonal,
            lambda_hessian=self.lambda_hessian,
            hessian_scale=self.hessian_scale,
            sigma_occ=self.sigma_occ,
            fdm_step=self.fdm_step,
            n_hessian_samples=self.n_hessian_samples,
        )
        return TrainConfig(
            levels=self.levels,
            voxel_size=self.voxel_size,
            feature_dim=self.feature_dim,
            width=self.width,
            depth=self.depth,
            steps=self.steps,
            batch_size=self.batch_size,
            lr_features=self.lr_features,
            lr_mlp=self.lr_mlp,
            seed=int(self.random_state or 0),
            threads=self.n_threads,
            sampling=SamplingConfig(self.n_surface, self.n_free, self.truncation),
            loss=loss,
        )

    def fit(self, X, y=None, sensor_origins=None):
        if isinstance(X, PointCloud):
            cloud = X
        else:
            X = check_array(X, dtype=np.float64)
            if X.shape[1] != 3:
                raise ValueError(f"expected points of shape (n, 3), got {X.shape}")
            origins = np.zeros(3) if sensor_origins is None else np.asarray(sensor_origins, dtype=np.float64)
            origins = np.broadcast_to(origins, X.shape)
            cloud = PointCloud(X, origins, np.zeros(len(X), dtype=np.int64))
        self.field_, self.grid_, self.state_ = train(cloud, self.train_config())
        self.n_features_in_ = 3
        return self

    def predict(self, X) -> np.ndarray:
        """Signed distance (metres, positive in free space) at each row of ``X``."""
        check_is_fitted(self, "field_")
        X = check_array(X, dtype=np.float64)
        return eval_batch(self.field_, self.grid_, X, threads=self.n_threads)

    def extract_mesh(self, cell=None, dilation: int = 1) -> mesh_mod.TriangleMesh:
        check_is_fitted(self, "field_")
        return mesh_mod.extract_mesh(self.field_, self.grid_, cell, dilation, threads=self.n_threads)

    def score(self, X, y=None, threshold_cm: float = 10.0) -> float:
        """F-score (in %) of the extracted mesh against ground-truth surface points ``X``."""
        mesh = self.extract_mesh()
        if mesh.is_empty():
            return 0.0
        return evaluate_mesh(mesh, check_array(X), threshold_cm, seed=int(self.random_state or 0)).f_score_pct


class LaplacianRefiner(TransformerMixin, BaseEstimator):
    """Cotangent-Laplacian smoothing of a :class:`~octsdf.mesh.TriangleMesh`."""

    def __init__(self, eta=0.5, max_iters=20, plateau_tol=1e-4, weighted=True, mode="damped"):
        self.eta = eta
        self.max_iters = max_iters
        self.plateau_tol = plateau_tol
        self.weighted = weighted
        self.mode = mode

    def config(self) -> refine_mod.RefineConfig:
        return refine_mod.RefineConfig(eta=self.eta, max_iters=self.max_iters, plateau_tol=self.plateau_tol,
                                       weighted=self.weighted, mode=self.mode)

    def fit(self, mesh=None, y=None):
        self.config_ = self.config()
        return self

    def transform(self, mesh, metric=None) -> mesh_mod.TriangleMesh:
        check_is_fitted(self, "config_")
        if not isinstance(mesh, mesh_mod.TriangleMesh):
            raise TypeError("LaplacianRefiner transforms TriangleMesh objects")
        out, self.report_ = refine_mod.refine(mesh, self.config_, metric)
        return out
