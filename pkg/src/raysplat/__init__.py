"""Differentiable Gaussian splatting with matching-prior structure losses for few-shot training."""
__version__ = "0.1.0"

from .errors import DataError, NumericalError, RaysplatError
from .geometry import Camera, Ray, lift_pixel, point_on_ray, project_point, ray_from_pixel, triangulate
from .losses import LossWeights, gaussian_position_loss, photometric_loss, rendering_geometry_loss, total_loss
from .matching import MatchSet, filter_pairs, load_matches, save_matches, synth_matches
from .metrics import avg_metric, psnr, ssim
from .model import GaussianPrimitive, HybridModel
from .rasterizer import RenderOptions, render, render_backward, render_primitive_distance
from .trainer import TrainConfig, init_hybrid, train

__all__ = [
    "Camera", "Ray", "project_point", "lift_pixel", "ray_from_pixel", "point_on_ray", "triangulate",
    "GaussianPrimitive", "HybridModel", "RenderOptions", "render", "render_backward", "render_primitive_distance",
    "MatchSet", "load_matches", "save_matches", "synth_matches", "filter_pairs",
    "LossWeights", "photometric_loss", "gaussian_position_loss", "rendering_geometry_loss", "total_loss",
    "TrainConfig", "init_hybrid", "train", "psnr", "ssim", "avg_metric",
    "RaysplatError", "DataError", "NumericalError",
]
