"""Gaussian head avatars bound to a parametric mesh, with multi-view expression correction."""
from .binding import BoundGaussianCloud, apply_residuals, init_bindings, reanchor, reset_opacity, to_world
from .correction import CorrectionNet, ExpressionBank, bank_apply, bank_update, momentum_schedule
from .evaluation import EvalReport, evaluate, psnr, ssim
from .headmodel import HeadModel, HeadParams, Mesh, evaluate as evaluate_head, triangle_frames
from .losses import position_loss, rgb_loss, scaling_loss, total_loss
from .rasterizer import Camera, project, rasterize, render
from .synth import SceneSpec, generate_scene, read_dataset, render_dataset, write_dataset
from .texture import TextureField, Triplane, sample_triplane
from .trainer import (ABLATIONS, Avatar, TrainConfig, load_checkpoint, reenact, render_novel_view,
                      save_checkpoint, train)

__version__ = "0.1.0"
