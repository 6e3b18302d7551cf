"""Text-guided editing of vectorized images.

Typical flow: :func:`vexel.vectorizer.vectorize` turns a raster into a
layered :class:`vexel.vgcore.VectorDocument`, :func:`vexel.optimizer.optimize`
moves its control points and colours to lower a prompt-driven loss, and
:mod:`vexel.io` reads and writes PNG, SVG and run configs.
"""

from .guidance import EmbedderBackend, GuidanceConfig, LinearMockEmbedder, RoiPrompt, clip_score, total_loss
from .optimizer import OptimizeConfig, RunReport, optimize
from .rasterizer import RenderSettings, backward, render, render_with_tape
from .vectorizer import RoundSpec, VectorizeConfig, vectorize
from .vgcore import CubicPath, PathElement, Rect, Round, VectorDocument, apply_params, flatten_params

__version__ = "0.1.0"

__all__ = [
    "CubicPath",
    "EmbedderBackend",
    "GuidanceConfig",
    "LinearMockEmbedder",
    "OptimizeConfig",
    "PathElement",
    "Rect",
    "RenderSettings",
    "RoiPrompt",
    "Round",
    "RoundSpec",
    "RunReport",
    "VectorDocument",
    "VectorizeConfig",
    "apply_params",
    "backward",
    "clip_score",
    "flatten_params",
    "optimize",
    "render",
    "render_with_tape",
    "total_loss",
    "vectorize",
]
