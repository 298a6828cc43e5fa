"""Adaptive token dictionary super-resolution."""

from ._atd import (
    AtdError,
    Model,
    ShapeError,
    bicubic_resize,
    categorize,
    effective_scale,
    lasso,
    psnr,
    run_cli,
    soft_threshold,
    ssim,
    uncategorize,
)

__all__ = [
    "AtdError",
    "Model",
    "ShapeError",
    "bicubic_resize",
    "categorize",
    "effective_scale",
    "lasso",
    "psnr",
    "run_cli",
    "soft_threshold",
    "ssim",
    "uncategorize",
]
