"""Python bindings for the osediff C++ core.

torch is imported first so that the extension can share its tensor types.
"""

import torch  # noqa: F401

from ._osediff import (  # noqa: F401
    Error,
    NoiseSchedule,
    Student,
    degrade,
    forward_diffuse,
    make_schedule,
    one_step_denoise,
    procedural_texture,
    psnr,
    run,
    ssim,
    toy_frechet,
)

__all__ = [
    "Error",
    "NoiseSchedule",
    "Student",
    "degrade",
    "forward_diffuse",
    "make_schedule",
    "one_step_denoise",
    "procedural_texture",
    "psnr",
    "run",
    "ssim",
    "toy_frechet",
]
