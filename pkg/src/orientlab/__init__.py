"""orientlab: pose-conditioned toy diffusion, differentiable radiance fields,
and decoupled 2D-to-3D lifting on synthetic multi-view scenes."""

__version__ = "0.1.0"

CONFIG_SCHEMA_VERSION = 1
