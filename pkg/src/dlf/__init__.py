"""Dual-branch generative latent codec: semantic tokens + detail latents with
cross-branch attention, quadtree-context arithmetic coding, a two-stage
training pipeline and an RD evaluation harness."""

__version__ = "0.1.0"

from .config import DatasetSpec, ModelConfig, TrainConfig  # noqa: F401
