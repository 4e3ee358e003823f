"""Backend selection: synthetic (dependency-free) or pretrained models."""
from __future__ import annotations

from ..nada1_writer import BridgeExportError
from .synthetic import SyntheticDiffusion, SyntheticEncoder, SyntheticVlm

BACKENDS = ("synthetic", "pretrained")


def diffusion_backend(name: str, **kwargs):
    if name == "synthetic":
        return SyntheticDiffusion(**kwargs)
    if name == "pretrained":
        from .pretrained import PretrainedDiffusion

        return PretrainedDiffusion(**kwargs)
    raise BridgeExportError(f"unknown diffusion backend {name!r}; choose from {BACKENDS}")


def encoder_backend(name: str, **kwargs):
    if name == "synthetic":
        return SyntheticEncoder(**kwargs)
    if name == "pretrained":
        from .pretrained import PretrainedEncoder

        return PretrainedEncoder(**kwargs)
    raise BridgeExportError(f"unknown encoder backend {name!r}; choose from {BACKENDS}")


def vlm_backend(name: str, **kwargs):
    if name == "synthetic":
        return SyntheticVlm(**kwargs)
    if name == "pretrained":
        from .pretrained import PretrainedVlm

        return PretrainedVlm(**kwargs)
    raise BridgeExportError(f"unknown VLM backend {name!r}; choose from {BACKENDS}")
