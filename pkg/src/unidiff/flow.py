"""Linear-interpolant flow matching: noising, target velocity, loss, guidance, Euler sampler.

Time runs from noise at ``t = 0`` to data at ``t = 1``:
``z_t = t * z + (1 - t) * eps`` with constant target velocity ``z - eps``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import Tensor

from unidiff import codec
from unidiff._runtime import NumericalError
from unidiff.text import PromptEmbeddings


def _same_shape(*arrays) -> None:
    shapes = {tuple(a.shape) for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def _time_like(t, z):
    """Broadcast a scalar or per-sample ``t`` against a ``(B, ...)`` latent."""
    if isinstance(t, (int, float)):
        return t
    t = torch.as_tensor(t) if isinstance(z, Tensor) else np.asarray(t)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (z.ndim - t.ndim))


def interpolate(z, eps, t):
    _same_shape(z, eps)
    t = _time_like(t, z)
    return t * z + (1 - t) * eps


def target_velocity(z, eps):
    _same_shape(z, eps)
    return z - eps


def cfm_loss(pred, target):
    """Mean squared error over every cell and channel."""
    _same_shape(pred, target)
    if isinstance(pred, Tensor):
        if not (torch.isfinite(pred).all() and torch.isfinite(target).all()):
            raise NumericalError("non-finite values in flow-matching loss")
        return ((pred - target) ** 2).mean()
    pred, target = np.asarray(pred), np.asarray(target)
    if not (np.isfinite(pred).all() and np.isfinite(target).all()):
        raise NumericalError("non-finite values in flow-matching loss")
    return float(np.mean((pred - target) ** 2))


@dataclass(frozen=True)
class GuidanceScales:
    text: float = 4.0
    image: float = 1.5

    def __post_init__(self):
        if not (np.isfinite(self.text) and np.isfinite(self.image)):
            raise ValueError("guidance scales must be finite")


def cfg_combine(u_uncond, u_img, u_full, scales: GuidanceScales = GuidanceScales()):
    """Unconditional + image-guidance step + text-guidance step on top of the image branch.

    Evaluated as the equivalent weighted sum so that unit scales return ``u_full``
    and zero scales return ``u_uncond`` bit-exactly (zero weights drop out).
    """
    _same_shape(u_uncond, u_img, u_full)
    a_x, a_v = scales.text, scales.image
    return (1 - a_v) * u_uncond + (a_v - a_x) * u_img + a_x * u_full


# (prompt, t, conditioned latent (B, h, w, c_in)) -> velocity (B, h, w, c_lat)
VelocityFn = Callable[[PromptEmbeddings, Tensor, Tensor], Tensor]


@dataclass
class SampleSpec:
    prompt: PromptEmbeddings
    null_prompt: PromptEmbeddings
    v: np.ndarray
    mask: np.ndarray
    steps: int = 50
    seed: int = 0
    scales: GuidanceScales = GuidanceScales()


def initial_noise(shape: tuple[int, ...], seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(shape)


def sample_latent(model: VelocityFn, spec: SampleSpec, dtype: torch.dtype = torch.float32) -> np.ndarray:
    """Euler integration of the guided field from t=0 to t=1 on a uniform grid.

    The ODE state is carried in float64; the model sees ``dtype`` inputs.
    """
    if spec.steps < 1:
        raise ValueError("steps must be >= 1")
    v = np.asarray(spec.v, dtype=np.float64)
    m = np.asarray(spec.mask, dtype=np.float64)[..., None]
    z = initial_noise(v.shape, spec.seed)
    with torch.no_grad():
        prompts = PromptEmbeddings.stack([spec.null_prompt, spec.null_prompt, spec.prompt])
        prompts = PromptEmbeddings(prompts.rows.to(dtype), prompts.valid)
    zeros_v, zeros_m = np.zeros_like(v), np.zeros_like(m)
    dt = 1.0 / spec.steps
    for k in range(spec.steps):
        t = k / spec.steps
        d = np.stack([
            np.concatenate([z, zeros_v, zeros_m], axis=-1),
            np.concatenate([z, v, m], axis=-1),
            np.concatenate([z, v, m], axis=-1),
        ])
        with torch.no_grad():
            out = model(prompts, torch.full((3,), t, dtype=dtype), torch.as_tensor(d, dtype=dtype))
        u_uncond, u_img, u_full = (o.to(torch.float64).numpy() for o in out)
        u = cfg_combine(u_uncond, u_img, u_full, spec.scales)
        z = z + dt * u
        if not np.isfinite(z).all():
            raise NumericalError(f"non-finite latent at sampler step {k}", step=k)
    return z.astype(np.float32)


def sample(model: VelocityFn, spec: SampleSpec, dtype: torch.dtype = torch.float32, factor: int = 2) -> np.ndarray:
    return codec.decode(sample_latent(model, spec, dtype), factor)
