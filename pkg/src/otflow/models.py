"""Encoder, decoder, latent vector field, and the fixed-step RK4 integrator.

All three networks are dense MLPs with tanh hidden layers; the decoder ends
in softplus (default) so decoded frames are strictly positive and can always
be normalized into measures. The vector field's final layer starts at zero,
so training begins from the identity flow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import NonFinite, ShapeMismatch
from .grids import ImageGrid

_DECODER_OUTPUTS = ("softplus", "relu")


@dataclass(frozen=True)
class ArchitectureConfig:
    image_height: int = 32
    image_width: int = 32
    latent_dim: int = 16
    encoder_widths: tuple = (256, 64)
    decoder_widths: tuple = (64, 256)
    field_widths: tuple = (64, 64)
    decoder_output: str = "softplus"

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.image_height < 1 or self.image_width < 1:
            raise ValueError("image dims must be >= 1")
        if self.decoder_output not in _DECODER_OUTPUTS:
            raise ValueError(f"decoder_output must be one of {_DECODER_OUTPUTS}")
        object.__setattr__(self, "encoder_widths", tuple(self.encoder_widths))
        object.__setattr__(self, "decoder_widths", tuple(self.decoder_widths))
        object.__setattr__(self, "field_widths", tuple(self.field_widths))

    @property
    def image_size(self) -> int:
        return self.image_height * self.image_width

    def layer_dims(self, net: str) -> list[tuple[int, int]]:
        m, d = self.image_size, self.latent_dim
        if net == "enc":
            sizes = [m, *self.encoder_widths, d]
        elif net == "dec":
            sizes = [d, *self.decoder_widths, m]
        elif net == "field":
            sizes = [d, *self.field_widths, d]
        else:
            raise ValueError(net)
        return list(zip(sizes[:-1], sizes[1:]))


@dataclass(frozen=True)
class Trajectory:
    times: list
    codes: list  # Tensors of shape (batch, latent_dim), codes[0] is the initial condition


def init_params(arch: ArchitectureConfig, seed: int, dtype=np.float32) -> dict:
    """Uniform fan-in initialization; the field's output layer is zeroed."""
    rng = np.random.default_rng(seed)
    params: dict[str, ad.Tensor] = {}
    for net in ("enc", "dec", "field"):
        dims = arch.layer_dims(net)
        for k, (fan_in, fan_out) in enumerate(dims):
            bound = 1.0 / math.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=fan_out)
            if net == "field" and k == len(dims) - 1:
                w = np.zeros_like(w)
                b = np.zeros_like(b)
            params[f"{net}.{k}.w"] = ad.parameter(w.astype(dtype), dtype=dtype)
            params[f"{net}.{k}.b"] = ad.parameter(b.astype(dtype), dtype=dtype)
    return params


def params_from_arrays(arrays: dict, dtype=None) -> dict:
    """Wrap checkpointed arrays back into trainable tensors."""
    out = {}
    for name, values in arrays.items():
        v = values if dtype is None else values.astype(dtype)
        out[name] = ad.parameter(np.array(v))
    return out


def _mlp(x: ad.Tensor, params: dict, net: str, n_layers: int, final_act=None) -> ad.Tensor:
    h = x
    for k in range(n_layers):
        h = ad.add(ad.matmul(h, params[f"{net}.{k}.w"]), params[f"{net}.{k}.b"])
        if k < n_layers - 1:
            h = ad.tanh(h)
    if final_act is not None:
        h = final_act(h)
    return h


def _n_layers(params: dict, net: str) -> int:
    return sum(1 for name in params if name.startswith(f"{net}.") and name.endswith(".w"))


def encode_batch(x: ad.Tensor, params: dict) -> ad.Tensor:
    return _mlp(x, params, "enc", _n_layers(params, "enc"))


def decode_batch(z: ad.Tensor, params: dict, arch: ArchitectureConfig) -> ad.Tensor:
    final = ad.softplus if arch.decoder_output == "softplus" else ad.relu
    return _mlp(z, params, "dec", _n_layers(params, "dec"), final_act=final)


def field_batch(z: ad.Tensor, params: dict) -> ad.Tensor:
    return _mlp(z, params, "field", _n_layers(params, "field"))


def encode(img: ImageGrid, params: dict, arch: ArchitectureConfig) -> np.ndarray:
    """Latent code of a single image (no gradient recording)."""
    flat = img.values.reshape(1, -1)
    if flat.shape[1] != arch.image_size:
        raise ShapeMismatch(f"image has {flat.shape[1]} pixels, expected {arch.image_size}")
    dtype = next(iter(params.values())).values.dtype
    z = encode_batch(ad.constant(flat.astype(dtype)), params)
    out = z.values[0]
    if not np.isfinite(out).all():
        raise NonFinite("encoder produced non-finite latent code")
    return out


def decode(z: np.ndarray, params: dict, arch: ArchitectureConfig) -> ImageGrid:
    """Decoded image of a single latent code (no gradient recording)."""
    z = np.asarray(z)
    if z.shape != (arch.latent_dim,):
        raise ShapeMismatch(f"latent code has shape {z.shape}, expected ({arch.latent_dim},)")
    dtype = next(iter(params.values())).values.dtype
    x = decode_batch(ad.constant(z.reshape(1, -1).astype(dtype)), params, arch)
    return ImageGrid(x.values.reshape(arch.image_height, arch.image_width).astype(np.float64))


def _rk4_step(z: ad.Tensor, dt: float, params: dict) -> ad.Tensor:
    k1 = field_batch(z, params)
    k2 = field_batch(ad.add(z, ad.mul(k1, dt / 2.0)), params)
    k3 = field_batch(ad.add(z, ad.mul(k2, dt / 2.0)), params)
    k4 = field_batch(ad.add(z, ad.mul(k3, dt)), params)
    incr = ad.add(ad.add(k1, ad.mul(k2, 2.0)), ad.add(ad.mul(k3, 2.0), k4))
    return ad.add(z, ad.mul(incr, dt / 6.0))


def integrate(z0, times, params: dict, substep: float = 0.1) -> Trajectory:
    """Classical RK4 from times[0] through every requested time.

    Each inter-sample gap is covered by ceil(gap/substep) equal steps, so all
    requested times are hit exactly. Gradients flow through every stage when
    a tape is active (discretize-then-optimize).
    """
    times = [float(t) for t in times]
    if any(t1 - t0 <= 0 for t0, t1 in zip(times[:-1], times[1:])):
        raise ValueError("times must be strictly increasing")
    if not substep > 0:
        raise ValueError("substep must be positive")
    z = z0 if isinstance(z0, ad.Tensor) else ad.constant(np.atleast_2d(z0))
    codes = [z]
    for t0, t1 in zip(times[:-1], times[1:]):
        gap = t1 - t0
        n = max(1, math.ceil(gap / substep - 1e-9))
        dt = gap / n
        for _ in range(n):
            z = _rk4_step(z, dt, params)
        if not np.isfinite(z.values).all():
            raise NonFinite(f"latent state diverged while integrating to t={t1:g}")
        codes.append(z)
    return Trajectory(times=times, codes=codes)
