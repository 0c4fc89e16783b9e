"""Discrete images on regular 2-D grids and their normalization into probability measures.

Pixel area is fixed to 1, so the discrete integral of an image is the plain
sum of its values; physical grid spacing only enters through the transport
cost (see `otflow.ot.GridCost`).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagic, DimsMismatch, NonFinite, ZeroMass

# Below this total mass an image cannot be normalized; dividing by a
# near-zero mass would turn one degenerate decoder output into NaNs that
# poison the whole training run.
MASS_FLOOR = 1e-8

_F32GRID_MAGIC = b"F32G"


@dataclass(frozen=True)
class ImageGrid:
    """Nonnegative intensity field on an H x W grid (float64, row-major)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.size < 1:
            raise DimsMismatch(f"expected a 2-D grid, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise NonFinite("grid contains non-finite values")
        if (v < 0).any():
            raise ValueError("grid contains negative intensities")
        object.__setattr__(self, "values", np.ascontiguousarray(v))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class NormalizedMeasure:
    """An ImageGrid whose values sum to 1 (a probability measure on the grid)."""

    grid: ImageGrid

    def __post_init__(self):
        s = float(np.sum(self.grid.values))
        if abs(s - 1.0) > 1e-9:
            raise ValueError(f"measure sums to {s!r}, not 1 within 1e-9")

    @property
    def values(self) -> np.ndarray:
        return self.grid.values

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape


def total_mass(img: ImageGrid) -> float:
    """Discrete integral of the image (unit pixel area)."""
    return float(np.sum(img.values))


def normalize(img: ImageGrid) -> NormalizedMeasure:
    """Divide an image by its total mass.

    Raises ZeroMass when the mass is at or below MASS_FLOOR, which signals a
    degenerate (near-empty) frame rather than silently producing NaNs.
    """
    m = total_mass(img)
    if m <= MASS_FLOOR:
        raise ZeroMass(f"total mass {m:.3e} is at or below the floor {MASS_FLOOR:.0e}")
    return NormalizedMeasure(ImageGrid(img.values / m))


def scale(measure: NormalizedMeasure, mass: float) -> ImageGrid:
    """Rescale a unit-mass measure to the given total mass."""
    mass = float(mass)
    if not np.isfinite(mass):
        raise NonFinite(f"mass must be finite, got {mass!r}")
    if mass < 0:
        raise ValueError(f"mass must be nonnegative, got {mass!r}")
    return ImageGrid(measure.values * mass)


def write_f32grid(img: ImageGrid, path) -> None:
    """Write the `.f32grid` binary format: 'F32G', u32 height, u32 width, f32 LE payload."""
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(_F32GRID_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(img.values.astype("<f4").tobytes())


def read_f32grid(path) -> ImageGrid:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _F32GRID_MAGIC:
            raise BadMagic(f"{path}: expected {_F32GRID_MAGIC!r}, got {magic!r}")
        header = fh.read(8)
        if len(header) != 8:
            raise BadMagic(f"{path}: truncated header")
        h, w = struct.unpack("<II", header)
        payload = fh.read()
    expected = 4 * h * w
    if len(payload) != expected:
        raise DimsMismatch(f"{path}: expected {expected} payload bytes, got {len(payload)}")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(h, w)
    return ImageGrid(values)


def write_pgm(img: ImageGrid, path) -> None:
    """Export to 8-bit binary PGM, linearly rescaling [0, max] -> [0, 255]. Visualization only."""
    h, w = img.shape
    peak = float(img.values.max())
    if peak > 0:
        pixels = np.rint(img.values * (255.0 / peak)).astype(np.uint8)
    else:
        pixels = np.zeros((h, w), dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
