"""Synthetic accelerating-Gaussian time series, stride subsampling, and disk I/O.

The generator renders an isotropic blob that drifts and grows between
configured start and end states. Both the center and the width follow a
logistic time warp that is steepest mid-sequence, so a coarsely subsampled
series shows an abrupt transition there. Frames are unnormalized: the peak
intensity stays fixed while the footprint grows, so total mass grows with
the width, which is exactly the degree of freedom the mass schedule in the
training objective has to track.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigOutOfBounds, DimsMismatch, MissingFile, NonIncreasingTimes
from .grids import ImageGrid, read_f32grid, write_f32grid

# keeps generated frames strictly positive after float32 quantization
_INTENSITY_FLOOR = 1e-30


@dataclass(frozen=True)
class TimeSeries:
    frames: list
    times: list

    def __post_init__(self):
        if len(self.frames) != len(self.times):
            raise DimsMismatch(f"{len(self.frames)} frames vs {len(self.times)} times")
        if len(self.frames) == 0:
            raise ValueError("a time series needs at least one frame")
        shape = self.frames[0].shape
        for f in self.frames[1:]:
            if f.shape != shape:
                raise DimsMismatch(f"frame dims {f.shape} != {shape}")
        ts = list(self.times)
        if any(t1 - t0 <= 0 for t0, t1 in zip(ts[:-1], ts[1:])):
            raise NonIncreasingTimes(f"times not strictly increasing: {ts}")

    def __len__(self):
        return len(self.frames)

    @property
    def shape(self):
        return self.frames[0].shape


@dataclass(frozen=True)
class GaussianScheduleConfig:
    grid_height: int = 32
    grid_width: int = 32
    n_series: int = 10
    n_frames: int = 31
    x_start_range: tuple = (7.0, 9.0)
    x_end_range: tuple = (19.0, 21.0)
    sigma_start_range: tuple = (1.8, 2.2)
    sigma_end_range: tuple = (2.6, 3.0)
    y_center_range: tuple = (14.5, 16.5)
    sharpness: float = 8.0
    amplitude: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_series < 1 or self.n_frames < 1:
            raise ConfigOutOfBounds("n_series and n_frames must be >= 1")
        if self.sharpness < 0:
            raise ConfigOutOfBounds("sharpness must be >= 0")
        # centers must keep 3 sigma inside the grid at every time; center and
        # width follow the same monotone warp, so the endpoints are binding
        start_lo = min(self.x_start_range) - 3.0 * max(self.sigma_start_range)
        start_hi = max(self.x_start_range) + 3.0 * max(self.sigma_start_range)
        end_lo = min(self.x_end_range) - 3.0 * max(self.sigma_end_range)
        end_hi = max(self.x_end_range) + 3.0 * max(self.sigma_end_range)
        if min(start_lo, end_lo) < 0 or max(start_hi, end_hi) > self.grid_width - 1:
            raise ConfigOutOfBounds(
                f"x extent [{min(start_lo, end_lo):.1f}, {max(start_hi, end_hi):.1f}] "
                f"leaves the 0..{self.grid_width - 1} grid")
        sig_max = max(self.sigma_start_range[1], self.sigma_end_range[1])
        y_lo = min(self.y_center_range) - 3.0 * sig_max
        y_hi = max(self.y_center_range) + 3.0 * sig_max
        if y_lo < 0 or y_hi > self.grid_height - 1:
            raise ConfigOutOfBounds(
                f"y extent [{y_lo:.1f}, {y_hi:.1f}] leaves the 0..{self.grid_height - 1} grid")


def logistic_warp(tau: float, sharpness: float) -> float:
    """Monotone [0,1] -> [0,1] warp, steepest at tau = 0.5; identity as sharpness -> 0."""
    if sharpness < 1e-6:
        return tau
    lo = 1.0 / (1.0 + math.exp(0.5 * sharpness))
    hi = 1.0 / (1.0 + math.exp(-0.5 * sharpness))
    val = 1.0 / (1.0 + math.exp(-(tau - 0.5) * sharpness))
    return (val - lo) / (hi - lo)


def _render_gaussian(h, w, cy, cx, sigma, amplitude):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    v = amplitude * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
    v = np.maximum(v, _INTENSITY_FLOOR)
    # quantize to f32 so in-memory frames round-trip the file format exactly
    return ImageGrid(v.astype(np.float32).astype(np.float64))


def generate_gaussian_series(cfg: GaussianScheduleConfig) -> list:
    rng = np.random.default_rng(cfg.seed)
    series = []
    for _ in range(cfg.n_series):
        x0 = rng.uniform(*cfg.x_start_range)
        x1 = rng.uniform(*cfg.x_end_range)
        s0 = rng.uniform(*cfg.sigma_start_range)
        s1 = rng.uniform(*cfg.sigma_end_range)
        cy = rng.uniform(*cfg.y_center_range)
        frames, times = [], []
        for j in range(cfg.n_frames):
            tau = j / (cfg.n_frames - 1) if cfg.n_frames > 1 else 0.0
            w = logistic_warp(tau, cfg.sharpness)
            cx = x0 + (x1 - x0) * w
            sigma = s0 + (s1 - s0) * w
            frames.append(_render_gaussian(cfg.grid_height, cfg.grid_width,
                                           cy, cx, sigma, cfg.amplitude))
            times.append(float(j))
        masses = [f.values.sum() for f in frames]
        assert all(m1 >= m0 for m0, m1 in zip(masses[:-1], masses[1:])), \
            "total mass must be monotone in the growing width"
        series.append(TimeSeries(frames=frames, times=times))
    return series


def subsample(series: TimeSeries, stride: int) -> tuple:
    """Split into (train, heldout): train keeps indices 0, stride, 2*stride, ..."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    train_idx = list(range(0, len(series), stride))
    held_idx = [i for i in range(len(series)) if i % stride != 0]
    train = TimeSeries(frames=[series.frames[i] for i in train_idx],
                       times=[series.times[i] for i in train_idx])
    heldout = None
    if held_idx:
        heldout = TimeSeries(frames=[series.frames[i] for i in held_idx],
                             times=[series.times[i] for i in held_idx])
    return train, heldout


def heldout_indices(n_frames: int, stride: int) -> list:
    return [i for i in range(n_frames) if i % stride != 0]


# ---------------------------------------------------------------------------
# disk format: series_<k>/manifest.json + .f32grid frames


def write_series(series: TimeSeries, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for j, frame in enumerate(series.frames):
        name = f"frame_{j:04d}.f32grid"
        write_f32grid(frame, directory / name)
        names.append(name)
    manifest = {"frames": names, "times": [float(t) for t in series.times]}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def load_series(manifest_path) -> TimeSeries:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise MissingFile(f"manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    names = manifest["frames"]
    times = [float(t) for t in manifest["times"]]
    if len(names) != len(times):
        raise DimsMismatch(f"{len(names)} frames vs {len(times)} times in {manifest_path}")
    frames = []
    for name in names:
        path = manifest_path.parent / name
        if not path.exists():
            raise MissingFile(f"frame file not found: {path}")
        frames.append(read_f32grid(path))
    return TimeSeries(frames=frames, times=times)


def write_dataset(series_list, directory) -> None:
    directory = Path(directory)
    for k, series in enumerate(series_list):
        write_series(series, directory / f"series_{k}")


def load_dataset(directory) -> list:
    directory = Path(directory)
    series_dirs = sorted(directory.glob("series_*"),
                         key=lambda p: int(p.name.split("_")[1]))
    if not series_dirs:
        raise MissingFile(f"no series_<k> directories under {directory}")
    return [load_series(d / "manifest.json") for d in series_dirs]


def mass_stats(series_list) -> dict:
    """Raw per-dataset mass statistics, recorded in the run metadata."""
    masses = np.array([f.values.sum() for s in series_list for f in s.frames])
    return {"mass_min": float(masses.min()), "mass_max": float(masses.max()),
            "mass_mean": float(masses.mean())}
