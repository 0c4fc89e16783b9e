"""Reconstruction metrics and the evaluation protocols.

SSIM is the mean of local similarities over all fully-interior 7x7 windows,
Gaussian-weighted (sigma 1.5), with K1 = 0.01, K2 = 0.03 and dynamic range
taken as the larger (max - min) of the two images, floored at 1e-6 so that
near-constant frames (typical of early decoders) do not blow up the ratio.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import models
from .errors import DimsMismatch
from .grids import ImageGrid, normalize, scale, total_mass
from .ot import SinkhornConfig, barycenter_interp, default_barycenter_config

PROTOCOLS = ("static", "dynamic", "dynamic-heldout", "interp-l2", "interp-w2",
             "interp-manifold")

SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_RANGE_FLOOR = 1e-6


@dataclass(frozen=True)
class MetricReport:
    protocol: str
    series_indices: list
    frame_indices: list
    mse_values: list
    ssim_values: list

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol tag {self.protocol!r}")
        n = len(self.mse_values)
        if not (len(self.ssim_values) == len(self.frame_indices) == len(self.series_indices) == n):
            raise DimsMismatch("per-frame lists must have equal lengths")

    @property
    def mse_mean(self) -> float:
        return float(np.mean(self.mse_values))

    @property
    def ssim_mean(self) -> float:
        return float(np.mean(self.ssim_values))

    @property
    def ssim_std(self) -> float:
        return float(np.std(self.ssim_values))


def mse(a: ImageGrid, b: ImageGrid) -> float:
    if a.shape != b.shape:
        raise DimsMismatch(f"mse: {a.shape} vs {b.shape}")
    diff = a.values - b.values
    return float(np.mean(diff * diff))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    one_d = np.exp(-(coords**2) / (2.0 * sigma**2))
    win = np.outer(one_d, one_d)
    return win / win.sum()


def _window_stats(img: np.ndarray, win: np.ndarray) -> tuple:
    view = np.lib.stride_tricks.sliding_window_view(img, win.shape)
    mu = np.einsum("ijkl,kl->ij", view, win)
    second = np.einsum("ijkl,kl->ij", view * view, win)
    return view, mu, second


def ssim(a: ImageGrid, b: ImageGrid) -> float:
    if a.shape != b.shape:
        raise DimsMismatch(f"ssim: {a.shape} vs {b.shape}")
    if a.height < SSIM_WINDOW or a.width < SSIM_WINDOW:
        raise DimsMismatch(f"ssim needs dims >= {SSIM_WINDOW}, got {a.shape}")
    x, y = a.values, b.values
    drange = max(float(x.max() - x.min()), float(y.max() - y.min()), SSIM_RANGE_FLOOR)
    c1 = (SSIM_K1 * drange) ** 2
    c2 = (SSIM_K2 * drange) ** 2
    win = _gaussian_window()
    view_x, mu_x, xx = _window_stats(x, win)
    view_y, mu_y, yy = _window_stats(y, win)
    xy = np.einsum("ijkl,kl->ij", view_x * view_y, win)
    var_x = xx - mu_x * mu_x
    var_y = yy - mu_y * mu_y
    cov = xy - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# protocols


def eval_static(series_list, params, arch) -> MetricReport:
    """Encode-decode every frame and compare to the original."""
    si, fi, mses, ssims = [], [], [], []
    for s_idx, series in enumerate(series_list):
        for f_idx, frame in enumerate(series.frames):
            recon = models.decode(models.encode(frame, params, arch), params, arch)
            si.append(s_idx)
            fi.append(f_idx)
            mses.append(mse(recon, frame))
            ssims.append(ssim(recon, frame))
    return MetricReport("static", si, fi, mses, ssims)


def dynamic_reconstructions(series, params, arch, substep: float = 0.1) -> list:
    """Decode the trajectory started from the first frame's code, at all frame times."""
    z0 = models.encode(series.frames[0], params, arch)
    rel_times = [t - series.times[0] for t in series.times]
    traj = models.integrate(z0.reshape(1, -1), rel_times, params, substep=substep)
    return [models.decode(code.values[0], params, arch) for code in traj.codes]


def eval_dynamic(series_list, params, arch, substep: float = 0.1,
                 heldout_only_indices=None) -> MetricReport:
    """Compare neural-ODE reconstructions to ground truth at every frame time.

    `heldout_only_indices`, when given, restricts the report to those frame
    indices (the dynamic-heldout protocol).
    """
    protocol = "dynamic" if heldout_only_indices is None else "dynamic-heldout"
    keep = None if heldout_only_indices is None else set(heldout_only_indices)
    si, fi, mses, ssims = [], [], [], []
    for s_idx, series in enumerate(series_list):
        recons = dynamic_reconstructions(series, params, arch, substep=substep)
        for f_idx, (recon, frame) in enumerate(zip(recons, series.frames)):
            if keep is not None and f_idx not in keep:
                continue
            si.append(s_idx)
            fi.append(f_idx)
            mses.append(mse(recon, frame))
            ssims.append(ssim(recon, frame))
    return MetricReport(protocol, si, fi, mses, ssims)


def interp_baselines(frame0: ImageGrid, frame1: ImageGrid, ts, methods=("l2", "w2"),
                     bary_cfg: SinkhornConfig | None = None) -> dict:
    """Euclidean and Wasserstein interpolations between two frames.

    The W2 path transports the normalized frames along the entropic
    barycentric interpolation and rescales by the linearly interpolated mass,
    mirroring the training-time mass schedule.
    """
    if frame0.shape != frame1.shape:
        raise DimsMismatch(f"interp: {frame0.shape} vs {frame1.shape}")
    out = {m: [] for m in methods}
    if "w2" in methods:
        mu0, mu1 = normalize(frame0), normalize(frame1)
        m0, m1 = total_mass(frame0), total_mass(frame1)
        if bary_cfg is None:
            bary_cfg = default_barycenter_config(frame0.height, frame0.width)
    for t in ts:
        t = float(t)
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"interpolation time {t} outside [0, 1]")
        if "l2" in methods:
            out["l2"].append(ImageGrid((1.0 - t) * frame0.values + t * frame1.values))
        if "w2" in methods:
            bar = barycenter_interp(mu0, mu1, t, bary_cfg)
            out["w2"].append(scale(bar, (1.0 - t) * m0 + t * m1))
    return out


def eval_interpolation(series, j0: int, j1: int, method: str, params=None, arch=None,
                       substep: float = 0.1) -> MetricReport:
    """Score interpolated frames against the ground-truth frames between j0 and j1."""
    inner = list(range(j0, j1 + 1))
    t0, t1 = series.times[j0], series.times[j1]
    ts = [(series.times[j] - t0) / (t1 - t0) for j in inner]
    if method in ("l2", "w2"):
        frames = interp_baselines(series.frames[j0], series.frames[j1], ts,
                                  methods=(method,))[method]
        protocol = f"interp-{method}"
    elif method == "manifold":
        z0 = models.encode(series.frames[j0], params, arch)
        traj = models.integrate(z0.reshape(1, -1),
                                [series.times[j] - t0 for j in inner], params, substep=substep)
        frames = [models.decode(c.values[0], params, arch) for c in traj.codes]
        protocol = "interp-manifold"
    else:
        raise ValueError(f"unknown interpolation method {method!r}")
    si, fi, mses, ssims = [], [], [], []
    for j, recon in zip(inner, frames):
        si.append(0)
        fi.append(j)
        mses.append(mse(recon, series.frames[j]))
        ssims.append(ssim(recon, series.frames[j]))
    return MetricReport(protocol, si, fi, mses, ssims)


# ---------------------------------------------------------------------------
# CSV emission


def write_per_frame_csv(reports, path, regularizer: str, dataset: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["protocol", "regularizer", "dataset", "frame_index",
                         "series_index", "mse", "ssim"])
        for report in reports:
            for s_idx, f_idx, m, s in zip(report.series_indices, report.frame_indices,
                                          report.mse_values, report.ssim_values):
                writer.writerow([report.protocol, regularizer, dataset, f_idx, s_idx,
                                 repr(m), repr(s)])


def write_aggregate_csv(rows, path) -> None:
    """`rows` are (regularizer, dataset, report) triples, one output line each."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["regularizer", "dataset", "mse_mean", "ssim_mean", "ssim_std"])
        for regularizer, dataset, report in rows:
            writer.writerow([regularizer, dataset, repr(report.mse_mean),
                             repr(report.ssim_mean), repr(report.ssim_std)])
