import json

import numpy as np
import pytest

from otflow.datasets import (
    GaussianScheduleConfig,
    TimeSeries,
    generate_gaussian_series,
    heldout_indices,
    load_dataset,
    load_series,
    logistic_warp,
    subsample,
    write_dataset,
    write_series,
)
from otflow.errors import (
    ConfigOutOfBounds,
    DimsMismatch,
    MissingFile,
    NonIncreasingTimes,
)
from otflow.grids import ImageGrid


def small_cfg(**kw):
    defaults = dict(grid_height=32, grid_width=32, n_series=2, n_frames=11, seed=3)
    defaults.update(kw)
    return GaussianScheduleConfig(**defaults)


def frame_centroid_x(frame):
    yy, xx = np.mgrid[0 : frame.height, 0 : frame.width].astype(np.float64)
    w = frame.values / frame.values.sum()
    return float((w * xx).sum())


def test_warp_uniform_limit():
    for tau in np.linspace(0, 1, 11):
        assert abs(logistic_warp(tau, 1e-9) - tau) < 1e-9


def test_warp_midpoint_is_half_for_any_sharpness():
    for s in (1e-9, 1.0, 8.0, 30.0):
        assert logistic_warp(0.5, s) == pytest.approx(0.5, abs=1e-12)


def test_sharpness_zero_center_at_midpoint():
    cfg = small_cfg(sharpness=1e-9, n_frames=11)
    series = generate_gaussian_series(cfg)[0]
    mid_x = frame_centroid_x(series.frames[5])
    lo_x = frame_centroid_x(series.frames[0])
    hi_x = frame_centroid_x(series.frames[10])
    assert abs(mid_x - 0.5 * (lo_x + hi_x)) < 0.1


def test_centers_and_widths_monotone():
    series = generate_gaussian_series(small_cfg())[0]
    cxs = [frame_centroid_x(f) for f in series.frames]
    assert all(b >= a - 1e-9 for a, b in zip(cxs[:-1], cxs[1:]))
    masses = [f.values.sum() for f in series.frames]
    assert all(b >= a for a, b in zip(masses[:-1], masses[1:]))


def test_mid_sequence_speed_exceeds_early_speed():
    w = lambda tau: logistic_warp(tau, 8.0)
    assert (w(0.55) - w(0.45)) > (w(0.1) - w(0.0))


def test_generator_deterministic():
    a = generate_gaussian_series(small_cfg())
    b = generate_gaussian_series(small_cfg())
    for sa, sb in zip(a, b):
        for fa, fb in zip(sa.frames, sb.frames):
            np.testing.assert_array_equal(fa.values, fb.values)


def test_generated_frames_strictly_positive():
    series = generate_gaussian_series(small_cfg())[0]
    for f in series.frames:
        assert f.values.min() > 0.0


def test_out_of_bounds_config_rejected():
    with pytest.raises(ConfigOutOfBounds):
        GaussianScheduleConfig(x_end_range=(30.0, 31.0))


def test_subsample_stride_5():
    cfg = small_cfg(n_series=1, n_frames=31)
    series = generate_gaussian_series(cfg)[0]
    train, heldout = subsample(series, 5)
    assert train.times == [0, 5, 10, 15, 20, 25, 30]
    assert len(heldout) == 24
    assert heldout_indices(31, 5) == [i for i in range(31) if i % 5 != 0]


def test_subsample_stride_1_no_heldout():
    series = generate_gaussian_series(small_cfg(n_series=1))[0]
    train, heldout = subsample(series, 1)
    assert len(train) == len(series) and heldout is None


def test_subsample_degenerate_stride():
    series = generate_gaussian_series(small_cfg(n_series=1, n_frames=7))[0]
    train, heldout = subsample(series, 10)
    assert train.times == [0.0]
    assert len(heldout) == 6


def test_series_roundtrip_bit_identical(tmp_path):
    series = generate_gaussian_series(small_cfg(n_series=1))[0]
    write_series(series, tmp_path / "series_0")
    back = load_series(tmp_path / "series_0" / "manifest.json")
    assert back.times == series.times
    for fa, fb in zip(series.frames, back.frames):
        np.testing.assert_array_equal(fa.values, fb.values)
    # rewrite produces identical bytes
    write_series(back, tmp_path / "series_copy")
    for j in range(len(series)):
        a = (tmp_path / "series_0" / f"frame_{j:04d}.f32grid").read_bytes()
        b = (tmp_path / "series_copy" / f"frame_{j:04d}.f32grid").read_bytes()
        assert a == b


def test_dataset_roundtrip(tmp_path):
    data = generate_gaussian_series(small_cfg())
    write_dataset(data, tmp_path)
    back = load_dataset(tmp_path)
    assert len(back) == len(data)


def test_load_series_errors(tmp_path):
    with pytest.raises(MissingFile):
        load_series(tmp_path / "nope" / "manifest.json")

    series = generate_gaussian_series(small_cfg(n_series=1, n_frames=3))[0]
    write_series(series, tmp_path / "s")
    manifest = json.loads((tmp_path / "s" / "manifest.json").read_text())

    manifest_bad = dict(manifest, times=[0.0, 1.0, 1.0])
    (tmp_path / "s" / "manifest.json").write_text(json.dumps(manifest_bad))
    with pytest.raises(NonIncreasingTimes):
        load_series(tmp_path / "s" / "manifest.json")

    manifest_missing = dict(manifest, frames=manifest["frames"][:-1] + ["ghost.f32grid"])
    (tmp_path / "s" / "manifest.json").write_text(json.dumps(manifest_missing))
    with pytest.raises(MissingFile):
        load_series(tmp_path / "s" / "manifest.json")


def test_dims_mismatch_across_frames():
    with pytest.raises(DimsMismatch):
        TimeSeries(frames=[ImageGrid(np.ones((4, 4))), ImageGrid(np.ones((2, 2)))],
                   times=[0.0, 1.0])
