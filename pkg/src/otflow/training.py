"""The joint training objective: reconstruction, latent consistency, and the
temporal regularizer, assembled over full batches.

Per series i with frames I_j at times t_j the data terms are the mean over
(i, j) of

    ||D(z_i(t_j)) - I_j||^2 + gamma1*||D(E(I_j)) - I_j||^2 + gamma2*||z_i(t_j) - E(I_j)||^2

where z_i(t) solves the latent ODE started from E(I_1). The temporal term
adds, per consecutive frame pair, the interval length times the mean over
interior sample times of a squared deviation:

* ot: from the mass-scheduled barycentric interpolation of the normalized
  endpoint decodings (the target is held constant per step; gradients reach
  the decoder through the trajectory and the endpoint masses);
* l2-latent: the latent velocity ||v(z(t))||^2;
* l2-image: the forward-difference image velocity ||(D(z(t+d)) - D(z(t)))/d||^2.

All norms are squared (differentiability; recorded in run_meta.json).
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import models
from .datasets import TimeSeries, mass_stats
from .errors import NonFinite, OutOfInterval, ZeroMass
from .grids import MASS_FLOOR, ImageGrid, normalize
from .ot import SinkhornConfig, barycenter_interp, default_barycenter_config

logger = logging.getLogger(__name__)

REGULARIZER_KINDS = ("ot", "l2-latent", "l2-image", "none")


@dataclass(frozen=True)
class LossWeights:
    gamma1: float = 1.0
    gamma2: float = 1.0
    lam: float = 0.1

    def __post_init__(self):
        for name in ("gamma1", "gamma2", "lam"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class TrainConfig:
    epochs: int = 500
    seed: int = 0
    weights: LossWeights = dataclass_field(default_factory=LossWeights)
    reg: str = "ot"
    ot_cfg: SinkhornConfig | None = None  # barycenter solver; grid-derived default
    intermediate_samples_per_interval: int = 3
    ode_substep: float = 0.1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.intermediate_samples_per_interval < 1:
            raise ValueError("intermediate_samples_per_interval must be >= 1")
        if self.reg not in REGULARIZER_KINDS:
            raise ValueError(f"reg must be one of {REGULARIZER_KINDS}, got {self.reg!r}")


def mass_schedule(m0: float, m1: float, t: float, t0: float, t1: float) -> float:
    """Linear interpolation of the endpoint masses across [t0, t1]."""
    if not t0 < t1:
        raise OutOfInterval(f"need t0 < t1, got [{t0}, {t1}]")
    if not t0 <= t <= t1:
        raise OutOfInterval(f"t={t} outside [{t0}, {t1}]")
    w = (t - t0) / (t1 - t0)
    # m0 + w*(m1 - m0) is exact at the boundaries and for equal masses
    return m0 + w * (m1 - m0)


# ---------------------------------------------------------------------------
# time bookkeeping


@dataclass(frozen=True)
class SamplePoint:
    interval: int     # index j of [t_j, t_{j+1}]
    t_abs: float
    weight: float     # (t - t_j) / (t_{j+1} - t_j)
    pos: int          # index into the integration time grid
    pos_delta: int    # index of t + delta (forward difference), or -1


@dataclass(frozen=True)
class TimePlan:
    all_times: list       # integration grid, starts at the first frame time
    frame_pos: list       # position of each frame time in all_times
    samples: list         # SamplePoint per (interval, interior sample)
    delta: float


def plan_times(times, samples_per_interval: int, with_delta: bool) -> TimePlan:
    """Union of frame times and equispaced interior sample times (endpoints
    excluded; they are already pinned by the data terms)."""
    times = [float(t) for t in times]
    keys = {}

    def key_of(t):
        return round(t, 9)

    for t in times:
        keys[key_of(t)] = t
    raw_samples = []
    gaps = [t1 - t0 for t0, t1 in zip(times[:-1], times[1:])]
    delta = min(gaps) / (samples_per_interval + 1) if gaps else 0.0
    for j, (t0, t1) in enumerate(zip(times[:-1], times[1:])):
        for k in range(1, samples_per_interval + 1):
            w = k / (samples_per_interval + 1)
            t = t0 + w * (t1 - t0)
            raw_samples.append((j, t, w))
            keys.setdefault(key_of(t), t)
            if with_delta:
                keys.setdefault(key_of(t + delta), t + delta)
    all_times = sorted(keys.values())
    pos = {key_of(t): i for i, t in enumerate(all_times)}
    frame_pos = [pos[key_of(t)] for t in times]
    samples = [SamplePoint(interval=j, t_abs=t, weight=w, pos=pos[key_of(t)],
                           pos_delta=pos[key_of(t + delta)] if with_delta else -1)
               for j, t, w in raw_samples]
    return TimePlan(all_times=all_times, frame_pos=frame_pos, samples=samples, delta=delta)


def _group_by_times(dataset) -> list:
    groups = {}
    for idx, series in enumerate(dataset):
        key = tuple(round(float(t), 9) for t in series.times)
        groups.setdefault(key, []).append(idx)
    return list(groups.values())


# ---------------------------------------------------------------------------
# forward pass


def _rows(matrix: ad.Tensor, row_indices) -> ad.Tensor:
    parts = [ad.tslice(matrix, i, i + 1) for i in row_indices]
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)


class _GroupForward:
    """Batched forward pass for series sharing one time grid (time-major rows)."""

    def __init__(self, dataset, indices, arch, cfg):
        self.indices = indices
        self.series = [dataset[i] for i in indices]
        self.arch = arch
        self.n_series = len(indices)
        self.times = [float(t) for t in self.series[0].times]
        self.n_frames = len(self.times)
        with_delta = cfg.reg == "l2-image"
        self.plan = plan_times(self.times, cfg.intermediate_samples_per_interval,
                               with_delta) if self.n_frames > 1 else \
            TimePlan(all_times=[self.times[0]], frame_pos=[0], samples=[], delta=0.0)
        # frames stacked time-major: row (t, s) = t * n_series + s
        flat = np.stack([s.frames[t].values.ravel()
                         for t in range(self.n_frames) for s in self.series])
        self.frames_f64 = flat

    def run(self, params, cfg):
        dtype = next(iter(params.values())).values.dtype
        frames = ad.constant(self.frames_f64.astype(dtype))
        z_static = models.encode_batch(frames, params)
        recon_static = models.decode_batch(z_static, params, self.arch)

        z0 = ad.tslice(z_static, 0, self.n_series)
        rel_times = [t - self.plan.all_times[0] for t in self.plan.all_times]
        traj = models.integrate(z0, rel_times, params, substep=cfg.ode_substep)
        codes_all = ad.concat(traj.codes, axis=0) if len(traj.codes) > 1 else traj.codes[0]
        decoded_all = models.decode_batch(codes_all, params, self.arch)

        S = self.n_series
        frame_rows = [p * S + s for p in self.plan.frame_pos for s in range(S)]
        z_frames = _rows(codes_all, frame_rows)
        recon_dynamic = _rows(decoded_all, frame_rows)

        dynamic = ad.tsum(ad.square(ad.sub(recon_dynamic, frames)))
        static = ad.tsum(ad.square(ad.sub(recon_static, frames)))
        consistency = ad.tsum(ad.square(ad.sub(z_frames, z_static)))
        return {
            "dynamic": dynamic,
            "static": static,
            "consistency": consistency,
            "codes_all": codes_all,
            "decoded_all": decoded_all,
            "n_terms": S * self.n_frames,
        }

    def decoded_frames_np(self, decoded_all) -> np.ndarray:
        return decoded_all.values.astype(np.float64)

    def row(self, pos: int, s: int) -> int:
        return pos * self.n_series + s


def _interval_weights(plan: TimePlan, times) -> dict:
    gaps = {j: times[j + 1] - times[j] for j in range(len(times) - 1)}
    per_interval_counts = {}
    for sp in plan.samples:
        per_interval_counts[sp.interval] = per_interval_counts.get(sp.interval, 0) + 1
    return {j: gaps[j] / per_interval_counts[j] for j in per_interval_counts}


def _ot_penalty(group: _GroupForward, fwd, params, targets, arch) -> ad.Tensor:
    decoded_all = fwd["decoded_all"]
    masses = ad.tsum(decoded_all, axis=1)
    weights = _interval_weights(group.plan, group.times)
    total = None
    for s_pos, series_idx in enumerate(group.indices):
        for sp in group.plan.samples:
            target = targets[(series_idx, sp.interval, round(sp.weight, 9))]
            j0 = group.plan.frame_pos[sp.interval]
            j1 = group.plan.frame_pos[sp.interval + 1]
            m0 = ad.tslice(masses, group.row(j0, s_pos), group.row(j0, s_pos) + 1)
            m1 = ad.tslice(masses, group.row(j1, s_pos), group.row(j1, s_pos) + 1)
            sched = ad.add(ad.mul(m0, 1.0 - sp.weight), ad.mul(m1, sp.weight))
            row = group.row(sp.pos, s_pos)
            decoded = ad.reshape(ad.tslice(decoded_all, row, row + 1), (arch.image_size,))
            target_t = ad.constant(target.astype(decoded.values.dtype))
            residual = ad.sub(decoded, ad.mul(target_t, sched))
            term = ad.mul(ad.tsum(ad.square(residual)), weights[sp.interval])
            total = term if total is None else ad.add(total, term)
    return total


def _l2_latent_penalty(group: _GroupForward, fwd, params) -> ad.Tensor:
    weights = _interval_weights(group.plan, group.times)
    rows = [group.row(sp.pos, s) for sp in group.plan.samples
            for s in range(group.n_series)]
    w_row = np.array([weights[sp.interval] for sp in group.plan.samples
                      for _ in range(group.n_series)])
    codes = _rows(fwd["codes_all"], rows)
    vel = models.field_batch(codes, params)
    per_row = ad.tsum(ad.square(vel), axis=1)
    w = ad.constant(w_row.astype(per_row.values.dtype))
    return ad.tsum(ad.mul(per_row, w))


def _l2_image_penalty(group: _GroupForward, fwd, arch) -> ad.Tensor:
    weights = _interval_weights(group.plan, group.times)
    delta = group.plan.delta
    rows, rows_d, w_list = [], [], []
    for sp in group.plan.samples:
        for s in range(group.n_series):
            rows.append(group.row(sp.pos, s))
            rows_d.append(group.row(sp.pos_delta, s))
            w_list.append(weights[sp.interval])
    decoded_all = fwd["decoded_all"]
    now = _rows(decoded_all, rows)
    ahead = _rows(decoded_all, rows_d)
    diff = ad.mul(ad.sub(ahead, now), 1.0 / delta)
    per_row = ad.tsum(ad.square(diff), axis=1)
    w = ad.constant(np.asarray(w_list, dtype=per_row.values.dtype))
    return ad.tsum(ad.mul(per_row, w))


def _targets_for_group(group: _GroupForward, decoded_np: np.ndarray, arch,
                       bary_cfg: SinkhornConfig, warm_cache: dict | None) -> dict:
    """Barycentric targets from decoded trajectory endpoints (plain arrays)."""
    h, w = arch.image_height, arch.image_width
    targets = {}
    for s_pos, series_idx in enumerate(group.indices):
        endpoint_measures = {}

        def endpoint(j):
            if j not in endpoint_measures:
                row = group.row(group.plan.frame_pos[j], s_pos)
                endpoint_measures[j] = normalize(ImageGrid(decoded_np[row].reshape(h, w)))
            return endpoint_measures[j]

        for sp in group.plan.samples:
            key = (series_idx, sp.interval, round(sp.weight, 9))
            warm = warm_cache.get(key) if warm_cache is not None else None
            bar, info = barycenter_interp(endpoint(sp.interval), endpoint(sp.interval + 1),
                                          sp.weight, bary_cfg, warm_scalings=warm, log=True)
            if not info["converged"]:
                logger.warning("barycenter target %s not converged (err %.2e)", key, info["err"])
            if warm_cache is not None:
                warm_cache[key] = info["scalings"]
            targets[key] = bar.values.ravel()
    return targets


def compute_ot_targets(params, arch, dataset, cfg, warm_cache: dict | None = None) -> dict:
    """Barycentric targets from the current trajectory endpoint decodings.

    Targets are plain arrays (held constant during differentiation). A warm
    cache maps target keys to Bregman scalings from the previous step, which
    cuts the fixed-point iterations sharply once training stabilizes.
    """
    bary_cfg = cfg.ot_cfg or default_barycenter_config(arch.image_height, arch.image_width)
    targets = {}
    for group_indices in _group_by_times(dataset):
        group = _GroupForward(dataset, group_indices, arch, cfg)
        if group.n_frames < 2:
            continue
        fwd = group.run(params, cfg)  # no tape active here: plain forward pass
        decoded_np = fwd["decoded_all"].values.astype(np.float64)
        targets.update(_targets_for_group(group, decoded_np, arch, bary_cfg, warm_cache))
    return targets


def assemble_objective(params, arch, dataset, cfg: TrainConfig, targets: dict | None = None,
                       warm_cache: dict | None = None):
    """Total objective and its components, as tape tensors.

    Barycentric targets are stop-gradients: when `targets` is None they are
    computed from the current forward pass's decoded endpoints as plain
    arrays; an explicit dict (as in the gradient checks) is used verbatim so
    both finite-difference evaluations see the same frozen targets.
    """
    w = cfg.weights
    groups = [_GroupForward(dataset, idx, arch, cfg) for idx in _group_by_times(dataset)]
    dynamic = static = consistency = None
    reg_term = None
    n_terms = 0
    bary_cfg = cfg.ot_cfg or default_barycenter_config(arch.image_height, arch.image_width)

    def acc(a, b):
        return b if a is None else ad.add(a, b)

    for group in groups:
        fwd = group.run(params, cfg)
        dynamic = acc(dynamic, fwd["dynamic"])
        static = acc(static, fwd["static"])
        consistency = acc(consistency, fwd["consistency"])
        n_terms += fwd["n_terms"]
        if w.lam > 0 and cfg.reg != "none" and group.n_frames > 1:
            if cfg.reg == "ot":
                group_targets = targets
                if group_targets is None:
                    decoded_np = fwd["decoded_all"].values.astype(np.float64)
                    group_targets = _targets_for_group(group, decoded_np, arch,
                                                       bary_cfg, warm_cache)
                reg_term = acc(reg_term, _ot_penalty(group, fwd, params, group_targets, arch))
            elif cfg.reg == "l2-latent":
                reg_term = acc(reg_term, _l2_latent_penalty(group, fwd, params))
            elif cfg.reg == "l2-image":
                reg_term = acc(reg_term, _l2_image_penalty(group, fwd, arch))
        min_mass = float(fwd["decoded_all"].values.sum(axis=1).min())
        if min_mass <= MASS_FLOOR:
            raise ZeroMass(f"decoded frame mass {min_mass:.3e} fell below the floor")

    scale = 1.0 / n_terms
    dynamic = ad.mul(dynamic, scale)
    static = ad.mul(static, scale)
    consistency = ad.mul(consistency, scale)
    total = ad.add(dynamic, ad.add(ad.mul(static, w.gamma1), ad.mul(consistency, w.gamma2)))
    if reg_term is not None:
        total = ad.add(total, ad.mul(reg_term, w.lam))
    components = {
        "dynamic": float(dynamic.values),
        "static": float(static.values),
        "consistency": float(consistency.values),
        "regularizer": float(reg_term.values) if reg_term is not None else 0.0,
    }
    return total, components


# ---------------------------------------------------------------------------
# spec-level single-series operations


def data_loss(series: TimeSeries, params, arch, weights: LossWeights,
              substep: float = 0.1):
    """Mean data terms for one series, with gradients for all parameters."""
    cfg = TrainConfig(epochs=1, weights=LossWeights(weights.gamma1, weights.gamma2, 0.0),
                      reg="none", ode_substep=substep)
    ad.zero_grads(params.values())
    with ad.Tape() as tape:
        total, _ = assemble_objective(params, arch, [series], cfg, None)
        grads = ad.backward(tape, total, leaves=params.values())
    return float(total.values), dict(zip(params.keys(), grads))


def ot_regularizer(series: TimeSeries, params, arch, cfg: TrainConfig):
    """Temporal OT penalty for one series (targets recomputed, then frozen)."""
    targets = compute_ot_targets(params, arch, [series], cfg)
    local = TrainConfig(epochs=1, weights=LossWeights(0.0, 0.0, 1.0), reg="ot",
                        ot_cfg=cfg.ot_cfg, ode_substep=cfg.ode_substep,
                        intermediate_samples_per_interval=cfg.intermediate_samples_per_interval)
    ad.zero_grads(params.values())
    with ad.Tape() as tape:
        group = _GroupForward([series], [0], arch, local)
        fwd = group.run(params, local)
        penalty = _ot_penalty(group, fwd, params, targets, arch)
        grads = ad.backward(tape, penalty, leaves=params.values())
    return float(penalty.values), dict(zip(params.keys(), grads))


def l2_regularizers(series: TimeSeries, params, arch, kind: str, cfg: TrainConfig):
    """Latent- or image-velocity penalty for one series."""
    if kind not in ("l2-latent", "l2-image"):
        raise ValueError(f"kind must be l2-latent or l2-image, got {kind!r}")
    local = TrainConfig(epochs=1, weights=LossWeights(0.0, 0.0, 1.0), reg=kind,
                        ode_substep=cfg.ode_substep,
                        intermediate_samples_per_interval=cfg.intermediate_samples_per_interval)
    ad.zero_grads(params.values())
    with ad.Tape() as tape:
        group = _GroupForward([series], [0], arch, local)
        fwd = group.run(params, local)
        if kind == "l2-latent":
            penalty = _l2_latent_penalty(group, fwd, params)
        else:
            penalty = _l2_image_penalty(group, fwd, arch)
        grads = ad.backward(tape, penalty, leaves=params.values())
    return float(penalty.values), dict(zip(params.keys(), grads))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: dict
    history: list
    wall_seconds: float


def train(dataset, arch, cfg: TrainConfig, out_dir=None, init=None) -> TrainResult:
    """Full-batch Adam over the joint objective; deterministic given the seed."""
    if not dataset:
        raise ValueError("dataset is empty")
    params = init if init is not None else models.init_params(arch, cfg.seed)
    state = ad.adam_init(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                         eps_hat=cfg.eps_hat)
    warm_cache: dict = {}
    history = []
    t_start = time.perf_counter()
    for epoch in range(cfg.epochs):
        ad.zero_grads(params.values())
        with ad.Tape() as tape:
            total, components = assemble_objective(params, arch, dataset, cfg,
                                                   warm_cache=warm_cache)
            grads = ad.backward(tape, total, leaves=params.values())
        total_val = float(total.values)
        for name, value in [("total", total_val), *components.items()]:
            if not math.isfinite(value):
                raise NonFinite(f"{name} loss became non-finite at epoch {epoch}")
        recombined = (components["dynamic"] + cfg.weights.gamma1 * components["static"]
                      + cfg.weights.gamma2 * components["consistency"]
                      + cfg.weights.lam * components["regularizer"])
        if abs(recombined - total_val) > 1e-6 * max(1.0, abs(total_val)):
            raise NonFinite(f"loss decomposition drifted at epoch {epoch}: "
                            f"{recombined!r} vs {total_val!r}")
        ad.adam_step(params, dict(zip(params.keys(), grads)), state)
        history.append({"epoch": epoch, "total": total_val, **components})
    wall = time.perf_counter() - t_start

    result = TrainResult(params=params, history=history, wall_seconds=wall)
    if out_dir is not None:
        write_run_artifacts(result, dataset, cfg, out_dir)
    return result


def write_run_artifacts(result: TrainResult, dataset, cfg: TrainConfig, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ad.save_checkpoint(result.params, out_dir / "checkpoint.ckpt")
    with open(out_dir / "train_log.jsonl", "w") as fh:
        for entry in result.history:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    meta = {
        "loss_components": ["dynamic", "static", "consistency", "regularizer"],
        "regularizer_norms_squared": True,
        "regularizer": cfg.reg,
        "n_series": len(dataset),
        "frames_per_series": [len(s) for s in dataset],
        "dataset_mass_stats": mass_stats(dataset),
    }
    (out_dir / "run_meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    # wall time lives outside the deterministic artifacts
    (out_dir / "timing.json").write_text(
        json.dumps({"wall_seconds_total": result.wall_seconds,
                    "epochs": len(result.history)}) + "\n")
