"""Entropic optimal transport between measures on a shared 2-D grid.

Everything runs in the log domain so that small regularization strengths on
squared-distance costs do not overflow. The squared-Euclidean ground cost
separates across grid axes, so the Gibbs kernel is only ever applied as a
pair of per-axis operations (O(HW(H+W)) per iteration); the dense
(HW x HW) kernel is never materialized.

Two kernel-application paths exist:

* an exact per-element logsumexp (`_lse_apply`), safe for arbitrarily small
  epsilon, used by `sinkhorn`;
* a shifted exp/matmul path (`_LinKernel`), much faster, used inside the
  barycenter fixed point where scalings stay bounded. Contributions below
  exp(-700) relative to the max are floored there, which is harmless after
  renormalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GridMismatch, NonFinite
from .grids import ImageGrid, NormalizedMeasure

_LOG_STAB = 1e-30  # additive floor before taking logs of measures
_LIN_FLOOR = 1e-300  # floor for the matmul kernel path


@dataclass(frozen=True)
class SinkhornConfig:
    """Solver knobs. `epsilon` is in squared-distance units.

    `anneal_from`, when set above `epsilon`, runs a warm-started geometric
    epsilon schedule (factor `anneal_factor` per stage) down to `epsilon`.
    """

    epsilon: float
    max_iters: int = 500
    convergence_tol: float = 1e-4
    debias: bool = True
    anneal_from: float | None = None
    anneal_factor: float = 0.5

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.convergence_tol > 0:
            raise ValueError(f"convergence_tol must be > 0, got {self.convergence_tol}")


@dataclass(frozen=True)
class DualPotentials:
    """Converged log-domain potentials in cost units, one value per pixel."""

    f: np.ndarray
    g: np.ndarray


@dataclass(frozen=True)
class TransportCost:
    value: float
    potentials: DualPotentials
    iterations_used: int
    converged: bool


@dataclass(frozen=True)
class GridCost:
    """Squared-Euclidean cost between pixel centers, spacing`^2`((i-k)^2+(j-l)^2).

    Only the per-axis squared-distance matrices are ever built.
    """

    height: int
    width: int
    spacing: float = 1.0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("grid dims must be >= 1")
        if not self.spacing > 0:
            raise ValueError("spacing must be > 0")

    def pixel_cost(self, p: tuple[int, int], q: tuple[int, int]) -> float:
        return self.spacing**2 * ((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2)

    def axis_sqdist(self, n: int) -> np.ndarray:
        idx = np.arange(n, dtype=np.float64)
        return self.spacing**2 * (idx[:, None] - idx[None, :]) ** 2

    @property
    def row_sqdist(self) -> np.ndarray:
        return self.axis_sqdist(self.height)

    @property
    def col_sqdist(self) -> np.ndarray:
        return self.axis_sqdist(self.width)


def ground_cost(height: int, width: int, spacing: float = 1.0) -> GridCost:
    return GridCost(height, width, spacing)


def default_sinkhorn_config(height: int, width: int, spacing: float = 1.0,
                            debias: bool = True) -> SinkhornConfig:
    # Heuristic regularization scale: keeps the kernel bandwidth around one
    # pixel on desk-scale grids. All values are overridable via config.
    eps = 0.05 * spacing**2 * max(height, width)
    return SinkhornConfig(epsilon=eps, max_iters=500, convergence_tol=1e-4, debias=debias)


def default_barycenter_config(height: int, width: int, spacing: float = 1.0) -> SinkhornConfig:
    eps = 0.05 * spacing**2 * max(height, width)
    return SinkhornConfig(epsilon=eps, max_iters=200, convergence_tol=1e-4, debias=False)


# ---------------------------------------------------------------------------
# kernel applications


def _lse(T: np.ndarray, axis: int) -> np.ndarray:
    m = T.max(axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.exp(T - m_safe).sum(axis=axis)) + np.squeeze(m_safe, axis=axis)
    return out


def _lse_apply(log_kr: np.ndarray, log_kc: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Exact log-domain kernel application: out[i,j] = lse_{k,l}(Kr[i,k]+Kc[j,l]+x[k,l])."""
    y = _lse(x[:, None, :] + log_kc[None, :, :], axis=2)  # (H, W): lse over source cols
    return _lse(log_kr[:, :, None] + y[None, :, :], axis=1)


class _LinKernel:
    """Shifted exp/matmul kernel application for bounded log inputs.

    Works on (H, W) arrays or batches (B, H, W); matmul broadcasts over the
    leading axis.
    """

    def __init__(self, row_sqdist: np.ndarray, col_sqdist: np.ndarray, eps: float):
        self.kr = np.exp(-row_sqdist / eps)
        self.kc = np.exp(-col_sqdist / eps)

    def apply(self, x: np.ndarray) -> np.ndarray:
        m = x.max()
        if not np.isfinite(m):
            m = 0.0
        y = self.kr @ np.exp(x - m) @ self.kc
        return np.log(np.maximum(y, _LIN_FLOOR)) + m


class _LogKernel:
    """Exact logsumexp kernel application; valid for arbitrarily small epsilon."""

    def __init__(self, row_sqdist: np.ndarray, col_sqdist: np.ndarray, eps: float):
        self.log_kr = -row_sqdist / eps
        self.log_kc = -col_sqdist / eps

    def apply(self, x: np.ndarray) -> np.ndarray:
        if x.ndim == 2:
            return _lse_apply(self.log_kr, self.log_kc, x)
        y = _lse(x[:, :, None, :] + self.log_kc[None, None, :, :], axis=3)
        return _lse(self.log_kr[None, :, :, None] + y[:, None, :, :], axis=2)


def _support_diameter(values: tuple[np.ndarray, ...]) -> float:
    """Diagonal extent (in pixels) of the union of the measures' effective supports."""
    rows, cols = [], []
    for v in values:
        mask = v >= 1e-6 * v.max()
        r, c = np.nonzero(mask)
        rows.extend((r.min(), r.max()))
        cols.extend((c.min(), c.max()))
    dr = max(rows) - min(rows)
    dc = max(cols) - min(cols)
    return math.hypot(dr, dc)


def _pick_bary_kernel(mu0, mu1, t, cfg, cost, kernel: str):
    """Fast exp/matmul kernels need the largest transport's log-weight to stay
    representable; "auto" falls back to exact logsumexp otherwise."""
    if kernel == "fast":
        return _LinKernel(cost.row_sqdist, cost.col_sqdist, cfg.epsilon)
    if kernel == "exact":
        return _LogKernel(cost.row_sqdist, cost.col_sqdist, cfg.epsilon)
    reach = max(t, 1.0 - t) * cost.spacing * _support_diameter((mu0.values, mu1.values))
    if reach**2 / cfg.epsilon <= 450.0:
        return _LinKernel(cost.row_sqdist, cost.col_sqdist, cfg.epsilon)
    return _LogKernel(cost.row_sqdist, cost.col_sqdist, cfg.epsilon)


# ---------------------------------------------------------------------------
# solver internals


def _check_pair(mu: NormalizedMeasure, nu: NormalizedMeasure) -> tuple[int, int]:
    if mu.shape != nu.shape:
        raise GridMismatch(f"measures live on different grids: {mu.shape} vs {nu.shape}")
    return mu.shape


def _resolve_cost(shape: tuple[int, int], cost: GridCost | None) -> GridCost:
    if cost is None:
        return GridCost(shape[0], shape[1], 1.0)
    if (cost.height, cost.width) != shape:
        raise GridMismatch(f"cost descriptor {cost.height}x{cost.width} does not match grid {shape}")
    return cost


def _eps_schedule(cfg: SinkhornConfig) -> list[float]:
    if cfg.anneal_from is None or cfg.anneal_from <= cfg.epsilon:
        return [cfg.epsilon]
    out = []
    e = float(cfg.anneal_from)
    while e > cfg.epsilon * (1.0 + 1e-12):
        out.append(e)
        e *= cfg.anneal_factor
    out.append(cfg.epsilon)
    return out


def _safe_log(a: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(a)


def _require_finite_potential(arr: np.ndarray, eps: float) -> None:
    # -inf entries are legitimate (zero-mass pixels); +inf / NaN are overflow.
    if np.isnan(arr).any() or np.isposinf(arr).any():
        raise NonFinite(f"potentials overflowed at epsilon={eps:g}; "
                        "epsilon is too small for the cost scale")


def _solve_pair(a: np.ndarray, b: np.ndarray, cfg: SinkhornConfig, cost: GridCost):
    """Log-domain Sinkhorn between weight grids a, b. Returns potentials and dual value."""
    drow, dcol = cost.row_sqdist, cost.col_sqdist
    loga, logb = _safe_log(a), _safe_log(b)
    total_iters = 0
    converged = False
    f = np.zeros_like(a)
    g = np.zeros_like(b)
    schedule = _eps_schedule(cfg)
    for eps in schedule:
        log_kr, log_kc = -drow / eps, -dcol / eps
        # warm start from the previous stage's potentials (cost units);
        # u is determined by v, so only v needs rescaling
        v = logb + g / eps
        u = loga
        lv = _lse_apply(log_kr, log_kc, v)
        converged = False
        for _ in range(cfg.max_iters):
            total_iters += 1
            u = loga - lv
            lu = _lse_apply(log_kr, log_kc, u)
            v = logb - lu
            lv = _lse_apply(log_kr, log_kc, v)
            # col marginal is exact after the v-update; check the row residual
            err = np.abs(np.exp(u + lv) - a).sum()
            if not np.isfinite(err):
                _require_finite_potential(u, eps)
                _require_finite_potential(v, eps)
                raise NonFinite(f"marginal residual became non-finite at epsilon={eps:g}")
            if err <= cfg.convergence_tol:
                converged = True
                break
        f = -eps * lv  # f = eps*(u_next - loga), finite everywhere
        g = -eps * lu
        _require_finite_potential(f, eps)
        _require_finite_potential(g, eps)
    value = float(np.sum(a * f) + np.sum(b * g))
    if not math.isfinite(value):
        raise NonFinite("transport value is non-finite")
    return f, g, value, total_iters, converged


def _solve_self(a: np.ndarray, cfg: SinkhornConfig, cost: GridCost):
    """Symmetric potential of the self term OT_eps(a, a).

    The alternating solver on (a, a) returns potentials (f, g) that differ
    from the symmetric solution only by opposite translations, so their mean
    recovers it exactly while converging at the pair solver's rate.
    """
    f, g, _, iters, converged = _solve_pair(a, a, cfg, cost)
    return 0.5 * (f + g), iters, converged


# ---------------------------------------------------------------------------
# public operations


def sinkhorn(mu: NormalizedMeasure, nu: NormalizedMeasure, cfg: SinkhornConfig,
             cost: GridCost | None = None) -> TransportCost:
    """Entropic OT value between two grid measures.

    With debias=False the value is the converged entropic transport cost;
    with debias=True it is the Sinkhorn divergence
    OT_eps(mu, nu) - (OT_eps(mu, mu) + OT_eps(nu, nu)) / 2, which vanishes at
    mu = nu and tracks the squared W2 distance as epsilon shrinks.
    """
    shape = _check_pair(mu, nu)
    cost = _resolve_cost(shape, cost)
    a, b = mu.values, nu.values
    f, g, value, iters, converged = _solve_pair(a, b, cfg, cost)
    if cfg.debias:
        pa, it_a, conv_a = _solve_self(a, cfg, cost)
        pb, it_b, conv_b = _solve_self(b, cfg, cost)
        iters += it_a + it_b
        converged = converged and conv_a and conv_b
        value = value - float(np.sum(a * pa)) - float(np.sum(b * pb))
        if value < 0.0:
            # nonnegative in exact arithmetic; clamp convergence-level noise
            value = 0.0
    return TransportCost(value=value, potentials=DualPotentials(f=f, g=g),
                         iterations_used=iters, converged=converged)


def sinkhorn_grad(mu: NormalizedMeasure, nu: NormalizedMeasure, cfg: SinkhornConfig,
                  cost: GridCost | None = None) -> np.ndarray:
    """Gradient grid of the transport value with respect to the source weights.

    Envelope relation at convergence: the gradient is the source potential f
    (minus the self-term potential when debiased), centered to sum to zero so
    it lies in the tangent space of the probability simplex.
    """
    shape = _check_pair(mu, nu)
    cost = _resolve_cost(shape, cost)
    a, b = mu.values, nu.values
    f, _, _, _, _ = _solve_pair(a, b, cfg, cost)
    grad = f
    if cfg.debias:
        pa, _, _ = _solve_self(a, cfg, cost)
        grad = f - pa
    return grad - grad.mean()


def barycenter_interp(mu0: NormalizedMeasure, mu1: NormalizedMeasure, t: float,
                      cfg: SinkhornConfig, cost: GridCost | None = None,
                      warm_scalings: np.ndarray | None = None, log: bool = False):
    """Entropic two-measure Wasserstein barycenter with weights (1-t, t).

    Iterative Bregman projections in the log domain; the two per-measure
    estimates of the barycenter agree at convergence, and their l1 gap is the
    reported residual. On non-convergence the result is still returned,
    flagged in the log dict (pass log=True to get it).

    `warm_scalings` accepts the `scalings` entry of a previous log dict for
    the same (grids, epsilon) to warm-start the fixed point.
    """
    shape = _check_pair(mu0, mu1)
    cost = _resolve_cost(shape, cost)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must be in [0, 1], got {t}")
    weights = (1.0 - t, t)
    kernel = _pick_bary_kernel(mu0, mu1, t, cfg, cost)
    log_a = np.stack([np.log(mu0.values + _LOG_STAB), np.log(mu1.values + _LOG_STAB)])
    if warm_scalings is not None and warm_scalings.shape == log_a.shape:
        scalings = warm_scalings.copy()
    else:
        scalings = np.zeros_like(log_a)
    log_bar = np.zeros(shape)
    err = np.inf
    converged = False
    iters = 0
    for _ in range(cfg.max_iters):
        iters += 1
        log_ku0 = kernel.apply(log_a[0] - kernel.apply(scalings[0]))
        log_ku1 = kernel.apply(log_a[1] - kernel.apply(scalings[1]))
        log_bar = weights[0] * log_ku0 + weights[1] * log_ku1
        est0 = np.exp(scalings[0] + log_ku0)
        est1 = np.exp(scalings[1] + log_ku1)
        err = float(np.abs(est0 - est1).sum())
        scalings[0] = log_bar - log_ku0
        scalings[1] = log_bar - log_ku1
        if err <= cfg.convergence_tol:
            converged = True
            break
    bar = np.exp(log_bar)
    total = bar.sum()
    if not np.isfinite(total) or total <= 0:
        raise NonFinite("barycenter mass collapsed; epsilon too small for the cost scale")
    measure = NormalizedMeasure(ImageGrid(bar / total))
    if log:
        return measure, {"converged": converged, "niter": iters, "err": err,
                         "scalings": scalings}
    return measure
