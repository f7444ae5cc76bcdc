"""Reflectivity and depth estimators: pixelwise baselines and TV-penalized ML."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage, optimize

from .model import C_M_PER_PS, AcquisitionConfig, ModelError, time_to_depth
from .solver import SolverError, minimize_tv

LOGMATCH_SUPPORT_SIGMAS = 6.0


class SaturationError(ModelError):
    """Every illumination produced a detection; the binomial estimate diverges."""


@dataclass
class PmlParams:
    beta_alpha: float = 10.0
    beta_z: float = 30000.0
    max_iters: int = 400
    rel_tol: float = 1e-7
    depth_grid_step: float = 10.0

    def __post_init__(self):
        if self.beta_alpha < 0 or self.beta_z < 0:
            raise ModelError("penalty weights must be nonnegative")
        if not self.rel_tol > 0:
            raise ModelError("rel_tol must be positive")
        if not self.depth_grid_step > 0:
            raise ModelError("depth_grid_step must be positive")


# ---------------------------------------------------------------- reflectivity

def reflectivity_cml_binomial(k, config: AcquisitionConfig):
    """Count-based estimate under the binomial detection model."""
    k = np.asarray(k, dtype=float)
    if np.any(k >= config.n_r):
        raise SaturationError("detections in every illumination period")
    if np.any(k < 0):
        raise ModelError("counts must be nonnegative")
    est = (np.log(config.n_r / (config.n_r - k)) - config.b_total) / config.eta_s
    out = np.maximum(est, 0.0)
    return float(out) if out.ndim == 0 else out


def _window_terms(n_sp, config):
    n_sp = np.asarray(n_sp, dtype=float)
    gain = n_sp * config.n_r * config.eta_s
    floor = n_sp * config.n_r * config.b_total * config.t_wind_over_t_r
    return gain, floor


def reflectivity_cml_window(k_max, n_sp, config: AcquisitionConfig):
    """Estimate from the best-window count, net of the expected in-window noise."""
    if np.any(np.asarray(n_sp) < 1):
        raise ModelError("n_sp must be at least 1")
    gain, floor = _window_terms(n_sp, config)
    out = np.maximum((np.asarray(k_max, dtype=float) - floor) / gain, 0.0)
    return float(out) if out.ndim == 0 else out


def reflectivity_nll(alpha, k_max, n_sp, config: AcquisitionConfig) -> float:
    """Window-count negative log-likelihood summed over pixels; inf off-domain."""
    gain, floor = _window_terms(n_sp, config)
    k = np.asarray(k_max, dtype=float)
    rate = gain * alpha + floor
    pos = k > 0
    if np.any(rate[pos] <= 0):
        return np.inf
    return float(np.sum(gain * alpha) - np.sum(k[pos] * np.log(rate[pos])))


def reflectivity_nll_grad(alpha, k_max, n_sp, config: AcquisitionConfig) -> np.ndarray:
    gain, floor = _window_terms(n_sp, config)
    k = np.asarray(k_max, dtype=float)
    rate = gain * alpha + floor
    with np.errstate(divide="ignore", invalid="ignore"):
        g = gain - np.where(k > 0, k * gain / rate, 0.0)
    return g


def reflectivity_pml(k_max, n_sp, config: AcquisitionConfig, params: PmlParams,
                     trace: list | None = None, exact_when_unpenalized: bool = True) -> np.ndarray:
    """TV-penalized ML reflectivity from best-window counts."""
    k = np.asarray(k_max, dtype=float)
    n = np.broadcast_to(np.asarray(n_sp, dtype=float), k.shape)
    if k.shape != n.shape or k.ndim != 2:
        raise ModelError("k_max and n_sp must be 2-D grids of equal shape")
    init = reflectivity_cml_window(k, n, config)
    init = np.asarray(init, dtype=float).reshape(k.shape)
    if params.beta_alpha == 0 and exact_when_unpenalized:
        return init
    gain, floor = _window_terms(n, config)
    # Positive counts with no noise floor put log(0) on the boundary; keep a
    # sliver of the feasible set away from it.
    lo = np.where((floor <= 0) & (k > 0), 1e-9 * k / gain, 0.0)
    init = np.maximum(init, lo)
    pos = k > 0
    curvature = 0.0
    if pos.any():
        rate = np.maximum(gain[pos] * init[pos] + floor[pos], 1e-150)
        curvature = float(np.max(k[pos] * (gain[pos] / rate) ** 2))
    step = 1.0 / max(curvature, 1e-12)
    try:
        res = minimize_tv(init, lambda a: reflectivity_nll(a, k, n, config),
                          lambda a: reflectivity_nll_grad(a, k, n, config),
                          params.beta_alpha, lo=lo, hi=np.inf, max_iters=params.max_iters,
                          rel_tol=params.rel_tol, step=step)
    except SolverError as exc:
        raise SolverError(f"reflectivity PML failed: {exc}", exc.trace) from exc
    if trace is not None:
        trace.extend(res.trace)
    return res.x


def reflectivity_cml_poisson(times, depth: float, config: AcquisitionConfig) -> float:
    """Root of the Poisson likelihood equation at a known depth.

    Only useful as a reference: the pipeline never knows the depth up front.
    """
    t = np.asarray(times, dtype=float)
    if t.size == 0:
        return 0.0
    shape = config.s_total * _pulse_density(t - 2.0 * depth / C_M_PER_PS, config.pulse_sigma)
    noise = config.b_total / config.t_r
    target = config.n_r * config.eta_s

    def score(a):
        return float(np.sum(config.eta * shape / (config.eta * a * shape + noise))) - target

    if noise == 0:
        return t.size / target
    if score(0.0) <= 0:
        return 0.0
    hi = 1.0
    while score(hi) > 0:
        hi *= 2.0
    return optimize.brentq(score, 0.0, hi, xtol=1e-14, rtol=1e-12)


# ----------------------------------------------------------------------- depth

def _pulse_density(u, sigma):
    return np.exp(-0.5 * (u / sigma) ** 2) / (sigma * np.sqrt(2.0 * np.pi))


def _logmatch_scores(times, pixel_of, n_pix, alpha, config, step):
    n_grid = int(np.ceil(config.t_r / step))
    half = int(np.ceil(LOGMATCH_SUPPORT_SIGMAS * config.pulse_sigma / step))
    noise = config.b_total / config.t_r
    ratio = config.eta * np.asarray(alpha, dtype=float) * config.s_total / noise
    offs = np.arange(-half, half + 1)
    centre = np.round(times / step).astype(np.int64)
    g = centre[:, None] + offs[None, :]
    u = times[:, None] - g * step
    h = np.log1p(ratio[pixel_of][:, None] * _pulse_density(u, config.pulse_sigma))
    ok = (g >= 0) & (g < n_grid)
    flat = pixel_of[:, None] * n_grid + g
    scores = np.bincount(flat[ok], weights=h[ok], minlength=n_pix * n_grid)
    return scores.reshape(n_pix, n_grid)


def logmatched_depths(times, offsets, alpha, config: AcquisitionConfig,
                      depth_grid_step: float = 10.0, batch: int = 1024) -> np.ndarray:
    """Log-matched filter depth for many detection lists at once.

    ``alpha`` gives the reflectivity assumed for each list. Lists without
    detections, or where the filter output is flat, yield NaN.
    """
    times = np.asarray(times, dtype=np.int64)
    offsets = np.asarray(offsets, dtype=np.int64)
    n = offsets.size - 1
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), (n,))
    counts = np.diff(offsets)
    out = np.full(n, np.nan)
    step = float(depth_grid_step)
    n_grid = int(np.ceil(config.t_r / step))
    if config.b_total == 0:
        has = counts > 0
        sums = np.add.reduceat(times.astype(float), offsets[:-1][has]) if has.any() else np.zeros(0)
        tau = np.clip(np.round(sums / counts[has] / step), 0, n_grid - 1) * step
        out[has] = time_to_depth(tau)
        return out
    # bound the (detections x kernel taps) work array of each batch
    budget = max(1, 4_000_000 // (2 * int(np.ceil(LOGMATCH_SUPPORT_SIGMAS * config.pulse_sigma / step)) + 1))
    s = 0
    while s < n:
        e = int(np.searchsorted(offsets, offsets[s] + budget, side="right")) - 1
        e = min(max(e, s + 1), s + batch, n)
        lo, hi = offsets[s], offsets[e]
        if hi == lo:
            s = e
            continue
        pix = np.repeat(np.arange(e - s), counts[s:e])
        scores = _logmatch_scores(times[lo:hi].astype(float), pix, e - s, alpha[s:e], config, step)
        best = np.argmax(scores, axis=1)
        flat = scores.max(axis=1) <= 0
        z = time_to_depth(best * step)
        z[flat] = np.nan
        out[s:e] = z
        s = e
    return out


def depth_ml_logmatched(times, config: AcquisitionConfig, depth_grid_step: float = 10.0,
                        alpha: float = 1.0):
    """Depth maximizing the log-matched filter output, or None without detections."""
    t = np.asarray(times, dtype=np.int64)
    if t.size == 0:
        return None
    z = logmatched_depths(t, np.array([0, t.size]), alpha, config, depth_grid_step)[0]
    return None if np.isnan(z) else float(z)


def depth_pixelwise_from_window(result, config: AcquisitionConfig | None = None) -> float:
    """Gaussian-pulse ML depth from the retained detections: their mean."""
    if not result.reliable:
        raise ModelError("pixel has no reliable cluster")
    return float(time_to_depth(np.mean(np.asarray(result.retained_times, dtype=float))))


def depth_curvature(config: AcquisitionConfig) -> float:
    """Second derivative of one detection's depth negative log-likelihood, per m^2."""
    return (2.0 / C_M_PER_PS) ** 2 / config.pulse_sigma ** 2


def _nearest_fill(values, known):
    if known.all():
        return values.copy()
    _, (ii, jj) = ndimage.distance_transform_edt(~known, return_indices=True)
    return values[ii, jj]


def depth_pml_from_stats(counts, mean_times, config: AcquisitionConfig, params: PmlParams,
                         trace: list | None = None, z_max: float | None = None) -> np.ndarray:
    """TV-penalized depth from per-pixel retained counts and mean times.

    Pixels with zero count carry no data and are filled by the TV penalty.
    """
    counts = np.asarray(counts, dtype=float)
    known = counts > 0
    if not known.any():
        raise ModelError("no reliable pixel to anchor the depth estimate")
    z_hi = np.nextafter(config.z_max if z_max is None else z_max, 0.0)
    centre = np.where(known, time_to_depth(np.where(known, mean_times, 0.0)), 0.0)
    centre = np.clip(centre, 0.0, z_hi)
    init = _nearest_fill(centre, known)
    if params.beta_z == 0:
        return init
    w = 0.5 * depth_curvature(config) * counts

    def value(z):
        return float(np.sum(w * (z - centre) ** 2))

    def gradient(z):
        return 2.0 * w * (z - centre)

    try:
        res = minimize_tv(init, value, gradient, params.beta_z, lo=0.0, hi=z_hi,
                          max_iters=params.max_iters, rel_tol=params.rel_tol,
                          step=1.0 / (2.0 * w.max()))
    except SolverError as exc:
        raise SolverError(f"depth PML failed: {exc}", exc.trace) from exc
    if trace is not None:
        trace.extend(res.trace)
    return res.x


def depth_pml(windows, config: AcquisitionConfig, params: PmlParams, trace: list | None = None):
    """TV-penalized depth from a grid of window results; unreliable pixels are inpainted."""
    counts = np.where(windows.reliable, windows.retained_counts, 0)
    return depth_pml_from_stats(counts.reshape(windows.shape), windows.retained_means().reshape(windows.shape),
                                config, params, trace)


def depth_nll(z, counts, mean_times, config):
    centre = time_to_depth(mean_times)
    return 0.5 * depth_curvature(config) * np.sum(np.asarray(counts) * (z - centre) ** 2)


# ------------------------------------------------------------------ pipelines

def baseline_pipeline(detections, depth_grid_step: float = 10.0):
    """Count-based reflectivity and log-matched-filter depth, no unmixing.

    Pixels whose filter gives no answer sit at half the unambiguous range.
    """
    cfg = detections.config
    counts = detections.counts
    alpha = reflectivity_cml_binomial(np.minimum(counts, cfg.n_r - 1), cfg)
    # a zero estimate would flatten the filter; assume at least one photon's worth
    filt_alpha = np.maximum(alpha, 1.0 / (cfg.n_r * cfg.eta_s))
    z = logmatched_depths(detections.times, detections.offsets, filt_alpha, cfg, depth_grid_step)
    z = np.where(np.isnan(z), 0.5 * cfg.z_max, z)
    shape = (detections.height, detections.width)
    return alpha.reshape(shape), z.reshape(shape)


def oracle_pipeline(detections, labels, params: PmlParams, trace: list | None = None):
    """Estimates from ground-truth signal detections only (the SBR = inf ceiling)."""
    if labels is None:
        raise ModelError("signal oracle needs per-detection labels")
    labels = np.asarray(labels)
    if labels.shape != detections.times.shape:
        raise ModelError("labels do not align with detections")
    cfg = replace(detections.config, b_total=0.0)
    keep = labels.astype(bool)
    pix = detections.pixel_ids()[keep]
    t = detections.times[keep].astype(float)
    n = detections.n_pixels
    m = np.bincount(pix, minlength=n).astype(float)
    sums = np.bincount(pix, weights=t, minlength=n)
    means = np.divide(sums, m, out=np.zeros(n), where=m > 0)
    shape = (detections.height, detections.width)
    alpha = reflectivity_pml(m.reshape(shape), np.ones(shape), cfg, params, trace)
    depth = depth_pml_from_stats(m.reshape(shape), means.reshape(shape), cfg, params, trace)
    return alpha, depth
