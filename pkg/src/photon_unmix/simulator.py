"""Detection simulator for the Poisson signal-plus-background model."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import rng as streams
from .model import (C_M_PER_PS, FLUX_LIMIT, AcquisitionConfig, DetectionSet, ModelError,
                    Scene, depth_to_time)
from .parallel import chunks, ordered_map

# One signal photon per this many pulses for a pixel of mean reflectivity.
PULSES_PER_SIGNAL_PHOTON = 500


@dataclass
class SimulationSpec:
    scene: Scene
    config: AcquisitionConfig
    target_signal_ppp: float = 2.0
    target_sbr: float = math.inf
    seed: int = 0

    def __post_init__(self):
        if not self.target_signal_ppp > 0:
            raise ModelError("target_signal_ppp must be positive")
        if not self.target_sbr > 0:
            raise ModelError("target_sbr must be positive")


def calibrate_rates(spec: SimulationSpec) -> AcquisitionConfig:
    """Fill in n_r, s_total and b_total from the ppp and SBR targets."""
    mean_alpha = float(spec.scene.alpha.mean())
    if not mean_alpha > 0:
        raise ModelError("scene reflectivity must have a positive mean")
    eta_s = 1.0 / (PULSES_PER_SIGNAL_PHOTON * mean_alpha)
    n_r = int(round(PULSES_PER_SIGNAL_PHOTON * spec.target_signal_ppp))
    if n_r < 1:
        raise ModelError("target ppp too small for a single illumination")
    signal_mean = n_r * eta_s * mean_alpha
    b_total = 0.0 if math.isinf(spec.target_sbr) else signal_mean / (n_r * spec.target_sbr)
    if not spec.config.eta > 0:
        raise ModelError("quantum efficiency must be positive to calibrate")
    config = replace(spec.config, n_r=n_r, s_total=eta_s / spec.config.eta, b_total=b_total)
    peak = config.per_period_rate(spec.scene.alpha.max())
    if peak > FLUX_LIMIT:
        raise ModelError(f"per-period detection rate {peak:.4f} exceeds {FLUX_LIMIT}")
    return config


def _pixel_detections(gen, alpha, delay, config):
    m = gen.poisson(config.n_r * config.eta_s * alpha) if alpha > 0 else 0
    sig = gen.normal(delay, config.pulse_sigma, m)
    bad = (sig < 0) | (sig >= config.t_r)
    while bad.any():
        sig[bad] = gen.normal(delay, config.pulse_sigma, int(bad.sum()))
        bad = (sig < 0) | (sig >= config.t_r)
    n = gen.poisson(config.n_r * config.b_total) if config.b_total > 0 else 0
    bkg = gen.integers(0, int(config.t_r), n)
    times = np.concatenate([np.floor(sig).astype(np.int64), bkg.astype(np.int64)])
    labels = np.concatenate([np.ones(m, np.uint8), np.zeros(n, np.uint8)])
    order = np.argsort(times, kind="stable")
    return times[order], labels[order]


def simulate_detections(scene: Scene, config: AcquisitionConfig, seed: int, threads: int = 1,
                        with_labels: bool = False):
    """Draw detections for every pixel from its own counter-based stream.

    Returns a DetectionSet, or ``(DetectionSet, labels)`` when ``with_labels``
    is set; labels are 1 for signal and 0 for background, aligned with times.
    """
    scene.check_range(config)
    h, w = scene.alpha.shape
    delays = depth_to_time(scene.depth)

    def run(rows):
        out = []
        for i in range(*rows):
            for j in range(w):
                gen = streams.stream(seed, i, j, streams.SIMULATION)
                out.append(_pixel_detections(gen, scene.alpha[i, j], delays[i, j], config))
        return out

    blocks = ordered_map(run, chunks(h, max(threads, 1) * 4), threads)
    pixels = [px for block in blocks for px in block]
    counts = np.array([t.size for t, _ in pixels], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    times = np.concatenate([t for t, _ in pixels]) if pixels else np.zeros(0, np.int64)
    det = DetectionSet(w, h, offsets, times, config)
    if with_labels:
        labels = np.concatenate([lab for _, lab in pixels]) if pixels else np.zeros(0, np.uint8)
        return det, labels
    return det


def simulate(spec: SimulationSpec, threads: int = 1, with_labels: bool = False):
    config = calibrate_rates(spec)
    return simulate_detections(spec.scene, config, spec.seed, threads, with_labels)


def piecewise_scene(height: int = 128, width: int = 128, z_max: float = 14.5) -> Scene:
    """Synthetic scene of flat patches, one slanted plane and sharp edges.

    Depths sit between 4.5 m and 6 m. Neighbouring objects differ in depth
    by 0.5 m to 1.5 m, many pulse widths apart, and in reflectivity by at
    least 0.15.
    """
    yy, xx = np.mgrid[0:height, 0:width]
    u, v = xx / width, yy / height
    alpha = np.full((height, width), 0.35)
    depth = np.full((height, width), 6.0)

    floor = v >= 0.75
    alpha[floor] = 0.5
    depth[floor] = 5.5 - 0.5 * (v[floor] - 0.75) / 0.25

    box = (u >= 0.1) & (u < 0.45) & (v >= 0.12) & (v < 0.6)
    alpha[box] = 0.9
    depth[box] = 5.0

    disc = (u - 0.7) ** 2 + (v - 0.35) ** 2 < 0.18 ** 2
    alpha[disc] = 0.15
    depth[disc] = 5.5

    inner = (u >= 0.62) & (u < 0.78) & (v >= 0.28) & (v < 0.42)
    alpha[inner] = 0.6
    depth[inner] = 5.0

    bar = (u >= 0.5) & (u < 0.56) & (v >= 0.05) & (v < 0.7)
    alpha[bar] = 1.0
    depth[bar] = 4.5
    return Scene(alpha, depth, z_max)


def constant_scene(height: int, width: int, alpha: float, depth: float, z_max: float = 14.5) -> Scene:
    return Scene(np.full((height, width), float(alpha)), np.full((height, width), float(depth)), z_max)


def scene_z_max(config: AcquisitionConfig, margin: float = 0.97) -> float:
    return margin * 0.5 * C_M_PER_PS * config.t_r
