"""Domain types and the detection-process probability model.

Times are picoseconds throughout, depths are meters. Per-pixel detection
lists are stored in compressed form: one flat sorted ``times`` array plus
an ``offsets`` array of length ``n_pixels + 1`` (row-major pixel order).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import special, stats

# Speed of light in meters per picosecond.
C_M_PER_PS = 299_792_458.0e-12

POISSON_TAIL = 1e-12
NCL_RATE_STEP = 0.1
FLUX_LIMIT = 0.1
FLUX_WARN = 0.05


class ModelError(ValueError):
    """Invalid model parameters or data."""


def time_to_depth(t_ps):
    return 0.5 * C_M_PER_PS * np.asarray(t_ps, dtype=float)


def depth_to_time(z_m):
    return 2.0 * np.asarray(z_m, dtype=float) / C_M_PER_PS


@dataclass(frozen=True)
class AcquisitionConfig:
    """Timing and rate constants of one acquisition.

    ``s_total`` and ``b_total`` are per repetition period; the mean number of
    signal detections per pulse at unit reflectivity is ``eta * s_total``.
    """

    t_r: float = 100_000.0
    t_p: float = 270.0
    pulse_sigma: float | None = None
    t_wind: float | None = None
    n_r: int = 1000
    eta: float = 0.35
    s_total: float = 0.002 / 0.35
    b_total: float = 0.0

    def __post_init__(self):
        if self.pulse_sigma is None:
            object.__setattr__(self, "pulse_sigma", self.t_p / 2.0)
        if self.t_wind is None:
            object.__setattr__(self, "t_wind", 2.0 * self.t_p)
        if not (self.t_r > 0 and self.t_p > 0 and self.pulse_sigma > 0):
            raise ModelError("t_r, t_p and pulse_sigma must be positive")
        if not self.t_wind > self.t_p:
            raise ModelError(f"t_wind={self.t_wind} must exceed t_p={self.t_p}")
        if not self.t_wind < self.t_r / 10.0:
            raise ModelError(f"t_wind={self.t_wind} must be below t_r/10")
        if int(self.n_r) != self.n_r or self.n_r < 1:
            raise ModelError("n_r must be a positive integer")
        object.__setattr__(self, "n_r", int(self.n_r))
        if not 0.0 <= self.eta < 1.0:
            raise ModelError("eta must lie in [0, 1)")
        if not self.s_total > 0:
            raise ModelError("s_total must be positive")
        if not self.b_total >= 0:
            raise ModelError("b_total must be nonnegative")

    @property
    def eta_s(self) -> float:
        return self.eta * self.s_total

    @property
    def t_wind_over_t_r(self) -> float:
        return self.t_wind / self.t_r

    @property
    def z_max(self) -> float:
        """Largest unambiguous depth."""
        return 0.5 * C_M_PER_PS * self.t_r

    def per_period_rate(self, alpha) -> np.ndarray:
        return self.eta_s * np.asarray(alpha, dtype=float) + self.b_total

    def check_flux(self, alpha_max: float) -> float:
        """Raise if the brightest pixel leaves the low-flux regime."""
        rate = float(self.per_period_rate(alpha_max))
        if rate >= FLUX_LIMIT:
            raise ModelError(
                f"per-period detection rate {rate:.4f} violates the low-flux limit {FLUX_LIMIT}"
            )
        if rate > FLUX_WARN:
            warnings.warn(f"per-period detection rate {rate:.4f} exceeds {FLUX_WARN}", stacklevel=2)
        return rate


@dataclass
class Scene:
    alpha: np.ndarray
    depth: np.ndarray
    z_max: float = 14.5

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.depth = np.asarray(self.depth, dtype=float)
        if self.alpha.ndim != 2 or self.alpha.shape != self.depth.shape:
            raise ModelError("alpha and depth must be 2-D images of equal shape")
        if not np.all(np.isfinite(self.alpha)) or np.any(self.alpha < 0):
            raise ModelError("reflectivity must be finite and nonnegative")
        if np.any(self.depth < 0) or np.any(self.depth >= self.z_max):
            raise ModelError(f"depths must lie in [0, {self.z_max})")

    @property
    def height(self) -> int:
        return self.alpha.shape[0]

    @property
    def width(self) -> int:
        return self.alpha.shape[1]

    def check_range(self, config: AcquisitionConfig) -> None:
        if not 2.0 * self.z_max / C_M_PER_PS < config.t_r:
            raise ModelError("z_max exceeds the unambiguous range of t_r")


@dataclass
class DetectionSet:
    """Folded detection times for every pixel of an image."""

    width: int
    height: int
    offsets: np.ndarray
    times: np.ndarray
    config: AcquisitionConfig = field(default_factory=AcquisitionConfig)

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.int64)
        self.times = np.asarray(self.times, dtype=np.int64)

    @classmethod
    def from_lists(cls, lists: Sequence[Iterable[int]], width: int, height: int,
                   config: AcquisitionConfig | None = None) -> "DetectionSet":
        arrays = [np.sort(np.asarray(list(x), dtype=np.int64)) for x in lists]
        if len(arrays) != width * height:
            raise ModelError("need one detection list per pixel")
        counts = np.array([a.size for a in arrays], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        times = np.concatenate(arrays) if arrays else np.zeros(0, np.int64)
        return cls(width, height, offsets, times, config or AcquisitionConfig())

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def count_image(self) -> np.ndarray:
        return self.counts.reshape(self.height, self.width)

    def pixel(self, i: int, j: int) -> np.ndarray:
        p = i * self.width + j
        return self.times[self.offsets[p]:self.offsets[p + 1]]

    def pixel_ids(self) -> np.ndarray:
        """Pixel index of every entry of ``times``."""
        return np.repeat(np.arange(self.n_pixels), self.counts)

    def validate(self) -> None:
        if self.offsets.shape != (self.n_pixels + 1,) or self.offsets[0] != 0:
            raise ModelError("offsets do not match image size")
        if self.offsets[-1] != self.times.size or np.any(np.diff(self.offsets) < 0):
            raise ModelError("offsets inconsistent with times")
        if self.times.size and (self.times.min() < 0 or self.times.max() >= self.config.t_r):
            raise ModelError("timestamps must lie in [0, t_r)")
        if np.any(self.counts > self.config.n_r):
            raise ModelError("a pixel has more detections than illuminations")
        if self.times.size > 1:
            d = np.diff(self.times)
            boundary = np.zeros(self.times.size - 1, dtype=bool)
            starts = self.offsets[1:-1]
            starts = starts[(starts > 0) & (starts < self.times.size)]
            boundary[starts - 1] = True
            if np.any((d < 0) & ~boundary):
                raise ModelError("per-pixel timestamps must be sorted")


def gaussian_pulse_logdensity(t_offset, pulse_sigma):
    """Log of the unnormalized Gaussian pulse shape."""
    if np.any(np.asarray(pulse_sigma) <= 0):
        raise ModelError("pulse_sigma must be positive")
    u = np.asarray(t_offset, dtype=float) / pulse_sigma
    return -0.5 * u * u


# Distribution helpers. The regularized incomplete beta function backs both
# the spacing law and the binomial CDF.

def beta_cdf(x, a, b):
    return special.betainc(a, b, x)


def binom_cdf(k, n, p):
    """P[Binomial(n, p) <= k] through I_{1-p}(n - k, k + 1)."""
    k = np.asarray(k)
    n = np.asarray(n)
    out = np.ones(np.broadcast(k, n).shape)
    inside = k < n
    if np.any(inside):
        kk = np.broadcast_to(k, out.shape)[inside]
        nn = np.broadcast_to(n, out.shape)[inside]
        out[inside] = special.betainc(nn - kk, kk + 1, 1.0 - p)
    out[np.broadcast_to(k, out.shape) < 0] = 0.0
    return out if out.ndim else float(out)


def count_law_distance(n_r: int, rate: float) -> float:
    """Total-variation distance between the binomial and Poisson count laws.

    Binomial(n_r, 1 - exp(-rate)) against Poisson(n_r * rate), where ``rate``
    is the per-period mean eta*alpha*S + B; summed exactly over k in [0, n_r].
    """
    if int(n_r) != n_r or n_r < 1:
        raise ModelError("n_r must be a positive integer")
    if rate < 0:
        raise ModelError("rate must be nonnegative")
    k = np.arange(int(n_r) + 1)
    binom = stats.binom.pmf(k, int(n_r), -math.expm1(-rate))
    poisson = stats.poisson.pmf(k, n_r * rate)
    return float(0.5 * np.sum(np.abs(binom - poisson)))


def _poisson_support_end(rate: float) -> int:
    return int(stats.poisson.isf(POISSON_TAIL, rate)) + 1


def noise_cluster_probability(n_cl: int, noise_rate: float, t_wind_over_t_r: float) -> float:
    """Probability that uniform background detections form a cluster.

    Uses the independence approximation over candidate windows together with
    the beta law of uniform spacings.
    """
    if int(n_cl) != n_cl or n_cl < 2:
        raise ModelError("a cluster needs at least two detections")
    if not 0.0 < t_wind_over_t_r < 1.0:
        raise ModelError("window ratio must lie in (0, 1)")
    if noise_rate < 0:
        raise ModelError("noise rate must be nonnegative")
    if noise_rate == 0:
        return 0.0
    n_hi = _poisson_support_end(noise_rate)
    if n_hi < n_cl:
        return 0.0
    n = np.arange(n_cl, n_hi + 1, dtype=float)
    span = beta_cdf(t_wind_over_t_r, n_cl - 1, n + 2 - n_cl)
    with np.errstate(divide="ignore"):
        none = np.exp((n - n_cl + 1) * np.log1p(-np.clip(span, 0.0, 1.0)))
    p = np.sum(stats.poisson.pmf(n, noise_rate) * (1.0 - none))
    return float(min(max(p, 0.0), 1.0))


def window_capture_probability(t_wind: float, pulse_sigma: float) -> float:
    """Chance that one signal detection lands in the centered window."""
    h = t_wind / (2.0 * pulse_sigma)
    return float(special.ndtr(h) - special.ndtr(-h))


def signal_cluster_probability(n_cl: int, signal_rate: float, t_wind: float,
                               pulse_sigma: float) -> float:
    """Lower bound on the chance of a signal cluster (centered window only)."""
    if int(n_cl) != n_cl or n_cl < 2:
        raise ModelError("a cluster needs at least two detections")
    if t_wind <= 0 or pulse_sigma <= 0:
        raise ModelError("t_wind and pulse_sigma must be positive")
    if signal_rate <= 0:
        return 0.0
    p_wind = window_capture_probability(t_wind, pulse_sigma)
    m_hi = _poisson_support_end(signal_rate)
    if m_hi < n_cl:
        return 0.0
    m = np.arange(n_cl, m_hi + 1)
    p = np.sum(stats.poisson.pmf(m, signal_rate) * (1.0 - binom_cdf(n_cl - 1, m, p_wind)))
    return float(min(max(p, 0.0), 1.0))


def _ncl_search_bound(noise_rate: float) -> int:
    return int(math.ceil(noise_rate + 20.0 * math.sqrt(noise_rate) + 2))


def min_cluster_size(noise_rate: float, tau_fa: float, t_wind_over_t_r: float) -> int:
    """Smallest cluster size whose noise-only probability is below ``tau_fa``."""
    if not 0.0 < tau_fa < 1.0:
        raise ModelError("tau_fa must lie in (0, 1)")
    lo, hi = 2, max(_ncl_search_bound(noise_rate), 2)
    if noise_cluster_probability(lo, noise_rate, t_wind_over_t_r) < tau_fa:
        return lo
    while noise_cluster_probability(hi, noise_rate, t_wind_over_t_r) >= tau_fa:
        hi *= 2
    # invariant: p(lo) >= tau, p(hi) < tau
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if noise_cluster_probability(mid, noise_rate, t_wind_over_t_r) < tau_fa:
            hi = mid
        else:
            lo = mid
    return hi


class NclTable:
    """Memoized minimum cluster size keyed on upward-quantized noise rate."""

    def __init__(self, tau_fa: float, t_wind_over_t_r: float, step: float = NCL_RATE_STEP):
        if not 0.0 < tau_fa < 1.0:
            raise ModelError("tau_fa must lie in (0, 1)")
        self.tau_fa = float(tau_fa)
        self.t_wind_over_t_r = float(t_wind_over_t_r)
        self.step = float(step)
        self.entries: dict[int, int] = {}

    @classmethod
    def for_config(cls, config: AcquisitionConfig, tau_fa: float) -> "NclTable":
        return cls(tau_fa, config.t_wind_over_t_r)

    def _bucket(self, noise_rate: float) -> int:
        if noise_rate < 0:
            raise ModelError("noise rate must be nonnegative")
        # the 1e-9 guard keeps exact grid points in their own bucket
        return int(math.ceil(noise_rate / self.step - 1e-9))

    def rate_of(self, bucket: int) -> float:
        return round(bucket * self.step, 10)

    def __call__(self, noise_rate: float) -> int:
        q = self._bucket(noise_rate)
        n = self.entries.get(q)
        if n is None:
            n = min_cluster_size(self.rate_of(q), self.tau_fa, self.t_wind_over_t_r)
            self.entries[q] = n
        return n

    def lookup(self, noise_rates) -> np.ndarray:
        rates = np.asarray(noise_rates, dtype=float)
        uniq, inv = np.unique(rates, return_inverse=True)
        vals = np.array([self(r) for r in uniq], dtype=np.int64)
        return vals[inv].reshape(rates.shape)

    def fill(self, noise_rates: Iterable[float]) -> "NclTable":
        for r in noise_rates:
            self(r)
        return self

    def items(self) -> list[tuple[float, int]]:
        return [(self.rate_of(q), self.entries[q]) for q in sorted(self.entries)]

    def to_csv(self) -> str:
        lines = [f"# tau_fa={self.tau_fa!r},t_wind_over_t_r={self.t_wind_over_t_r!r}",
                 "noise_rate,n_cl"]
        lines += [f"{r:.1f},{n}" for r, n in self.items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "NclTable":
        lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("#"):
            raise ModelError("missing NclTable header")
        meta = dict(kv.split("=", 1) for kv in lines[0][1:].strip().split(","))
        table = cls(float(meta["tau_fa"]), float(meta["t_wind_over_t_r"]))
        if lines[1] != "noise_rate,n_cl":
            raise ModelError("unexpected NclTable columns")
        for ln in lines[2:]:
            r, n = ln.split(",")
            table.entries[table._bucket(float(r))] = int(n)
        return table
