"""Signal/background unmixing by adaptive windowing and superpixel borrowing."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import rng as streams
from .estimation import PmlParams, reflectivity_pml
from .model import AcquisitionConfig, DetectionSet, ModelError, NclTable

TIE_BREAKS = ("random", "earliest")


@dataclass
class UnmixParams:
    tau_fa: float = 0.01
    tau_sp: float = 0.05
    d_sp_max: int = 3
    tie_break: str = "random"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.tau_fa < 1.0:
            raise ModelError("tau_fa must lie in (0, 1)")
        if not self.tau_sp > 0:
            raise ModelError("tau_sp must be positive")
        if int(self.d_sp_max) != self.d_sp_max or self.d_sp_max < 0:
            raise ModelError("d_sp_max must be a nonnegative integer")
        if self.tie_break not in TIE_BREAKS:
            raise ModelError(f"tie_break must be one of {TIE_BREAKS}")


class Window(NamedTuple):
    k_max: int
    start: int | None
    anchor: int  # index of the first detection in the window, -1 if none


@dataclass
class WindowResult:
    k_max: int
    window_start: int | None
    retained: np.ndarray
    n_sp: int
    reliable: bool
    retained_times: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))


def find_best_window(times, t_wind: float, tie_break: str = "random",
                     rng: np.random.Generator | None = None) -> Window:
    """Most populated window [t, t + t_wind) anchored at a detection.

    Two-pointer sweep over sorted times, O(k).
    """
    t = np.asarray(times)
    n = t.size
    if n == 0:
        return Window(0, None, -1)
    best, anchors = 0, []
    j = 0
    for i in range(n):
        end = t[i] + t_wind
        while j < n and t[j] < end:
            j += 1
        occ = j - i
        if occ > best:
            best, anchors = occ, [i]
        elif occ == best:
            anchors.append(i)
    if tie_break == "earliest" or len(anchors) == 1:
        a = anchors[0]
    else:
        rng = rng if rng is not None else np.random.default_rng()
        a = anchors[int(rng.integers(len(anchors)))]
    return Window(best, int(t[a]), a)


def scan_windows(times, offsets, t_wind: float, t_r: float, tie_uniform=None):
    """Best window of every detection list in compressed form.

    ``tie_uniform`` holds one U[0, 1) draw per list for random tie breaking;
    without it the earliest anchor wins. Returns ``(k_max, anchor)`` where
    ``anchor`` is a global index into ``times`` (-1 for empty lists).
    """
    times = np.asarray(times, dtype=np.int64)
    offsets = np.asarray(offsets, dtype=np.int64)
    n = offsets.size - 1
    counts = np.diff(offsets)
    k_max = np.zeros(n, dtype=np.int64)
    anchor = np.full(n, -1, dtype=np.int64)
    if times.size == 0:
        return k_max, anchor
    tw = int(np.ceil(t_wind))
    stride = int(t_r) + tw + 1
    owner = np.repeat(np.arange(n, dtype=np.int64), counts)
    key = owner * stride + times
    # integer times: t' < t + t_wind  <=>  t' < t + ceil(t_wind)
    end = np.searchsorted(key, key + tw, side="left")
    occ = end - np.arange(times.size)
    has = counts > 0
    k_max[has] = np.maximum.reduceat(occ, offsets[:-1][has])
    tied = np.flatnonzero(occ == k_max[owner])
    tied_owner = owner[tied]
    n_tied = np.bincount(tied_owner, minlength=n)
    first = np.concatenate([[0], np.cumsum(n_tied)[:-1]])
    pick = np.zeros(n, dtype=np.int64)
    if tie_uniform is not None:
        u = np.asarray(tie_uniform, dtype=float)
        pick = np.minimum((u * n_tied).astype(np.int64), np.maximum(n_tied - 1, 0))
    anchor[has] = tied[first[has] + pick[has]]
    return k_max, anchor


def censor_pixel(times, n_sp: int, params: UnmixParams, ncl_table: NclTable,
                 config: AcquisitionConfig, rng: np.random.Generator | None = None) -> WindowResult:
    """Window one (possibly augmented) detection list and apply the N_cl rule."""
    t = np.asarray(times, dtype=np.int64)
    win = find_best_window(t, config.t_wind, params.tie_break, rng)
    n_cl = ncl_table(n_sp * config.n_r * config.b_total)
    idx = np.arange(win.anchor, win.anchor + win.k_max) if win.k_max else np.zeros(0, np.int64)
    return WindowResult(win.k_max, win.start, idx, int(n_sp), bool(win.k_max >= n_cl), t[idx])


def form_superpixel(center, alpha_pml, d_sp: int, tau_sp: float) -> list[tuple[int, int]]:
    """Pixels within Chebyshev distance d_sp whose reflectivity is within tau_sp."""
    a = np.asarray(alpha_pml)
    i, j = center
    h, w = a.shape
    i0, i1 = max(i - d_sp, 0), min(i + d_sp + 1, h)
    j0, j1 = max(j - d_sp, 0), min(j + d_sp + 1, w)
    patch = np.abs(a[i0:i1, j0:j1] - a[i, j]) <= tau_sp
    xs, ys = np.nonzero(patch)
    return [(int(x + i0), int(y + j0)) for x, y in zip(xs, ys)]


def superpixel_pairs(pixels, alpha_pml, d_sp: int, tau_sp: float):
    """(owner, member) pairs for the superpixels of many centre pixels.

    Pairs are grouped by owner, members in row-major order.
    """
    a = np.asarray(alpha_pml, dtype=float)
    h, w = a.shape
    pixels = np.asarray(pixels, dtype=np.int64)
    ci, cj = np.divmod(pixels, w)
    di, dj = np.mgrid[-d_sp:d_sp + 1, -d_sp:d_sp + 1]
    di, dj = di.ravel(), dj.ravel()
    xi = ci[:, None] + di[None, :]
    xj = cj[:, None] + dj[None, :]
    inside = (xi >= 0) & (xi < h) & (xj >= 0) & (xj < w)
    xi_c, xj_c = np.clip(xi, 0, h - 1), np.clip(xj, 0, w - 1)
    close = np.abs(a[xi_c, xj_c] - a[ci, cj][:, None]) <= tau_sp
    keep = inside & close
    owner = np.broadcast_to(np.arange(pixels.size)[:, None], keep.shape)[keep]
    member = (xi_c * w + xj_c)[keep]
    return owner, member


def aggregate_detections(members, detections: DetectionSet):
    """Merged, sorted detections of the member pixels and their number."""
    members = list(members)
    if not members:
        raise ModelError("a superpixel needs at least one member")
    parts = [detections.pixel(i, j) for i, j in members]
    return np.sort(np.concatenate(parts), kind="stable"), len(members)


def gather_lists(owner, member, n_owner: int, times, offsets):
    """Compressed union of member lists per owner, each sorted ascending."""
    counts = np.diff(offsets)
    sizes = counts[member]
    starts = offsets[member]
    total = int(sizes.sum())
    # index of each gathered entry = start of its member list + position within it
    rep = np.repeat(np.arange(member.size), sizes)
    within = np.arange(total) - np.repeat(np.cumsum(sizes) - sizes, sizes)
    gathered = times[starts[rep] + within]
    own = owner[rep]
    order = np.lexsort((gathered, own))
    out_counts = np.bincount(owner, weights=sizes, minlength=n_owner).astype(np.int64)
    out_offsets = np.concatenate([[0], np.cumsum(out_counts)])
    return gathered[order], out_offsets


@dataclass
class WindowGrid:
    """Per-pixel window results for a whole image."""

    shape: tuple
    k_max: np.ndarray
    n_sp: np.ndarray
    window_start: np.ndarray  # -1 where the list was empty
    reliable: np.ndarray
    level: np.ndarray  # superpixel radius of the last windowing pass
    retained_offsets: np.ndarray
    retained_times: np.ndarray

    @property
    def retained_counts(self) -> np.ndarray:
        return np.diff(self.retained_offsets)

    def retained_means(self) -> np.ndarray:
        counts = self.retained_counts
        sums = np.zeros(counts.size)
        has = counts > 0
        if has.any():
            sums[has] = np.add.reduceat(self.retained_times.astype(float), self.retained_offsets[:-1][has])
        return np.divide(sums, counts, out=np.zeros(counts.size), where=has)

    def result(self, i: int, j: int) -> WindowResult:
        p = i * self.shape[1] + j
        t = self.retained_times[self.retained_offsets[p]:self.retained_offsets[p + 1]]
        start = int(self.window_start[p])
        return WindowResult(int(self.k_max[p]), None if start < 0 else start,
                            np.arange(t.size), int(self.n_sp[p]), bool(self.reliable[p]), t)


@dataclass
class UnmixResult:
    windows: WindowGrid
    alpha: np.ndarray
    diagnostics: list = field(default_factory=list)
    config: AcquisitionConfig | None = None

    def diagnostics_csv(self) -> str:
        lines = ["iteration,d_sp,fraction_reliable,mean_n_sp,mean_k_max"]
        for d in self.diagnostics:
            lines.append(f"{d['iteration']},{d['d_sp']},{d['fraction_reliable']:.6f},"
                         f"{d['mean_n_sp']:.6f},{d['mean_k_max']:.6f}")
        return "\n".join(lines) + "\n"


# Optional post-filter applied to each pass's window results, e.g. for
# rank-ordered-mean censoring; signature f(grid_state, pixels) -> None.
PostFilter = Callable[[dict, np.ndarray], None]


def unmix_image(detections: DetectionSet, params: UnmixParams, ncl_table: NclTable | None = None,
                pml: PmlParams | None = None, post_filter: PostFilter | None = None,
                check: bool = False) -> UnmixResult:
    """Iterate windowing, reflectivity PML and superpixel growth.

    Pixels freeze the first pass their best window reaches the minimum
    cluster size. With ``check`` set, window containment and count
    conservation are asserted on every pass.
    """
    cfg = detections.config
    pml = pml or PmlParams()
    table = ncl_table or NclTable.for_config(cfg, params.tau_fa)
    h, w = detections.height, detections.width
    n = h * w
    k_max = np.zeros(n, dtype=np.int64)
    n_sp = np.ones(n, dtype=np.int64)
    start = np.full(n, -1, dtype=np.int64)
    reliable = np.zeros(n, dtype=bool)
    level = np.zeros(n, dtype=np.int64)
    ret_counts = np.zeros(n, dtype=np.int64)
    source = np.full(n, -1, dtype=np.int64)
    passes = []  # (pixels, anchors, times) of every windowing pass
    diagnostics = []
    alpha = None
    todo = np.arange(n)

    for d in range(int(params.d_sp_max) + 1):
        if d == 0:
            times, offsets = detections.times, detections.offsets
            sizes = np.ones(n, dtype=np.int64)
        else:
            owner, member = superpixel_pairs(todo, alpha, d, params.tau_sp)
            times, offsets = gather_lists(owner, member, todo.size, detections.times, detections.offsets)
            sizes = np.bincount(owner, minlength=todo.size)
            if check:
                want = np.bincount(owner, weights=detections.counts[member], minlength=todo.size)
                assert np.array_equal(np.diff(offsets), want.astype(np.int64))
        tie = None
        if params.tie_break == "random":
            tie = streams.stream(params.seed, d, 0, streams.TIE_BREAK).random(n)[todo]
        km, anc = scan_windows(times, offsets, cfg.t_wind, cfg.t_r, tie)
        n_cl = table.lookup(sizes * cfg.n_r * cfg.b_total)
        ok = (km >= n_cl) & (km > 0)
        if check:
            for idx in np.flatnonzero(km > 0)[:2000]:
                seg = times[anc[idx]:anc[idx] + km[idx]]
                assert seg[0] >= times[offsets[idx]] and seg[-1] < seg[0] + cfg.t_wind
                assert anc[idx] + km[idx] <= offsets[idx + 1]
        k_max[todo] = km
        n_sp[todo] = sizes
        start[todo] = np.where(anc >= 0, times[np.maximum(anc, 0)] if times.size else -1, -1)
        level[todo] = d
        reliable[todo] = ok
        ret_counts[todo] = km
        source[todo] = len(passes)
        passes.append((todo, anc, times))
        if post_filter is not None:
            post_filter({"k_max": k_max, "reliable": reliable, "n_sp": n_sp}, todo)

        alpha = reflectivity_pml(k_max.reshape(h, w), n_sp.reshape(h, w), cfg, pml)
        diagnostics.append({
            "iteration": d, "d_sp": d, "fraction_reliable": float(reliable.mean()),
            "mean_n_sp": float(n_sp.mean()), "mean_k_max": float(k_max.mean()),
        })
        todo = np.flatnonzero(~reliable)
        if todo.size == 0:
            break

    ret_offsets = np.concatenate([[0], np.cumsum(ret_counts)])
    ret_times = np.zeros(int(ret_counts.sum()), dtype=np.int64)
    for s, (pix, anc, times) in enumerate(passes):
        sel = source[pix] == s
        pix, anc = pix[sel], anc[sel]
        km = ret_counts[pix]
        if km.sum() == 0:
            continue
        rep = np.repeat(np.arange(pix.size), km)
        within = np.arange(rep.size) - np.repeat(np.cumsum(km) - km, km)
        ret_times[ret_offsets[pix][rep] + within] = times[anc[rep] + within]

    grid = WindowGrid((h, w), k_max, n_sp, start, reliable, level, ret_offsets, ret_times)
    return UnmixResult(grid, alpha, diagnostics, cfg)
