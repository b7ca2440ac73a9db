"""Image-similarity and rank-correlation metrics for congestion maps.

All functions accept 2-D numpy arrays (or objects with a ``.data`` array such
as Grid) where an image is expected, and 1-D sequences where a vector is
expected.  Nothing here mutates its inputs.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


class SsimMode(str, enum.Enum):
    GLOBAL = "global"
    WINDOWED = "windowed"


@dataclass(frozen=True)
class MetricConfig:
    """Similarity constants: c1=(0.01*L)^2, c2=(0.03*L)^2 with L=1 by default."""

    c1: float = 1e-4
    c2: float = 9e-4
    ssim_mode: SsimMode = SsimMode.WINDOWED
    window_size: int = 11
    window_sigma: float = 1.5
    peak_fractions: tuple[float, ...] = (0.005, 0.01, 0.02, 0.05)


DEFAULT_CONFIG = MetricConfig()


def _image(x) -> np.ndarray:
    arr = getattr(x, "data", x)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {arr.shape}")
    return arr


def _vector(x) -> np.ndarray:
    arr = getattr(x, "data", x)
    return np.asarray(arr, dtype=np.float64).reshape(-1)


def _pair(x, y, as_image: bool):
    a = _image(x) if as_image else _vector(x)
    b = _image(y) if as_image else _vector(y)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not np.isfinite(a).all() or not np.isfinite(b).all():
        raise ValueError("inputs must be finite")
    return a, b


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    t = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return k / k.sum()


def _windowed_moment(arr: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    half = (len(kernel) - 1) // 2
    out = ndimage.correlate1d(arr, kernel, axis=0, mode="constant", cval=0.0)
    out = ndimage.correlate1d(out, kernel, axis=1, mode="constant", cval=0.0)
    return out[half:-half, half:-half]


def ssim(x, y, cfg: MetricConfig = DEFAULT_CONFIG) -> float:
    """Structural similarity.

    GLOBAL mode applies the single-window formula to whole-image moments;
    WINDOWED mode averages the per-window formula over every complete
    window under a Gaussian weighting.
    """
    a, b = _pair(x, y, as_image=True)
    c1, c2 = cfg.c1, cfg.c2
    if cfg.ssim_mode == SsimMode.GLOBAL:
        if a.size < 4:
            raise ValueError("global similarity needs at least 4 cells")
        mx, my = a.mean(), b.mean()
        vx, vy = a.var(), b.var()
        cov = ((a - mx) * (b - my)).mean()
        return float(
            ((2 * mx * my + c1) * (2 * cov + c2))
            / ((mx * mx + my * my + c1) * (vx + vy + c2))
        )
    size = cfg.window_size
    if a.shape[0] < size or a.shape[1] < size:
        raise ValueError(f"image smaller than the {size}x{size} window")
    k = _gaussian_kernel(size, cfg.window_sigma)
    mx = _windowed_moment(a, k)
    my = _windowed_moment(b, k)
    mxx = _windowed_moment(a * a, k)
    myy = _windowed_moment(b * b, k)
    mxy = _windowed_moment(a * b, k)
    vx = mxx - mx * mx
    vy = myy - my * my
    cov = mxy - mx * my
    num = (2 * mx * my + c1) * (2 * cov + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float((num / den).mean())


def nrmse(x, y) -> float:
    """Root-mean-square error normalized by the reference range max(y)-min(y)."""
    a, b = _pair(x, y, as_image=False)
    if a.size == 0:
        raise ValueError("empty input")
    rng = float(b.max() - b.min())
    if rng == 0.0:
        raise ValueError("reference has zero range")
    return float(np.sqrt(((a - b) ** 2).mean()) / rng)


def _top_indices(v: np.ndarray, m: int) -> np.ndarray:
    # Largest m entries; ties resolved toward the lower index for determinism.
    order = np.argsort(-v, kind="stable")
    return order[:m]


def peak_nrmse(x, y, fraction: float) -> float:
    """NRMSE restricted to the union of the top-ceil(fraction*n) cells of x
    and of y, normalized by the reference range over that union."""
    a, b = _pair(x, y, as_image=False)
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    n = a.size
    if n == 0:
        raise ValueError("empty input")
    m = max(1, math.ceil(fraction * n))
    idx = np.union1d(_top_indices(a, m), _top_indices(b, m))
    sa, sb = a[idx], b[idx]
    rng = float(sb.max() - sb.min())
    if rng == 0.0:
        rng = float(b.max() - b.min())
    if rng == 0.0:
        raise ValueError("reference has zero range")
    return float(np.sqrt(((sa - sb) ** 2).mean()) / rng)


def peak_nrmse_avg(x, y, cfg: MetricConfig = DEFAULT_CONFIG) -> float:
    """Mean peak NRMSE over the configured peak fractions."""
    return float(np.mean([peak_nrmse(x, y, f) for f in cfg.peak_fractions]))


def plcc(x, y) -> float:
    """Pearson linear correlation coefficient."""
    a, b = _pair(x, y, as_image=False)
    if a.size < 2:
        raise ValueError("correlation needs at least 2 points")
    ac = a - a.mean()
    bc = b - b.mean()
    sa = float(np.sqrt((ac * ac).sum()))
    sb = float(np.sqrt((bc * bc).sum()))
    if sa == 0.0 or sb == 0.0:
        raise ValueError("constant input has no defined correlation")
    return float((ac * bc).sum() / (sa * sb))


def average_ranks(v) -> np.ndarray:
    """1-based ranks; tied values share the average of their positions."""
    arr = _vector(v)
    order = np.argsort(arr, kind="stable")
    ranks = np.empty(arr.size, dtype=np.float64)
    i = 0
    while i < arr.size:
        j = i
        while j + 1 < arr.size and arr[order[j + 1]] == arr[order[i]]:
            j += 1
        # positions i..j (0-based) share rank mean(i+1..j+1)
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def srcc(x, y) -> float:
    """Spearman rank correlation: Pearson correlation of average ranks."""
    a, b = _pair(x, y, as_image=False)
    return plcc(average_ranks(a), average_ranks(b))


def _merge_count(values: list[float]) -> int:
    """Count strict inversions (i < j with v[i] > v[j]) via mergesort."""
    n = len(values)
    if n < 2:
        return 0
    buf = values
    tmp = [0.0] * n
    inversions = 0
    width = 1
    while width < n:
        for lo in range(0, n, 2 * width):
            mid = min(lo + width, n)
            hi = min(lo + 2 * width, n)
            i, j, k = lo, mid, lo
            while i < mid and j < hi:
                if buf[i] <= buf[j]:
                    tmp[k] = buf[i]
                    i += 1
                else:
                    inversions += mid - i
                    tmp[k] = buf[j]
                    j += 1
                k += 1
            while i < mid:
                tmp[k] = buf[i]
                i += 1
                k += 1
            while j < hi:
                tmp[k] = buf[j]
                j += 1
                k += 1
        buf, tmp = tmp, buf
        width *= 2
    return inversions


def _tie_pairs(sorted_vals: np.ndarray) -> int:
    total = 0
    i = 0
    n = sorted_vals.size
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        t = j - i + 1
        total += t * (t - 1) // 2
        i = j + 1
    return total


def krcc(x, y) -> float:
    """Kendall rank correlation, tau-a: (concordant - discordant) / C(n, 2).

    Pairs tied in either coordinate count as neither concordant nor
    discordant.  O(n log n) via inversion counting.
    """
    a, b = _pair(x, y, as_image=False)
    n = a.size
    if n < 2:
        raise ValueError("rank correlation needs at least 2 points")
    perm = np.lexsort((b, a))
    xs, ys = a[perm], b[perm]
    n0 = n * (n - 1) // 2
    ties_x = _tie_pairs(xs)
    ties_y = _tie_pairs(np.sort(b, kind="stable"))
    # pairs tied in both coordinates: runs are adjacent after the (x, y) sort
    ties_xy = 0
    i = 0
    while i < n:
        j = i
        while j + 1 < n and xs[j + 1] == xs[i] and ys[j + 1] == ys[i]:
            j += 1
        t = j - i + 1
        ties_xy += t * (t - 1) // 2
        i = j + 1
    swaps = _merge_count(list(ys))
    concordant_minus_discordant = n0 - ties_x - ties_y + ties_xy - 2 * swaps
    return float(concordant_minus_discordant / n0)


def krcc_brute_force(x, y) -> float:
    """O(n^2) sign-counting reference; kept for oracle-style cross checks."""
    a, b = _pair(x, y, as_image=False)
    n = a.size
    if n < 2:
        raise ValueError("rank correlation needs at least 2 points")
    concordant = discordant = 0
    for i in range(n):
        for j in range(i + 1, n):
            sx = np.sign(a[i] - a[j])
            sy = np.sign(b[i] - b[j])
            prod = sx * sy
            if prod > 0:
                concordant += 1
            elif prod < 0:
                discordant += 1
    return float((concordant - discordant) / (n * (n - 1) // 2))
