"""Raster data model, dataset I/O, and synthetic layout generation.

A layout sample bundles three input rasters (macro occupancy, RUDY routing
demand, RUDY pin demand) with an optional congestion raster and a scalar
label.  Rasters travel as 2-D little-endian NPY files in a per-sample
directory; the synthetic generator plants a known congestion formula so
downstream models can be validated against ground truth.
"""

from __future__ import annotations

import ast
import hashlib
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

RASTER_NAMES = ("macro", "rudy", "rudy_pin")

_NPY_MAGIC = b"\x93NUMPY"


class GridFormatError(ValueError):
    """A grid file does not conform to the supported NPY subset."""


class DatasetError(ValueError):
    """A dataset directory is malformed or inconsistent."""


@dataclass(frozen=True, eq=False)
class Grid:
    """Dense H x W raster of finite reals, row-major, immutable.

    `scale` records the divisor applied when a loaded raster exceeded 1.0
    (1.0 means the values were stored as-is).
    """

    data: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"grid must be 2-D and non-empty, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("grid values must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the cells."""
        return self.data.reshape(-1)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Grid):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(
            np.array_equal(self.data, other.data)
        )


def save_grid(grid: Grid, path: str | Path) -> None:
    """Write a grid as a version-1.0 NPY file (little-endian float32, C order)."""
    arr = np.ascontiguousarray(grid.data.astype("<f4"))
    h, w = arr.shape
    header = "{'descr': '<f4', 'fortran_order': False, 'shape': (%d, %d), }" % (h, w)
    # Pad the header with spaces so the payload starts on a 64-byte boundary,
    # as the v1.0 format requires; the final header byte is a newline.
    base = len(_NPY_MAGIC) + 2 + 2
    pad = 64 - ((base + len(header) + 1) % 64)
    if pad == 64:
        pad = 0
    header_bytes = (header + " " * pad + "\n").encode("latin1")
    with open(path, "wb") as fh:
        fh.write(_NPY_MAGIC)
        fh.write(bytes([1, 0]))
        fh.write(len(header_bytes).to_bytes(2, "little"))
        fh.write(header_bytes)
        fh.write(arr.tobytes(order="C"))


def load_grid(path: str | Path) -> Grid:
    """Read a grid from the NPY subset: v1.0, '<f4' or '<f8', C order, 2-D.

    Values are widened to float64 and returned untouched; dataset-level
    loading decides whether to normalize.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 10 or raw[:6] != _NPY_MAGIC:
        raise GridFormatError(f"{path}: bad magic, not an NPY file")
    major, minor = raw[6], raw[7]
    if (major, minor) != (1, 0):
        raise GridFormatError(f"{path}: unsupported NPY version {major}.{minor}")
    hlen = int.from_bytes(raw[8:10], "little")
    if len(raw) < 10 + hlen:
        raise GridFormatError(f"{path}: truncated header")
    try:
        header = ast.literal_eval(raw[10 : 10 + hlen].decode("latin1").strip())
    except (ValueError, SyntaxError) as exc:
        raise GridFormatError(f"{path}: unparseable header") from exc
    descr = header.get("descr")
    if descr not in ("<f4", "<f8"):
        raise GridFormatError(f"{path}: unsupported dtype {descr!r} (want '<f4' or '<f8')")
    if header.get("fortran_order") is not False:
        raise GridFormatError(f"{path}: Fortran-ordered payloads are not supported")
    shape = header.get("shape")
    if not (isinstance(shape, tuple) and len(shape) == 2 and all(isinstance(s, int) and s > 0 for s in shape)):
        raise GridFormatError(f"{path}: shape must be 2-D and positive, got {shape!r}")
    itemsize = 4 if descr == "<f4" else 8
    need = shape[0] * shape[1] * itemsize
    payload = raw[10 + hlen :]
    if len(payload) < need:
        raise GridFormatError(
            f"{path}: truncated payload ({len(payload)} bytes, expected {need})"
        )
    arr = np.frombuffer(payload[:need], dtype=descr).reshape(shape)
    return Grid(arr.astype(np.float64))


def _normalized_on_load(grid: Grid) -> Grid:
    """Dataset normalization: divide by max if it exceeds 1, recording the divisor."""
    mx = float(grid.data.max())
    if mx > 1.0:
        return Grid(grid.data / mx, scale=mx)
    return Grid(grid.data, scale=1.0)


def topk_mean(values: np.ndarray, k: int) -> float:
    """Mean of the k largest entries; k larger than the input clamps to all."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    if flat.size == 0:
        raise ValueError("empty input")
    m = min(k, flat.size)
    if m == flat.size:
        return float(np.sort(flat).mean())
    part = np.partition(flat, flat.size - m)[flat.size - m :]
    return float(np.sort(part).mean())


def congestion_label(congestion: Grid, k: int = 20) -> float:
    """Scalar label: mean over the k most-congested cells."""
    return topk_mean(congestion.values, k)


@dataclass(frozen=True, eq=False)
class LayoutSample:
    """One layout: id, three input rasters, optional congestion + label.

    All rasters share one shape.  When both congestion and label are present
    the label must equal congestion_label(congestion, 20) within 1e-9.
    """

    id: str
    macro: Grid
    rudy: Grid
    rudy_pin: Grid
    congestion: Grid | None = None
    label: float | None = None

    def __post_init__(self):
        if not re.fullmatch(r"[A-Za-z0-9_\-]+", self.id):
            raise ValueError(f"sample id must be a safe path token, got {self.id!r}")
        shape = self.macro.data.shape
        for name in ("rudy", "rudy_pin", "congestion"):
            g = getattr(self, name)
            if g is not None and g.data.shape != shape:
                raise ValueError(
                    f"{self.id}: raster {name} shape {g.data.shape} != macro shape {shape}"
                )
        if self.label is not None and not math.isfinite(self.label):
            raise ValueError(f"{self.id}: label must be finite")
        if self.congestion is not None and self.label is not None:
            expect = congestion_label(self.congestion, 20)
            if abs(expect - self.label) > 1e-9:
                raise ValueError(
                    f"{self.id}: label {self.label!r} disagrees with congestion "
                    f"raster (top-20 mean {expect!r})"
                )

    @property
    def shape(self) -> tuple[int, int]:
        return self.macro.data.shape

    def grids(self) -> dict[str, Grid]:
        return {"macro": self.macro, "rudy": self.rudy, "rudy_pin": self.rudy_pin}


def pooled_context(sample: LayoutSample) -> np.ndarray:
    """57-dim raster summary: per input raster, (mean, std, max) plus a 4x4
    average-pooled downsample (16 block means, row-major)."""
    out = []
    for name in RASTER_NAMES:
        g = getattr(sample, name).data
        out.extend([float(g.mean()), float(g.std()), float(g.max())])
        out.extend(_block_means(g, 4, 4))
    vec = np.array(out, dtype=np.float64)
    assert vec.shape == (57,)
    return vec


def _block_means(arr: np.ndarray, rows: int, cols: int) -> list[float]:
    h, w = arr.shape
    if h < rows or w < cols:
        raise ValueError(f"raster {h}x{w} too small for {rows}x{cols} pooling")
    redges = [i * h // rows for i in range(rows + 1)]
    cedges = [j * w // cols for j in range(cols + 1)]
    means = []
    for i in range(rows):
        for j in range(cols):
            block = arr[redges[i] : redges[i + 1], cedges[j] : cedges[j + 1]]
            means.append(float(block.mean()))
    return means


# ---------------------------------------------------------------------------
# Synthetic generation


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the planted-congestion generator.

    congestion = clamp01(alpha * blur5(rudy) + beta * pin_cluster_density
                         - gamma * macro_boundary_mean + N(0, noise_sigma))
    where blur5 is a 5x5 box filter, pin_cluster_density counts pin cells in a
    radius-3 disk (normalized by disk area), and macro_boundary_mean is the
    scalar mean RUDY over cells within Chebyshev distance 2 of a macro edge.
    """

    n_samples: int
    height: int = 128
    width: int = 128
    n_macros: tuple[int, int] = (2, 5)
    n_pin_clusters: tuple[int, int] = (3, 7)
    alpha: float = 1.0
    beta: float = 2.0
    gamma: float = 0.5
    noise_sigma: float = 0.02
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_samples < 0:
            raise ValueError("n_samples must be >= 0")
        if self.height < 16 or self.width < 16:
            raise ValueError("height and width must be >= 16")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        for lo, hi in (self.n_macros, self.n_pin_clusters):
            if not (0 <= lo <= hi):
                raise ValueError("count ranges must satisfy 0 <= lo <= hi")


@dataclass(frozen=True)
class SynthInfo:
    """Ground-truth placement notes for one generated sample."""

    id: str
    pin_cluster_centers: tuple[tuple[int, int], ...]
    macro_rects: tuple[tuple[int, int, int, int], ...]  # (r0, c0, h, w)
    boundary_mean: float


_DISK3 = None


def _disk3_kernel() -> np.ndarray:
    global _DISK3
    if _DISK3 is None:
        r = 3
        yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
        _DISK3 = ((yy * yy + xx * xx) <= r * r).astype(np.float64)
    return _DISK3


def box_blur5(arr: np.ndarray) -> np.ndarray:
    """5x5 box filter with edge replication (the planted alpha term)."""
    return ndimage.uniform_filter(arr, size=5, mode="nearest")


def pin_cluster_density(pin_mask: np.ndarray) -> np.ndarray:
    """Fraction of cells within a radius-3 Euclidean disk that hold pins."""
    disk = _disk3_kernel()
    counts = ndimage.correlate(pin_mask.astype(np.float64), disk, mode="constant", cval=0.0)
    return counts / disk.sum()


def macro_boundary_band(macro: np.ndarray, dist: int = 2) -> np.ndarray:
    """Cells whose Chebyshev-(dist) neighborhood contains both macro and
    non-macro cells of the binarized (>0.5) raster; 0/1 float mask."""
    b = macro > 0.5
    size = 2 * dist + 1
    has_one = ndimage.maximum_filter(b.astype(np.uint8), size=size, mode="constant", cval=0)
    has_zero = ndimage.maximum_filter((~b).astype(np.uint8), size=size, mode="constant", cval=0)
    return (has_one & has_zero).astype(np.float64)


def macro_boundary_mean(macro: np.ndarray, rudy: np.ndarray, dist: int = 2) -> float:
    """Mean RUDY over the macro boundary band; 0.0 when there is no boundary."""
    band = macro_boundary_band(macro, dist) > 0
    if not band.any():
        return 0.0
    return float(rudy[band].mean())


def _quantize(arr: np.ndarray) -> Grid:
    # Round-trip through float32 so saved datasets reload bit-identically.
    return Grid(arr.astype(np.float32).astype(np.float64))


def _config_tag(cfg: SynthConfig) -> str:
    """Short fingerprint of every knob that shapes a sample.

    n_samples is excluded: sample i only depends on (rng_seed, i), so a
    longer run of the same config is a superset of a shorter one.
    """
    blob = repr((cfg.height, cfg.width, cfg.n_macros, cfg.n_pin_clusters,
                 cfg.alpha, cfg.beta, cfg.gamma, cfg.noise_sigma,
                 cfg.rng_seed)).encode()
    return hashlib.sha1(blob).hexdigest()[:8]


def _synth_one(cfg: SynthConfig, index: int) -> tuple[LayoutSample, SynthInfo]:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.rng_seed, index])))
    h, w = cfg.height, cfg.width

    macro = np.zeros((h, w), dtype=np.float64)
    rects = []
    n_m = int(rng.integers(cfg.n_macros[0], cfg.n_macros[1] + 1))
    for _ in range(n_m):
        mh = int(rng.integers(max(2, h // 10), max(3, h // 4) + 1))
        mw = int(rng.integers(max(2, w // 10), max(3, w // 4) + 1))
        r0 = int(rng.integers(0, h - mh + 1))
        c0 = int(rng.integers(0, w - mw + 1))
        macro[r0 : r0 + mh, c0 : c0 + mw] = 1.0
        rects.append((r0, c0, mh, mw))

    # Smooth routing-demand field: low base plus a few Gaussian blobs.
    yy, xx = np.mgrid[0:h, 0:w]
    rudy = np.full((h, w), float(rng.uniform(0.05, 0.2)))
    for _ in range(int(rng.integers(4, 9))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        sig = rng.uniform(min(h, w) / 16, min(h, w) / 6)
        amp = rng.uniform(0.3, 0.9)
        rudy += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig * sig))
    rudy = np.clip(rudy, 0.0, None)
    rudy = rudy / max(float(rudy.max()), 1e-9)

    pin_mask = np.zeros((h, w), dtype=np.float64)
    centers = []
    n_c = int(rng.integers(cfg.n_pin_clusters[0], cfg.n_pin_clusters[1] + 1))
    for _ in range(n_c):
        cy = int(rng.integers(4, h - 4))
        cx = int(rng.integers(4, w - 4))
        count = int(rng.integers(8, 25))
        spread = float(rng.uniform(1.5, 6.0))
        pts = rng.normal(loc=(cy, cx), scale=spread, size=(count, 2))
        rr = np.clip(np.rint(pts[:, 0]).astype(int), 0, h - 1)
        cc = np.clip(np.rint(pts[:, 1]).astype(int), 0, w - 1)
        pin_mask[rr, cc] = 1.0
        centers.append((cy, cx))

    bmean = macro_boundary_mean(macro, rudy, 2)
    field = (
        cfg.alpha * box_blur5(rudy)
        + cfg.beta * pin_cluster_density(pin_mask)
        - cfg.gamma * bmean
    )
    if cfg.noise_sigma > 0:
        field = field + rng.normal(0.0, cfg.noise_sigma, size=(h, w))
    congestion = np.clip(field, 0.0, 1.0)

    # config-tagged so samples from different synth configs never share an
    # id (feature-value caches key on the id)
    sid = f"s{_config_tag(cfg)}_{index:04d}"
    macro_g = _quantize(macro)
    rudy_g = _quantize(rudy)
    pin_g = _quantize(pin_mask)
    cong_g = _quantize(congestion)
    sample = LayoutSample(
        id=sid,
        macro=macro_g,
        rudy=rudy_g,
        rudy_pin=pin_g,
        congestion=cong_g,
        label=congestion_label(cong_g, 20),
    )
    info = SynthInfo(
        id=sid,
        pin_cluster_centers=tuple(centers),
        macro_rects=tuple(rects),
        boundary_mean=bmean,
    )
    return sample, info


def synth_dataset(cfg: SynthConfig) -> list[LayoutSample]:
    """Generate n_samples planted layouts; deterministic per (seed, index)."""
    return [s for s, _ in (_synth_one(cfg, i) for i in range(cfg.n_samples))]


def synth_dataset_detailed(cfg: SynthConfig) -> tuple[list[LayoutSample], list[SynthInfo]]:
    """Like synth_dataset but also returns the planted placement notes."""
    pairs = [_synth_one(cfg, i) for i in range(cfg.n_samples)]
    return [p[0] for p in pairs], [p[1] for p in pairs]


# ---------------------------------------------------------------------------
# Dataset directories: <root>/<sample_id>/{macro,rudy,rudy_pin,congestion}.npy
# plus an optional label.txt holding one decimal real.


def save_sample(sample: LayoutSample, root: str | Path) -> Path:
    d = Path(root) / sample.id
    d.mkdir(parents=True, exist_ok=True)
    for name, grid in sample.grids().items():
        save_grid(grid, d / f"{name}.npy")
    if sample.congestion is not None:
        save_grid(sample.congestion, d / "congestion.npy")
    if sample.label is not None:
        (d / "label.txt").write_text(repr(sample.label) + "\n")
    return d


def save_dataset(samples: list[LayoutSample], root: str | Path) -> None:
    for s in samples:
        save_sample(s, root)


def load_sample(sample_dir: str | Path) -> LayoutSample:
    d = Path(sample_dir)
    if not d.is_dir():
        raise DatasetError(f"{d}: not a directory")
    grids = {}
    for name in RASTER_NAMES:
        p = d / f"{name}.npy"
        if not p.is_file():
            raise DatasetError(f"{d}: missing raster {name}.npy")
        grids[name] = _normalized_on_load(load_grid(p))
    congestion = None
    cp = d / "congestion.npy"
    if cp.is_file():
        congestion = _normalized_on_load(load_grid(cp))
    label = None
    lp = d / "label.txt"
    if lp.is_file():
        text = lp.read_text().strip()
        try:
            label = float(text)
        except ValueError as exc:
            raise DatasetError(f"{lp}: label is not a decimal real: {text!r}") from exc
    return LayoutSample(id=d.name, congestion=congestion, label=label, **grids)


def load_dataset(root: str | Path) -> list[LayoutSample]:
    """Load every sample directory under root, sorted by id."""
    rootp = Path(root)
    if not rootp.is_dir():
        raise DatasetError(f"{root}: not a directory")
    dirs = sorted(p for p in rootp.iterdir() if p.is_dir())
    if not dirs:
        raise DatasetError(f"{root}: no sample directories")
    return [load_sample(d) for d in dirs]
