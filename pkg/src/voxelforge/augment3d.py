"""Random 3D augmentation: occlusion, affine resampling, Gaussian noise and
intensity windowing in a single per-voxel pass, plus a FIFO batch pipeline.

The affine map pulls back: output voxel ``x`` samples the input at
``A @ x + b``, with voxel centres at integer coordinates. ``b`` is chosen as
``c + d - A @ c`` so the volume centre ``c`` lands on ``c + d``.
"""
from __future__ import annotations

import json
import math
import queue
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .volgrid import LabelMap, Volume

__all__ = [
    "AugmentSpec",
    "TransformParams",
    "AugmentedPair",
    "PipelineError",
    "philox4x32",
    "normal_at",
    "generate_noise",
    "rotation_matrix",
    "sample_params",
    "item_rng",
    "apply",
    "window",
    "pipeline_run",
]

Range = tuple[float, float]

# Coordinates this close to a grid point are snapped onto it, so exact
# rotations by multiples of 90 degrees reproduce voxel values bit-for-bit.
SNAP_TOL = 1e-9
_CHUNK = 1 << 20


# --------------------------------------------------------------------------
# Counter-based normal generator

_PHILOX_M0 = np.uint64(0xD2511F53)
_PHILOX_M1 = np.uint64(0xCD9E8D57)
_PHILOX_W0 = 0x9E3779B9
_PHILOX_W1 = 0xBB67AE85
_MASK32 = np.uint64(0xFFFFFFFF)


def philox4x32(counter: Sequence[np.ndarray], key: tuple[int, int], rounds: int = 10):
    """Philox-4x32 block cipher applied elementwise.

    ``counter`` holds four uint32-valued arrays; returns four uint32 arrays.
    """
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) for c in counter)
    k0, k1 = int(key[0]) & 0xFFFFFFFF, int(key[1]) & 0xFFFFFFFF
    for _ in range(rounds):
        p0 = _PHILOX_M0 * c0
        p1 = _PHILOX_M1 * c2
        hi0, lo0 = p0 >> np.uint64(32), p0 & _MASK32
        hi1, lo1 = p1 >> np.uint64(32), p1 & _MASK32
        c0 = hi1 ^ c1 ^ np.uint64(k0)
        c1 = lo1
        c2 = hi0 ^ c3 ^ np.uint64(k1)
        c3 = lo0
        k0 = (k0 + _PHILOX_W0) & 0xFFFFFFFF
        k1 = (k1 + _PHILOX_W1) & 0xFFFFFFFF
    return tuple(c.astype(np.uint32) for c in (c0, c1, c2, c3))


def _unit53(hi: np.ndarray, lo: np.ndarray) -> np.ndarray:
    a = (hi >> np.uint32(5)).astype(np.float64)
    b = (lo >> np.uint32(6)).astype(np.float64)
    return (a * 67108864.0 + b) * (1.0 / 9007199254740992.0)


def normal_at(indices: np.ndarray, seed: int) -> np.ndarray:
    """Standard normal variate for each voxel index, keyed by ``seed``.

    One Philox block per index (counter = index, key = seed) feeds a
    Box-Muller transform, so the value at an index never depends on which
    other indices are generated or in what order.
    """
    idx = np.asarray(indices, dtype=np.uint64)
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    zero = np.zeros(idx.shape, np.uint64)
    x0, x1, x2, x3 = philox4x32(
        (idx & _MASK32, idx >> np.uint64(32), zero, zero), (seed & 0xFFFFFFFF, seed >> 32)
    )
    u1 = 1.0 - _unit53(x0, x1)
    u2 = _unit53(x2, x3)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)


def _chunked(n: int, n_threads: int, fn: Callable[[int, int], None]):
    bounds = [(s, min(s + _CHUNK, n)) for s in range(0, n, _CHUNK)]
    if n_threads <= 1 or len(bounds) == 1:
        for s, e in bounds:
            fn(s, e)
        return
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        list(pool.map(lambda se: fn(*se), bounds))


def generate_noise(dims: Sequence[int], sigma: float, seed: int, n_threads: int = 1) -> np.ndarray:
    """IID ``N(0, sigma**2)`` field of shape ``dims``.

    Voxel ``(x, y, z)`` uses counter ``x + nx*(y + ny*z)``; the result is
    identical for any ``n_threads``.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    dims = tuple(int(n) for n in dims)
    n = int(np.prod(dims))
    flat = np.zeros(n, np.float64)
    if sigma > 0:
        def work(s, e):
            flat[s:e] = sigma * normal_at(np.arange(s, e, dtype=np.uint64), seed)

        _chunked(n, n_threads, work)
    return flat.reshape(dims, order="F")


# --------------------------------------------------------------------------
# Parameters


def _pair(r) -> Range:
    lo, hi = (float(v) for v in r)
    if lo > hi:
        raise ValueError(f"range [{lo}, {hi}] is not ordered")
    return (lo, hi)


def _triple_ranges(r) -> tuple[Range, Range, Range]:
    r = list(r)
    if len(r) == 2 and not isinstance(r[0], (list, tuple)):
        return (_pair(r),) * 3
    if len(r) != 3:
        raise ValueError(f"expected one range or three per-axis ranges, got {r}")
    return tuple(_pair(x) for x in r)


@dataclass(frozen=True)
class AugmentSpec:
    """User ranges for augmentation parameters.

    Ranges are ``(lo, hi)`` pairs drawn uniformly. Per-axis fields accept a
    single pair, used independently for each axis. ``displacement_max`` and
    ``occlusion_max`` are in voxels, rotations in radians, window limits in
    the image's intensity units.
    """

    rotation_range: tuple[Range, Range, Range] = ((0.0, 0.0),) * 3
    scale_range: tuple[Range, Range, Range] = ((1.0, 1.0),) * 3
    shear_range: Range = (0.0, 0.0)
    reflect_prob: tuple[float, float, float] = (0.0, 0.0, 0.0)
    generic_range: Range = (0.0, 0.0)
    displacement_max: tuple[float, float, float] = (0.0, 0.0, 0.0)
    occlusion_max: float = 0.0
    noise_sigma_range: Range = (0.0, 0.0)
    window_low_range: Range = (0.0, 0.0)
    window_high_range: Range = (1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("rotation_range", _triple_ranges(self.rotation_range))
        set_("scale_range", _triple_ranges(self.scale_range))
        set_("shear_range", _pair(self.shear_range))
        set_("generic_range", _pair(self.generic_range))
        set_("noise_sigma_range", _pair(self.noise_sigma_range))
        set_("window_low_range", _pair(self.window_low_range))
        set_("window_high_range", _pair(self.window_high_range))
        probs = tuple(float(p) for p in self.reflect_prob)
        if len(probs) != 3 or not all(0.0 <= p <= 1.0 for p in probs):
            raise ValueError("reflect_prob needs three probabilities in [0, 1]")
        set_("reflect_prob", probs)
        dmax = tuple(float(d) for d in self.displacement_max)
        if len(dmax) != 3 or min(dmax) < 0:
            raise ValueError("displacement_max needs three non-negative values")
        set_("displacement_max", dmax)
        if self.occlusion_max < 0:
            raise ValueError("occlusion_max must be >= 0")
        if self.noise_sigma_range[0] < 0:
            raise ValueError("noise sigma must be >= 0")
        if self.window_low_range[0] >= self.window_high_range[1]:
            raise ValueError("window ranges admit no draw with a < b")
        if any(lo <= 0 <= hi for lo, hi in self.scale_range):
            raise ValueError("scale ranges must not contain 0")
        set_("seed", int(self.seed))

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentSpec":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown AugmentSpec fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "AugmentSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


@dataclass(frozen=True)
class TransformParams:
    """Fully resolved parameters for one augmentation."""

    A: np.ndarray
    b_offset: np.ndarray
    displacement: np.ndarray = field(default_factory=lambda: np.zeros(3))
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    occlusion_start: float = 0.0
    occlusion_height: float = 0.0
    noise_sigma: float = 0.0
    window: tuple[float, float] = (0.0, 1.0)
    noise_seed: int = 0

    def __post_init__(self):
        A = np.array(self.A, dtype=np.float64).reshape(3, 3)
        if abs(np.linalg.det(A)) < 1e-12:
            raise ValueError("affine matrix is singular")
        object.__setattr__(self, "A", A)
        for name in ("b_offset", "displacement", "center"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=np.float64).reshape(3))
        a, b = (float(v) for v in self.window)
        if not a < b:
            raise ValueError(f"window requires a < b, got ({a}, {b})")
        object.__setattr__(self, "window", (a, b))
        if self.occlusion_height < 0 or self.noise_sigma < 0:
            raise ValueError("occlusion height and noise sigma must be >= 0")

    @classmethod
    def identity(cls, window=(0.0, 1.0)) -> "TransformParams":
        return cls(np.eye(3), np.zeros(3), window=window)

    def to_dict(self) -> dict:
        return {
            "A": self.A.tolist(),
            "b_offset": self.b_offset.tolist(),
            "displacement": self.displacement.tolist(),
            "center": self.center.tolist(),
            "occlusion_start": float(self.occlusion_start),
            "occlusion_height": float(self.occlusion_height),
            "noise_sigma": float(self.noise_sigma),
            "window": list(self.window),
            "noise_seed": int(self.noise_seed),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransformParams":
        return cls(**{**d, "window": tuple(d["window"])})


@dataclass(frozen=True)
class AugmentedPair:
    image: Volume
    labels: LabelMap
    params: TransformParams


def rotation_matrix(axis: int, angle: float) -> np.ndarray:
    """Right-handed rotation about coordinate axis 0, 1 or 2."""
    c, s = math.cos(angle), math.sin(angle)
    i, j = [(1, 2), (2, 0), (0, 1)][axis]
    R = np.eye(3)
    R[i, i] = c
    R[i, j] = -s
    R[j, i] = s
    R[j, j] = c
    return R


def sample_params(spec: AugmentSpec, rng: np.random.Generator, dims: Sequence[int]) -> TransformParams:
    """Draw one TransformParams for a volume of shape ``dims``.

    ``A = reflect @ Rz @ Ry @ Rx @ shear @ scale @ generic``; draws that
    give a singular ``A`` or a window with ``a >= b`` are redrawn.
    """
    dims = np.asarray(dims, dtype=np.float64)
    u = lambda r: rng.uniform(r[0], r[1])  # noqa: E731
    for _ in range(1000):
        refl = np.diag([-1.0 if rng.uniform() < p else 1.0 for p in spec.reflect_prob])
        rx, ry, rz = (u(r) for r in spec.rotation_range)
        scale = np.diag([u(r) for r in spec.scale_range])
        shear = np.eye(3)
        shear[0, 1], shear[0, 2], shear[1, 2] = (u(spec.shear_range) for _ in range(3))
        generic = np.eye(3) + rng.uniform(spec.generic_range[0], spec.generic_range[1], (3, 3))
        A = (
            refl
            @ rotation_matrix(2, rz)
            @ rotation_matrix(1, ry)
            @ rotation_matrix(0, rx)
            @ shear
            @ scale
            @ generic
        )
        if abs(np.linalg.det(A)) >= 1e-12:
            break
    else:
        raise ValueError("could not draw a non-singular affine matrix")
    d = np.array([rng.uniform(-m, m) for m in spec.displacement_max])
    c = (dims - 1.0) / 2.0
    b = c + d - A @ c
    delta = u((0.0, spec.occlusion_max))
    z0 = u((-spec.occlusion_max, dims[2] - 1.0))
    sigma = u(spec.noise_sigma_range)
    while True:
        a_lim = u(spec.window_low_range)
        b_lim = u(spec.window_high_range)
        if a_lim < b_lim:
            break
    noise_seed = int(rng.integers(0, 2**63))
    return TransformParams(A, b, d, c, z0, delta, sigma, (a_lim, b_lim), noise_seed)


def item_rng(master_seed: int, index: int) -> np.random.Generator:
    """Independent generator for batch item ``index``."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed) & (2**63 - 1), int(index)]))


# --------------------------------------------------------------------------
# Per-voxel transform


def window(values: np.ndarray, a: float, b: float) -> np.ndarray:
    """Clamp to ``[a, b]`` and map affinely onto ``[0, 1]``."""
    return np.clip((values - a) / (b - a), 0.0, 1.0)


def _snap(q: np.ndarray) -> np.ndarray:
    r = np.rint(q)
    return np.where(np.abs(q - r) < SNAP_TOL, r, q)


def _trilinear(flat: np.ndarray, dims, q: np.ndarray) -> np.ndarray:
    """Sample ``flat`` (C-order ``dims`` array) at in-bounds points ``q``
    (shape ``(3, m)``)."""
    _, ny, nz = dims
    i0 = np.floor(q).astype(np.intp)
    t = q - i0
    # step to the upper neighbour is 0 on the last grid plane
    step = (i0 < np.array(dims)[:, None] - 1) * np.array([ny * nz, nz, 1])[:, None]
    base = (i0[0] * ny + i0[1]) * nz + i0[2]
    sx, sy, sz = step
    tx, ty, tz = t
    v000 = flat[base]
    v100 = flat[base + sx]
    v010 = flat[base + sy]
    v110 = flat[base + sx + sy]
    c00 = v000 + (v100 - v000) * tx
    c10 = v010 + (v110 - v010) * tx
    base = base + sz
    v001 = flat[base]
    v101 = flat[base + sx]
    v011 = flat[base + sy]
    v111 = flat[base + sx + sy]
    c01 = v001 + (v101 - v001) * tx
    c11 = v011 + (v111 - v011) * tx
    c0 = c00 + (c10 - c00) * ty
    c1 = c01 + (c11 - c01) * ty
    return c0 + (c1 - c0) * tz


def apply(
    image: Volume,
    labels: LabelMap | None,
    params: TransformParams,
    *,
    fill_value: float = 0.0,
    occlude_labels: bool = False,
    n_threads: int = 1,
) -> AugmentedPair:
    """Augment one image/label pair.

    Per output voxel: occluded voxels (``z0 <= z <= z0 + height`` with
    ``height > 0``) are 0 and nothing else is evaluated for them; otherwise
    the image is sampled trilinearly at ``A @ x + b`` (points outside the
    input get ``fill_value`` in the final [0, 1] scale), noise from the
    counter-based generator is added and the window applied. Labels follow
    the geometry only, by nearest neighbour, with 0 outside the input.
    """
    if labels is not None and labels.dims != image.dims:
        raise ValueError(f"image {image.dims} and labels {labels.dims} differ in shape")
    dims = image.dims
    nx, ny, nz = dims
    n = nx * ny * nz
    src = np.ascontiguousarray(image.data, dtype=np.float64).ravel()
    lab = None if labels is None else np.ascontiguousarray(labels.data).ravel()
    out_img = np.empty(n, np.float32)
    out_lab = np.zeros(n, np.uint8)
    A, b = params.A, params.b_offset
    z0, h = params.occlusion_start, params.occlusion_height
    a_lim, b_lim = params.window
    upper = np.array(dims, dtype=np.float64)[:, None] - 1.0

    def work(s, e):
        # C-order voxel ids s..e; noise is keyed by the x-fastest index
        ids = np.arange(s, e, dtype=np.int64)
        x, rem = np.divmod(ids, ny * nz)
        y, z = np.divmod(rem, nz)
        occluded = (z0 <= z) & (z <= z0 + h) if h > 0 else np.zeros(len(ids), bool)
        pts = np.stack([x, y, z]).astype(np.float64)
        q = _snap(A @ pts + b[:, None])
        inside = np.all((q >= 0.0) & (q <= upper), axis=0)
        if lab is not None:
            near = np.floor(q[:, inside] + 0.5).astype(np.intp)
            near = np.minimum(near, upper.astype(np.intp))
            got = np.zeros(len(ids), np.uint8)
            got[inside] = lab[(near[0] * ny + near[1]) * nz + near[2]]
            if occlude_labels:
                got[occluded] = 0
            out_lab[s:e] = got
        live = inside & ~occluded
        vals = np.full(len(ids), fill_value, np.float64)
        vals[occluded] = 0.0
        if live.any():
            v = _trilinear(src, dims, q[:, live])
            if params.noise_sigma > 0:
                xf = x[live] + nx * (y[live] + ny * z[live])
                v = v + params.noise_sigma * normal_at(xf.astype(np.uint64), params.noise_seed)
            vals[live] = window(v, a_lim, b_lim)
        out_img[s:e] = vals

    _chunked(n, n_threads, work)
    img = Volume(out_img.reshape(dims), image.spacing_mm)
    labs = LabelMap(out_lab.reshape(dims), image.spacing_mm)
    return AugmentedPair(img, labs, params)


# --------------------------------------------------------------------------
# FIFO pipeline


class PipelineError(RuntimeError):
    """An item failed inside :func:`pipeline_run`; ``index`` identifies it."""

    def __init__(self, index: int, cause: BaseException):
        super().__init__(f"item {index}: {type(cause).__name__}: {cause}")
        self.index = index
        self.cause = cause


_DONE = object()


def _acquire(item):
    if callable(item):
        item = item()
    image, labels = item
    # staging copy, the analogue of the host-to-device upload
    staged = Volume(np.ascontiguousarray(image.data, dtype=np.float32), image.spacing_mm)
    return staged, labels


def pipeline_run(
    batch: Iterable,
    spec: AugmentSpec,
    *,
    depth: int = 2,
    n_threads: int = 1,
    fill_value: float = 0.0,
    occlude_labels: bool = False,
    sink: Callable[[int, AugmentedPair], None] | None = None,
    start_index: int = 0,
) -> list[AugmentedPair]:
    """Augment a batch through a bounded in-order queue.

    Items are ``(Volume, LabelMap)`` pairs or zero-argument callables that
    return one (e.g. file loaders). Item ``i`` draws its parameters from
    ``item_rng(spec.seed, i)``, so results do not depend on ``depth``,
    timing or batch partitioning; ``start_index`` offsets ``i`` when a
    larger batch is fed in chunks. With ``depth >= 2`` acquisition, transform
    and emission (``sink``) of successive items run concurrently; ``depth=1``
    runs them back to back.
    """
    items = list(batch)
    if not items:
        raise ValueError("empty batch")
    if depth < 1:
        raise ValueError("depth must be >= 1")

    def transform(i, staged):
        image, labels = staged
        params = sample_params(spec, item_rng(spec.seed, start_index + i), image.dims)
        return apply(image, labels, params, fill_value=fill_value,
                     occlude_labels=occlude_labels, n_threads=n_threads)

    results: list = [None] * len(items)

    def emit(i, pair):
        results[i] = pair
        if sink is not None:
            sink(start_index + i, pair)

    if depth == 1:
        for i, item in enumerate(items):
            try:
                emit(i, transform(i, _acquire(item)))
            except PipelineError:
                raise
            except Exception as exc:
                raise PipelineError(start_index + i, exc) from exc
        return results

    inbox: queue.Queue = queue.Queue(maxsize=depth)
    outbox: queue.Queue = queue.Queue(maxsize=depth)
    failures: list[PipelineError] = []
    stop = threading.Event()

    def producer():
        for i, item in enumerate(items):
            if stop.is_set():
                break
            try:
                inbox.put((i, _acquire(item)))
            except Exception as exc:
                inbox.put((i, exc))  # surfaced by the transform loop
                break
        inbox.put(_DONE)

    def consumer():
        while True:
            got = outbox.get()
            if got is _DONE:
                return
            i, pair = got
            try:
                emit(i, pair)
            except Exception as exc:
                failures.append(PipelineError(start_index + i, exc))
                stop.set()

    threads = [threading.Thread(target=producer, daemon=True),
               threading.Thread(target=consumer, daemon=True)]
    for t in threads:
        t.start()
    try:
        while not stop.is_set():
            got = inbox.get()
            if got is _DONE:
                break
            i, staged = got
            if isinstance(staged, BaseException):
                failures.append(PipelineError(start_index + i, staged))
                break
            try:
                outbox.put((i, transform(i, staged)))
            except Exception as exc:
                failures.append(PipelineError(start_index + i, exc))
                break
    finally:
        stop.set()
        outbox.put(_DONE)
        # drain so a blocked producer can finish
        while threads[0].is_alive():
            try:
                inbox.get(timeout=0.05)
            except queue.Empty:
                pass
        for t in threads:
            t.join()
    if failures:
        first = min(failures, key=lambda f: f.index)
        raise first from first.cause
    return results
