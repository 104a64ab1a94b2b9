"""Rule-based lung and skeleton labelers for CT volumes in Hounsfield units,
and a synthetic torso phantom with known ground truth."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import fftmorph
from .volgrid import Mask, Volume, connected_components, largest_components, threshold

__all__ = [
    "NoCandidate",
    "LungParams",
    "BoneParams",
    "PhantomSpec",
    "label_lungs",
    "label_bones",
    "fill_slice_holes",
    "remove_boundary_connected",
    "make_phantom",
    "random_phantom_spec",
]


class NoCandidate(RuntimeError):
    """The labeler found nothing to label (e.g. no interior air)."""


@dataclass(frozen=True)
class LungParams:
    air_hu_max: float = -150.0
    erosion_diameter_mm: float = 10.0
    n_lungs: int = 2

    def __post_init__(self):
        if not self.erosion_diameter_mm > 0:
            raise ValueError("erosion_diameter_mm must be positive")
        if self.n_lungs < 1:
            raise ValueError("n_lungs must be >= 1")


@dataclass(frozen=True)
class BoneParams:
    tau1: float = 0.0
    tau2: float = 200.0
    closing_diameter_mm: float = 25.0
    skeleton_connectivity: int = 26

    def __post_init__(self):
        if not self.tau1 < self.tau2:
            raise ValueError("tau1 must be below tau2")
        if not self.closing_diameter_mm > 0:
            raise ValueError("closing_diameter_mm must be positive")


def remove_boundary_connected(mask: Mask) -> Mask:
    """Drop 6-connected components touching the x or y faces.

    The z faces do not count: the patient continues beyond the scan there.
    """
    comps = connected_components(mask, 6)
    labels = comps.labels
    edge = np.concatenate(
        [labels[0].ravel(), labels[-1].ravel(), labels[:, 0].ravel(), labels[:, -1].ravel()]
    )
    touching = np.unique(edge[edge > 0])
    keep = (labels > 0) & ~np.isin(labels, touching)
    return mask.with_data(keep, Mask)


def fill_slice_holes(mask: Mask) -> Mask:
    """Fill, slice by slice along z, background regions (4-connected) that
    do not reach the slice border."""
    data = mask.data.astype(bool)
    out = data.copy()
    four = ndimage.generate_binary_structure(2, 1)
    for z in range(data.shape[2]):
        sl = data[:, :, z]
        if not sl.any():
            continue
        bg, k = ndimage.label(~sl, structure=four)
        if k == 0:
            continue
        border = np.unique(np.concatenate([bg[0], bg[-1], bg[:, 0], bg[:, -1]]))
        holes = (bg > 0) & ~np.isin(bg, border)
        out[:, :, z] |= holes
    return mask.with_data(out, Mask)


def label_lungs(ct: Volume, params: LungParams = LungParams()) -> Mask:
    """Lung mask: the largest interior air pockets, grown back to their full
    thresholded extent."""
    air = threshold(ct, hi=params.air_hu_max)
    if not air.data.any():
        raise NoCandidate("no voxels at or below the air threshold")
    ball = fftmorph.ball_element(params.erosion_diameter_mm, ct.spacing_mm)
    # The scan is cut out of a larger scene: erode as if the border voxels
    # continued outward, otherwise outside air is pulled off the x/y faces
    # and no longer counts as boundary-connected.
    pad = [(n // 2, n // 2) for n in ball.dims]
    grown = np.pad(air.data.astype(bool), pad, mode="edge")
    inner = tuple(slice(p, p + n) for (p, _), n in zip(pad, air.dims))
    eroded = air.with_data(fftmorph.erode(grown, ball)[inner], Mask)
    interior = remove_boundary_connected(eroded)
    if not interior.data.any():
        raise NoCandidate("no interior air pocket survives erosion")
    seeds = largest_components(interior, params.n_lungs, 6)
    comps = connected_components(air, 6).labels
    hit = np.unique(comps[seeds.data.astype(bool)])
    hit = hit[hit > 0]
    return ct.with_data(np.isin(comps, hit), Mask)


def label_bones(ct: Volume, params: BoneParams = BoneParams()) -> Mask:
    """Skeleton mask from the bright bone exterior, closed, trimmed by the
    soft threshold and hole-filled per axial slice."""
    hard = threshold(ct, lo=params.tau2)
    if not hard.data.any():
        raise NoCandidate("no voxels at or above the bone threshold")
    skeleton = largest_components(hard, 1, params.skeleton_connectivity)
    ball = fftmorph.ball_element(params.closing_diameter_mm, ct.spacing_mm)
    closed = fftmorph.close(skeleton, ball)
    soft = threshold(ct, lo=params.tau1)
    kept = closed.with_data(closed.data & soft.data, Mask)
    return fill_slice_holes(kept)


# --------------------------------------------------------------------------
# Phantom


@dataclass(frozen=True)
class PhantomSpec:
    """Synthetic torso.

    Positions and ellipsoid semi-axes are in normalized coordinates, where
    each axis runs from -1 at the first voxel centre to +1 at the last.
    Bone radii and shell thickness are in millimetres. Bones are hollow rods
    (bright shell, dimmer marrow): a spine along z, a pelvic bar along x at
    ``pelvis_z`` and two femurs running from the bar down to the lower z face.
    """

    dims: tuple[int, int, int] = (96, 96, 64)
    spacing_mm: tuple[float, float, float] = (3.0, 3.0, 3.0)
    background_hu: float = -1000.0
    body_axes: tuple[float, float, float] = (0.9, 0.7, 2.0)
    body_hu: float = 40.0
    lung_centers: tuple = ((-0.4, -0.1, 0.35), (0.4, -0.1, 0.35))
    lung_axes: tuple = ((0.24, 0.3, 0.45), (0.24, 0.3, 0.45))
    lung_hu: float = -800.0
    spine_xy: tuple[float, float] = (0.0, 0.3)
    spine_radius_mm: float = 16.0
    pelvis_z: float = -0.6
    femur_x: float = 0.45
    limb_radius_mm: float = 13.0
    shell_mm: float = 5.0
    bone_hu: float = 300.0
    marrow_hu: float = 100.0
    air_pockets: tuple = ()
    kidney: tuple | None = None
    kidney_hu: float = 250.0
    table: bool = False
    table_hu: float = 100.0
    noise_sigma: float = 10.0

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return asdict(self)


def _norm_grid(dims):
    axes = [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in dims]
    return np.meshgrid(*axes, indexing="ij")


def _ellipsoid(grid, center, axes):
    return sum(((g - c) / a) ** 2 for g, c, a in zip(grid, center, axes)) <= 1.0


def _mm_coords(dims, spacing):
    """Per-axis physical offsets from the volume centre, in mm."""
    return [(np.arange(n) - (n - 1) / 2.0) * u for n, u in zip(dims, spacing)]


def _rod(mm, axis, center_mm, radius_mm, extent_mm):
    """Solid cylinder along ``axis``; ``extent_mm`` bounds it along that axis."""
    grids = np.meshgrid(*mm, indexing="ij")
    others = [i for i in range(3) if i != axis]
    r2 = sum((grids[i] - center_mm[i]) ** 2 for i in others)
    along = grids[axis]
    return (r2 <= radius_mm**2) & (along >= extent_mm[0]) & (along <= extent_mm[1])


def _bones(spec: PhantomSpec):
    dims, sp = spec.dims, spec.spacing_mm
    mm = _mm_coords(dims, sp)
    half = [(n - 1) / 2.0 * u for n, u in zip(dims, sp)]
    to_mm = lambda v: [v[i] * half[i] for i in range(3)]  # noqa: E731
    big = 1e9
    spine_c = to_mm((spec.spine_xy[0], spec.spine_xy[1], 0.0))
    pelvis_z_mm = spec.pelvis_z * half[2]
    outer = _rod(mm, 2, spine_c, spec.spine_radius_mm, (-big, big))
    inner = _rod(mm, 2, spine_c, spec.spine_radius_mm - spec.shell_mm, (-big, big))
    fx = spec.femur_x * half[0]
    bar_c = (0.0, spine_c[1], pelvis_z_mm)
    bar_len = (-fx - spec.limb_radius_mm, fx + spec.limb_radius_mm)
    outer |= _rod(mm, 0, bar_c, spec.limb_radius_mm, bar_len)
    inner |= _rod(mm, 0, bar_c, spec.limb_radius_mm - spec.shell_mm,
                  (bar_len[0] + spec.shell_mm, bar_len[1] - spec.shell_mm))
    for sign in (-1.0, 1.0):
        c = (sign * fx, spine_c[1], 0.0)
        outer |= _rod(mm, 2, c, spec.limb_radius_mm, (-big, pelvis_z_mm))
        inner |= _rod(mm, 2, c, spec.limb_radius_mm - spec.shell_mm, (-big, pelvis_z_mm))
    return outer, inner


def make_phantom(spec: PhantomSpec = PhantomSpec(), seed: int = 0):
    """Render ``spec`` to a CT-like Volume plus ground-truth masks.

    Returns ``(volume, truth)`` where ``truth`` maps ``"body"``, ``"lungs"``,
    ``"bones"`` (and ``"kidney"``, ``"air_pockets"`` when present) to Masks.
    The volume is float32 HU with ``N(0, noise_sigma**2)`` noise; the same
    ``(spec, seed)`` always yields the same volume.
    """
    dims = tuple(int(n) for n in spec.dims)
    grid = _norm_grid(dims)
    body = _ellipsoid(grid, (0.0, 0.0, 0.0), spec.body_axes)
    lungs = np.zeros(dims, bool)
    for c, a in zip(spec.lung_centers, spec.lung_axes):
        lungs |= _ellipsoid(grid, c, a)
    outer, inner = _bones(spec)
    pockets = np.zeros(dims, bool)
    for c, a in spec.air_pockets:
        pockets |= _ellipsoid(grid, c, a)
    kidney = np.zeros(dims, bool)
    if spec.kidney is not None:
        kidney = _ellipsoid(grid, *spec.kidney)

    inside = lungs | outer | pockets | kidney
    if (inside & ~body).any():
        raise ValueError("phantom structures extend outside the body")
    if (lungs & outer).any() or ((lungs | outer) & (pockets | kidney)).any():
        raise ValueError("phantom structures overlap")

    hu = np.full(dims, spec.background_hu, np.float64)
    if spec.table:
        below = grid[1] > spec.body_axes[1] + 0.05
        hu[below & (grid[1] < spec.body_axes[1] + 0.15)] = spec.table_hu
    hu[body] = spec.body_hu
    hu[lungs | pockets] = spec.lung_hu
    hu[outer] = spec.bone_hu
    hu[inner] = spec.marrow_hu
    hu[kidney] = spec.kidney_hu
    if spec.noise_sigma > 0:
        hu += np.random.default_rng(seed).normal(0.0, spec.noise_sigma, dims)
    vol = Volume(hu.astype(np.float32), spec.spacing_mm)
    truth = {
        "body": Mask(body, spec.spacing_mm),
        "lungs": Mask(lungs, spec.spacing_mm),
        "bones": Mask(outer, spec.spacing_mm),
    }
    if spec.kidney is not None:
        truth["kidney"] = Mask(kidney, spec.spacing_mm)
    if spec.air_pockets:
        truth["air_pockets"] = Mask(pockets, spec.spacing_mm)
    return vol, truth


def random_phantom_spec(rng: np.random.Generator, base: PhantomSpec = PhantomSpec()) -> PhantomSpec:
    """Jitter lung size/placement, bone radii and noise around ``base``."""
    u = rng.uniform
    lx, ly, lz = u(0.18, 0.26), u(0.24, 0.32), u(0.35, 0.5)
    cx = u(0.36, 0.44)
    cy, cz = u(-0.15, -0.05), u(0.25, 0.4)
    left = (-cx + u(-0.02, 0.02), cy + u(-0.03, 0.03), cz + u(-0.05, 0.05))
    right = (cx + u(-0.02, 0.02), cy + u(-0.03, 0.03), cz + u(-0.05, 0.05))
    axes_l = (lx * u(0.9, 1.1), ly * u(0.9, 1.1), lz * u(0.9, 1.1))
    axes_r = (lx * u(0.9, 1.1), ly * u(0.9, 1.1), lz * u(0.9, 1.1))
    return replace(
        base,
        lung_centers=(left, right),
        lung_axes=(axes_l, axes_r),
        spine_xy=(u(-0.03, 0.03), u(0.27, 0.33)),
        spine_radius_mm=u(14.0, 18.0),
        limb_radius_mm=u(11.0, 14.0),
        femur_x=u(0.4, 0.5),
        pelvis_z=u(-0.65, -0.5),
        noise_sigma=u(5.0, 30.0),
    )
