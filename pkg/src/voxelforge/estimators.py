"""scikit-learn style wrappers so the volume operations drop into pipelines.

All transformers here are stateless: ``fit`` only validates parameters and
input, and ``transform`` accepts a single Volume or a sequence of them.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import augment3d, autolabel
from .volgrid import LabelMap, Volume, resample

__all__ = [
    "check_volume",
    "check_volume_batch",
    "Resampler",
    "LungLabeler",
    "BoneLabeler",
    "VolumeAugmenter",
]


def check_volume(X, spacing_mm=(1.0, 1.0, 1.0)) -> Volume:
    """Return ``X`` as a Volume; bare 3D arrays get ``spacing_mm``."""
    if isinstance(X, Volume):
        return X
    arr = np.asarray(X)
    if arr.ndim != 3:
        raise ValueError(f"expected a 3D volume, got array of shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.number) and arr.dtype != np.bool_:
        raise ValueError(f"expected numeric data, got {arr.dtype}")
    return Volume(arr, spacing_mm)


def check_volume_batch(X) -> tuple[list[Volume], bool]:
    """Normalize ``X`` to a list of Volumes; the flag says whether the input
    was a single volume."""
    if isinstance(X, Volume) or (isinstance(X, np.ndarray) and X.ndim == 3):
        return [check_volume(X)], True
    return [check_volume(x) for x in X], False


class _VolumeTransformer(TransformerMixin, BaseEstimator):
    def fit(self, X, y=None):
        check_volume_batch(X)
        self._check_params()
        return self

    def _check_params(self):
        pass

    def _one(self, volume):
        raise NotImplementedError

    def transform(self, X):
        self._check_params()
        vols, single = check_volume_batch(X)
        out = [self._one(v) for v in vols]
        return out[0] if single else out

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.requires_fit = False
        return tags


class Resampler(_VolumeTransformer):
    """Resample to isotropic ``target_res_mm`` (3 mm by default)."""

    def __init__(self, target_res_mm: float = 3.0, interpolation: str = "trilinear"):
        self.target_res_mm = target_res_mm
        self.interpolation = interpolation

    def _check_params(self):
        if not self.target_res_mm > 0:
            raise ValueError("target_res_mm must be positive")
        if self.interpolation not in ("trilinear", "nearest"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")

    def _one(self, volume):
        return resample(volume, self.target_res_mm, self.interpolation)


class LungLabeler(_VolumeTransformer):
    def __init__(self, air_hu_max: float = -150.0, erosion_diameter_mm: float = 10.0, n_lungs: int = 2):
        self.air_hu_max = air_hu_max
        self.erosion_diameter_mm = erosion_diameter_mm
        self.n_lungs = n_lungs

    def _params(self):
        return autolabel.LungParams(self.air_hu_max, self.erosion_diameter_mm, self.n_lungs)

    def _check_params(self):
        self._params()

    def _one(self, volume):
        return autolabel.label_lungs(volume, self._params())

    predict = _VolumeTransformer.transform


class BoneLabeler(_VolumeTransformer):
    def __init__(
        self,
        tau1: float = 0.0,
        tau2: float = 200.0,
        closing_diameter_mm: float = 25.0,
        skeleton_connectivity: int = 26,
    ):
        self.tau1 = tau1
        self.tau2 = tau2
        self.closing_diameter_mm = closing_diameter_mm
        self.skeleton_connectivity = skeleton_connectivity

    def _params(self):
        return autolabel.BoneParams(
            self.tau1, self.tau2, self.closing_diameter_mm, self.skeleton_connectivity
        )

    def _check_params(self):
        self._params()

    def _one(self, volume):
        return autolabel.label_bones(volume, self._params())

    predict = _VolumeTransformer.transform


class VolumeAugmenter(TransformerMixin, BaseEstimator):
    """Batch augmentation through the FIFO pipeline.

    ``spec`` is an :class:`~voxelforge.augment3d.AugmentSpec` or a dict of
    its fields. ``transform(X, labels)`` returns AugmentedPairs in order.
    """

    def __init__(
        self,
        spec=None,
        depth: int = 2,
        n_threads: int = 1,
        fill_value: float = 0.0,
        occlude_labels: bool = False,
    ):
        self.spec = spec
        self.depth = depth
        self.n_threads = n_threads
        self.fill_value = fill_value
        self.occlude_labels = occlude_labels

    def _spec(self) -> augment3d.AugmentSpec:
        if self.spec is None:
            return augment3d.AugmentSpec()
        if isinstance(self.spec, augment3d.AugmentSpec):
            return self.spec
        return augment3d.AugmentSpec.from_dict(dict(self.spec))

    def fit(self, X, y=None):
        check_volume_batch(X)
        self._spec()
        return self

    def transform(self, X, labels: Sequence | None = None):
        vols, single = check_volume_batch(X)
        if labels is None:
            labs = [LabelMap(np.zeros(v.dims, np.uint8), v.spacing_mm) for v in vols]
        else:
            labs = [labels] if single else list(labels)
            labs = [lab if isinstance(lab, LabelMap) else LabelMap(np.asarray(lab)) for lab in labs]
        out = augment3d.pipeline_run(
            list(zip(vols, labs)),
            self._spec(),
            depth=self.depth,
            n_threads=self.n_threads,
            fill_value=self.fill_value,
            occlude_labels=self.occlude_labels,
        )
        return out[0] if single else out

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.requires_fit = False
        return tags
