import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxelforge import augment3d as ag
from voxelforge.volgrid import LabelMap, Volume


def _pair(rng, dims=(12, 10, 8)):
    img = Volume(rng.uniform(size=dims).astype(np.float32), (3, 3, 3))
    lab = LabelMap(rng.integers(0, 6, size=dims).astype(np.uint8), (3, 3, 3))
    return img, lab


FULL_SPEC = ag.AugmentSpec(
    rotation_range=(-0.4, 0.4),
    scale_range=(0.8, 1.2),
    shear_range=(-0.1, 0.1),
    reflect_prob=(0.5, 0.5, 0.5),
    generic_range=(-0.05, 0.05),
    displacement_max=(4, 4, 4),
    occlusion_max=3,
    noise_sigma_range=(0, 0.1),
    window_low_range=(-0.2, 0.3),
    window_high_range=(0.2, 1.2),
    seed=5,
)


# --------------------------------------------------------------------------
# Philox generator


@pytest.mark.parametrize(
    "counter,key,expect",
    [
        ((0, 0, 0, 0), (0, 0), (0x6627E8D5, 0xE169C58D, 0xBC57AC4C, 0x9B00DBD8)),
        ((0xFFFFFFFF,) * 4, (0xFFFFFFFF,) * 2, (0x408F276D, 0x41C83B0E, 0xA20BC7C6, 0x6D5451FD)),
        (
            (0x243F6A88, 0x85A308D3, 0x13198A2E, 0x03707344),
            (0xA4093822, 0x299F31D0),
            (0xD16CFE09, 0x94FDCCEB, 0x5001E420, 0x24126EA1),
        ),
    ],
)
def test_philox_known_answers(counter, key, expect):
    out = ag.philox4x32([np.array([c], np.uint64) for c in counter], key)
    assert tuple(int(v[0]) for v in out) == expect


def test_noise_statistics():
    x = ag.generate_noise((100, 100, 100), 1.0, seed=42).ravel(order="F")
    assert abs(x.mean()) < 0.004
    assert abs(x.std() - 1) < 0.01
    lag = np.corrcoef(x[:-1], x[1:])[0, 1]
    assert abs(lag) < 0.005


def test_noise_determinism_and_threads():
    a = ag.generate_noise((130, 90, 100), 2.0, seed=9, n_threads=1)
    b = ag.generate_noise((130, 90, 100), 2.0, seed=9, n_threads=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, ag.generate_noise((130, 90, 100), 2.0, seed=10))
    assert not ag.generate_noise((4, 4, 4), 0.0, seed=1).any()
    with pytest.raises(ValueError):
        ag.generate_noise((2, 2, 2), -1.0, seed=1)


def test_noise_value_depends_only_on_index():
    big = ag.generate_noise((8, 6, 5), 1.0, seed=3)
    flat = big.ravel(order="F")
    assert np.array_equal(ag.normal_at(np.array([17, 100]), 3), flat[[17, 100]])


# --------------------------------------------------------------------------
# parameters


def test_spec_validation_and_json(tmp_path):
    with pytest.raises(ValueError):
        ag.AugmentSpec(reflect_prob=(1.5, 0, 0))
    with pytest.raises(ValueError):
        ag.AugmentSpec(rotation_range=(1.0, 0.0))
    with pytest.raises(ValueError):
        ag.AugmentSpec(displacement_max=(-1, 0, 0))
    with pytest.raises(ValueError):
        ag.AugmentSpec.from_dict({"bogus": 1})
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(FULL_SPEC.to_dict()))
    assert ag.AugmentSpec.from_json(path) == FULL_SPEC


def test_identity_spec_gives_identity_params():
    p = ag.sample_params(ag.AugmentSpec(), np.random.default_rng(0), (10, 10, 10))
    assert np.array_equal(p.A, np.eye(3))
    assert np.array_equal(p.b_offset, np.zeros(3))
    assert p.occlusion_height == 0


def test_displacement_example():
    spec = ag.AugmentSpec(displacement_max=(5, 0, 0))
    rng = np.random.default_rng(0)
    p = ag.sample_params(spec, rng, (9, 9, 9))
    assert np.allclose(p.b_offset, p.displacement)
    assert np.allclose(p.A @ p.center + p.b_offset, p.center + p.displacement, atol=1e-12)


def test_reflection_guarantee():
    spec = ag.AugmentSpec(reflect_prob=(1, 0, 0), displacement_max=(3, 3, 3))
    p = ag.sample_params(spec, np.random.default_rng(1), (20, 16, 12))
    assert np.array_equal(p.A, np.diag([-1.0, 1, 1]))
    assert np.linalg.norm(p.A @ p.center + p.b_offset - (p.center + p.displacement)) < 1e-9


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.tuples(*[st.integers(1, 300)] * 3))
def test_affine_guarantee_property(seed, dims):
    p = ag.sample_params(FULL_SPEC, np.random.default_rng(seed), dims)
    assert np.linalg.norm(p.A @ p.center + p.b_offset - (p.center + p.displacement)) < 1e-9
    assert abs(np.linalg.det(p.A)) > 0
    assert 0 <= p.occlusion_height <= FULL_SPEC.occlusion_max
    assert p.window[0] < p.window[1]
    assert np.all(np.abs(p.displacement) <= 4)


def test_params_roundtrip():
    p = ag.sample_params(FULL_SPEC, np.random.default_rng(2), (8, 8, 8))
    q = ag.TransformParams.from_dict(p.to_dict())
    assert np.array_equal(p.A, q.A) and p.window == q.window and p.noise_seed == q.noise_seed
    with pytest.raises(ValueError):
        ag.TransformParams(np.zeros((3, 3)), np.zeros(3))
    with pytest.raises(ValueError):
        ag.TransformParams.identity(window=(1.0, 1.0))


# --------------------------------------------------------------------------
# apply


def test_identity_apply_is_exact(rng):
    img, lab = _pair(rng)
    out = ag.apply(img, lab, ag.TransformParams.identity())
    assert np.array_equal(out.image.data, img.data)
    assert np.array_equal(out.labels.data, lab.data)


def test_integer_shift_reproduces_values(rng):
    img, lab = _pair(rng)
    params = ag.TransformParams(np.eye(3), [2, 0, -1])
    out = ag.apply(img, lab, params).image.data
    assert np.array_equal(out[:-2, :, 1:], img.data[2:, :, :-1])
    assert np.all(out[-2:] == 0)


def test_rotation_90_is_permutation():
    rng = np.random.default_rng(0)
    data = np.zeros((64, 64, 64), np.float32)
    data[10:30, 5:50, 20:40] = 0.7
    data += rng.uniform(0, 0.2, data.shape).astype(np.float32)
    img = Volume(data)
    lab = LabelMap((data > 0.5).astype(np.uint8))
    c = np.full(3, 31.5)
    A = ag.rotation_matrix(2, math.pi / 2)
    params = ag.TransformParams(A, c - A @ c, center=c)
    out = ag.apply(img, lab, params)
    i, j, k = np.indices(data.shape)
    expect = data[63 - j, i, k]
    assert np.array_equal(out.image.data, expect)
    assert np.array_equal(out.labels.data, lab.data[63 - j, i, k])


def test_window_example():
    assert ag.window(np.array([40.0]), -150, 230)[0] == pytest.approx(0.5)
    v = np.linspace(-500, 500, 101)
    w = ag.window(v, -150, 230)
    assert w.min() == 0 and w.max() == 1 and np.all(np.diff(w) >= 0)


def test_full_occlusion_zeros_image(rng):
    img, lab = _pair(rng)
    params = ag.TransformParams(np.eye(3), np.zeros(3), occlusion_start=0, occlusion_height=8,
                                noise_sigma=5.0, window=(-1, 1), noise_seed=3)
    out = ag.apply(img, lab, params)
    assert not out.image.data.any()
    assert np.array_equal(out.labels.data, lab.data)
    hidden = ag.apply(img, lab, params, occlude_labels=True)
    assert not hidden.labels.data.any()


def test_occlusion_is_input_independent(rng):
    img1, lab = _pair(rng)
    img2, _ = _pair(rng)
    params = ag.sample_params(FULL_SPEC, np.random.default_rng(4), img1.dims)
    params = replace(params, occlusion_start=2.0, occlusion_height=3.0)
    o1 = ag.apply(img1, lab, params).image.data
    o2 = ag.apply(img2, lab, params).image.data
    assert np.all(o1[:, :, 2:6] == 0) and np.all(o2[:, :, 2:6] == 0)


def test_out_of_bounds_fill(rng):
    img, lab = _pair(rng)
    params = ag.TransformParams(np.eye(3), [100, 0, 0], noise_sigma=1.0, noise_seed=1)
    out = ag.apply(img, lab, params, fill_value=0.25)
    assert np.all(out.image.data == 0.25)
    assert not out.labels.data.any()


def test_labels_are_photometric_invariant(rng):
    img, lab = _pair(rng)
    p = ag.sample_params(FULL_SPEC, np.random.default_rng(8), img.dims)
    q = replace(p, noise_sigma=3.0, window=(-5.0, 7.0), noise_seed=99)
    assert np.array_equal(ag.apply(img, lab, p).labels.data, ag.apply(img, lab, q).labels.data)


def test_outputs_in_unit_range_and_thread_invariant(rng):
    img, lab = _pair(rng, (40, 30, 20))
    p = ag.sample_params(FULL_SPEC, np.random.default_rng(3), img.dims)
    a = ag.apply(img, lab, p, n_threads=1)
    b = ag.apply(img, lab, p, n_threads=3)
    assert np.array_equal(a.image.data, b.image.data)
    assert 0 <= a.image.data.min() and a.image.data.max() <= 1


def test_trilinear_matches_scipy(rng):
    from scipy import ndimage

    img, lab = _pair(rng)
    A = ag.rotation_matrix(0, 0.3) @ np.diag([0.9, 1.1, 1.0])
    params = ag.TransformParams(A, [0.5, -0.3, 0.7], window=(-10, 10))
    out = ag.apply(img, lab, params).image.data * 20 - 10
    ref = ndimage.affine_transform(img.data.astype(np.float64), A, [0.5, -0.3, 0.7], order=1,
                                   mode="constant", cval=np.nan)
    inside = ~np.isnan(ref)
    assert np.allclose(out[inside], ref[inside], atol=1e-5)


def test_shape_mismatch(rng):
    img, _ = _pair(rng)
    _, lab = _pair(rng, (3, 3, 3))
    with pytest.raises(ValueError):
        ag.apply(img, lab, ag.TransformParams.identity())


# --------------------------------------------------------------------------
# pipeline


def test_pipeline_seed_isolation(rng):
    batch = [_pair(rng) for _ in range(6)]
    one = ag.pipeline_run(batch[:1], FULL_SPEC, depth=1)
    many = ag.pipeline_run(batch, FULL_SPEC, depth=3)
    assert np.array_equal(one[0].image.data, many[0].image.data)
    # chunked submission with start_index matches the whole batch
    tail = ag.pipeline_run(batch[3:], FULL_SPEC, depth=2, start_index=3)
    for a, b in zip(tail, many[3:]):
        assert np.array_equal(a.image.data, b.image.data)
        assert np.array_equal(a.labels.data, b.labels.data)


def test_pipeline_depth_invariant_and_ordered(rng):
    batch = [_pair(rng) for _ in range(5)]
    seen = []
    outs = {d: ag.pipeline_run(batch, FULL_SPEC, depth=d, sink=lambda i, p: seen.append(i)) for d in (1, 2, 4)}
    assert seen == list(range(5)) * 3
    for d in (2, 4):
        for a, b in zip(outs[1], outs[d]):
            assert np.array_equal(a.image.data, b.image.data)


def test_pipeline_errors(rng):
    with pytest.raises(ValueError, match="empty"):
        ag.pipeline_run([], FULL_SPEC)
    good = _pair(rng)

    def broken():
        raise OSError("disk gone")

    for depth in (1, 3):
        with pytest.raises(ag.PipelineError) as info:
            ag.pipeline_run([good, good, broken, good], FULL_SPEC, depth=depth)
        assert info.value.index == 2

    def bad_sink(i, pair):
        if i == 1:
            raise RuntimeError("full")

    with pytest.raises(ag.PipelineError) as info:
        ag.pipeline_run([good] * 4, FULL_SPEC, depth=2, sink=bad_sink)
    assert info.value.index == 1
