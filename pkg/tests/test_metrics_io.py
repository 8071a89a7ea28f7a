import math
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ssmflow.flowio import (
    FlowFormatError,
    FlowTruncatedError,
    flow_to_color,
    make_color_wheel,
    parse_flo,
    read_flo,
    read_image,
    write_flo,
    write_image,
)
from ssmflow.metrics import EmptyMaskError, epe, f1_all, s40
from ssmflow.synthetic import gen_synthetic, sample_bilinear, split_holdout

flows = st.tuples(st.integers(1, 6), st.integers(1, 6)).flatmap(
    lambda hw: arrays(np.float64, hw + (2,), elements=st.floats(-50, 50, allow_nan=False))
)


def same_shape_triple():
    return st.tuples(st.integers(1, 5), st.integers(1, 5)).flatmap(
        lambda hw: st.tuples(*(arrays(np.float64, hw + (2,), elements=st.floats(-20, 20)) for _ in range(3)))
    )


# -- metrics ----------------------------------------------------------------------


@given(same_shape_triple())
def test_epe_is_a_metric(abc):
    a, b, c = abc
    assert epe(a, b) >= 0
    assert epe(a, a) == 0
    assert epe(a, b) == pytest.approx(epe(b, a), abs=1e-12)
    assert epe(a, c) <= epe(a, b) + epe(b, c) + 1e-9


@given(flows, st.floats(1.0, 4.0))
def test_f1_is_a_bounded_percentage_and_monotone_under_inflation(gt, k):
    err = np.random.default_rng(0).normal(size=gt.shape) * 4
    base = f1_all(gt + err, gt)
    assert 0.0 <= base <= 100.0
    assert f1_all(gt + k * err, gt) >= base


def test_f1_or_rule_flags_either_condition():
    gt = np.zeros((2, 2, 2))
    gt[..., 0] = 100.0
    pred = gt + [0.0, 4.0]  # 4 px > 3 px but < 5% of 100
    assert f1_all(pred, gt, rule="and") == 0.0
    assert f1_all(pred, gt, rule="or") == 100.0


def test_f1_and_epe_reject_empty_masks():
    z = np.zeros((2, 2, 2))
    with pytest.raises(EmptyMaskError):
        epe(z, z, np.zeros((2, 2), bool))
    with pytest.raises(EmptyMaskError):
        f1_all(z, z, np.zeros((2, 2), bool))


def test_metric_shape_mismatch():
    with pytest.raises(ValueError):
        epe(np.zeros((2, 2, 2)), np.zeros((2, 3, 2)))


@given(flows)
def test_s40_equals_epe_over_the_brute_force_subset(gt):
    pred = gt + 1.5
    big = [(i, j) for i, j in np.ndindex(gt.shape[:2]) if math.hypot(*gt[i, j]) > 40]
    got = s40(pred, gt)
    if not big:
        assert math.isnan(got)
    else:
        ref = np.mean([math.hypot(*(pred[i, j] - gt[i, j])) for i, j in big])
        assert got == pytest.approx(ref, rel=1e-12)


# -- .flo ---------------------------------------------------------------------------


@given(flow=flows)
def test_flo_roundtrip_is_bit_exact_at_32_bit(flow, tmp_path_factory):
    p = tmp_path_factory.mktemp("flo") / "f.flo"
    f32 = flow.astype(np.float32)
    write_flo(f32, p)
    back = read_flo(p)
    assert back.dtype == np.float32 and back.tobytes() == f32.tobytes()


def test_flo_header_fields_and_errors(tmp_path):
    p = tmp_path / "f.flo"
    write_flo(np.zeros((3, 5, 2)), p)
    raw = p.read_bytes()
    assert struct.unpack("<fii", raw[:12]) == (202021.25, 5, 3)
    assert len(raw) == 12 + 3 * 5 * 2 * 4
    with pytest.raises(FlowTruncatedError):
        parse_flo(raw[:-1])
    with pytest.raises(FlowTruncatedError):
        parse_flo(raw[:8])
    with pytest.raises(FlowFormatError, match="bad magic 7.5"):
        parse_flo(struct.pack("<f", 7.5) + raw[4:])
    with pytest.raises(ValueError):
        write_flo(np.zeros((3, 5, 3)), p)


# -- colour --------------------------------------------------------------------------


def test_color_wheel_has_55_entries_starting_at_red():
    wheel = make_color_wheel()
    assert wheel.shape == (55, 3) and wheel[0].tolist() == [255, 0, 0]


@given(st.floats(0, 2 * math.pi, exclude_max=True), st.floats(0.1, 10))
def test_color_depends_only_on_direction_at_saturation(theta, scale):
    v = np.array([[[math.cos(theta), math.sin(theta)]]])
    a = flow_to_color(v, max_norm=1.0)
    b = flow_to_color(v * scale * 2, max_norm=scale)
    np.testing.assert_array_equal(a, b)


def test_auto_normalisation_and_invalid_max_norm():
    flow = np.random.default_rng(0).normal(size=(8, 8, 2))
    img = flow_to_color(flow)
    assert img.dtype == np.uint8 and img.shape == (8, 8, 3)
    with pytest.raises(ValueError):
        flow_to_color(flow, max_norm=0.0)


def test_image_roundtrip_for_png_and_ppm(tmp_path):
    img = np.random.default_rng(1).integers(0, 256, size=(5, 7, 3)).astype(np.uint8)
    for name in ("a.png", "a.ppm"):
        write_image(img, tmp_path / name)
        np.testing.assert_array_equal(np.round(read_image(tmp_path / name) * 255).astype(np.uint8), img)


# -- synthetic data -------------------------------------------------------------------


def test_synthetic_data_is_deterministic_per_seed():
    a, b = gen_synthetic(7, 3, size=16), gen_synthetic(7, 3, size=16)
    for x, y in zip(a, b):
        assert np.array_equal(x.img1, y.img1) and np.array_equal(x.flow, y.flow)
    assert not np.array_equal(gen_synthetic(8, 1, size=16)[0].img1, a[0].img1)


@given(st.integers(0, 1000), st.floats(0.5, 4.0), st.floats(0, 5))
def test_backward_warp_reproduces_the_first_frame(seed, max_disp, rot):
    s = gen_synthetic(seed, 1, size=16, max_disp=max_disp, max_rotation_deg=rot)[0]
    H, W = s.flow.shape[:2]
    ys, xs = np.mgrid[0:H, 0:W]
    warped = sample_bilinear(s.img2, np.stack([xs, ys], -1) + s.flow)
    ok = ~s.occluded
    assert np.abs(warped - s.img1)[ok].max(initial=0.0) < 1e-3


def test_flows_respect_max_displacement_and_split_is_80_20():
    samples = gen_synthetic(0, 20, size=16, max_disp=3.0)
    assert max(np.abs(s.flow).max() for s in samples) <= 3.0 + 1e-12
    train, hold = split_holdout(samples)
    assert len(train) == 16 and len(hold) == 4
