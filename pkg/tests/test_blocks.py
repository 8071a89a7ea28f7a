"""Self-Mamba, Cross-Mamba and the PolyMamba stack."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ssmflow import tensor as T
from ssmflow.mamba import CrossMambaBlock, MambaConfig, SelfMambaBlock, SelfMambaDirection
from ssmflow.polymamba import PolyMamba, PolyMambaConfig, add_positional, flatten_2d, unflatten_2d
from ssmflow.tensor import ShapeError, Tensor

MC = MambaConfig(d_state=4, expand=2, conv_width=3)


def _rng(seed=0):
    return np.random.default_rng(seed)


@given(st.integers(1, 20), st.integers(0, 1000))
def test_tied_self_mamba_commutes_with_sequence_reversal(L, seed):
    blk = SelfMambaBlock(4, MambaConfig(d_state=4, tied=True), _rng(1))
    F = Tensor(_rng(seed).normal(size=(L, 4)))
    np.testing.assert_allclose(blk(T.reverse(F, 0)).data, T.reverse(blk(F), 0).data, atol=1e-12)


@given(st.integers(2, 16), st.integers(0, 1000))
def test_single_direction_is_causal(L, seed):
    rng = _rng(seed)
    d = SelfMambaDirection(3, MC, _rng(2))
    x = rng.normal(size=(L, 3))
    t = int(rng.integers(1, L))
    x2 = x.copy()
    x2[t:] += rng.normal(size=x2[t:].shape)
    np.testing.assert_allclose(d(Tensor(x)).data[:t], d(Tensor(x2)).data[:t], atol=1e-13)


def test_bidirectional_block_sees_the_whole_sequence():
    blk = SelfMambaBlock(3, MC, _rng(3))
    x = _rng(4).normal(size=(8, 3))
    x2 = x.copy()
    x2[-1] += 1.0
    assert np.abs(blk(Tensor(x)).data[0] - blk(Tensor(x2)).data[0]).max() > 1e-8


def test_batched_sequences_are_independent():
    blk = SelfMambaBlock(3, MC, _rng(5))
    x = _rng(6).normal(size=(2, 7, 3))
    batched = blk(Tensor(x)).data
    for b in range(2):
        np.testing.assert_allclose(batched[b], blk(Tensor(x[b])).data, atol=1e-13)


def test_cross_mamba_rejects_mismatched_streams():
    blk = CrossMambaBlock(3, MC, _rng(7))
    with pytest.raises(ShapeError):
        blk(Tensor(np.zeros((4, 3))), Tensor(np.zeros((5, 3))))


@given(st.integers(1, 12), st.integers(0, 1000))
def test_cross_mamba_is_causal_in_both_streams_per_direction(L, seed):
    rng = _rng(seed)
    blk = CrossMambaBlock(3, MC, _rng(8))
    d = blk.fwd
    f1, f2 = rng.normal(size=(L, 3)), rng.normal(size=(L, 3))
    t = int(rng.integers(0, L))
    g2 = f2.copy()
    g2[t:] += 1.0
    np.testing.assert_allclose(d(Tensor(f1), Tensor(f2)).data[:t], d(Tensor(f1), Tensor(g2)).data[:t], atol=1e-13)


# -- PolyMamba -----------------------------------------------------------------


@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4))
def test_flatten_roundtrip_and_row_major_order(H, W, D):
    F = np.arange(H * W * D, dtype=np.float64).reshape(H, W, D)
    flat = flatten_2d(Tensor(F)).data
    assert flat.shape == (H * W, D)
    np.testing.assert_array_equal(flat[W * (H - 1)], F[H - 1, 0])
    np.testing.assert_array_equal(unflatten_2d(Tensor(flat), H, W).data, F)


def test_unflatten_and_positional_shape_errors():
    with pytest.raises(ShapeError):
        unflatten_2d(Tensor(np.zeros((6, 2))), 4, 2)
    with pytest.raises(ShapeError):
        add_positional(Tensor(np.zeros((2, 2, 3))), Tensor(np.zeros((2, 3, 3))))


def _stack(**kw):
    base = dict(dim=4, depth=1, mlp_ratio=2, pos_hw=(3, 3), mamba=MC)
    base.update(kw)
    return PolyMamba(PolyMambaConfig(**base), _rng(9))


def test_swap_symmetry_requires_tied_cross():
    rng = _rng(10)
    F1, F2 = Tensor(rng.normal(size=(1, 3, 3, 4))), Tensor(rng.normal(size=(1, 3, 3, 4)))
    untied = _stack(tie_cross=False)
    q, v = untied(F1, F2)
    v2, q2 = untied(F2, F1)
    assert np.abs(q.data - q2.data).max() > 1e-8


def test_positional_table_is_resampled_for_other_grids():
    pm = _stack(tie_cross=True)
    F = Tensor(_rng(11).normal(size=(1, 5, 6, 4)))
    q, v = pm(F, F)
    assert q.shape == (1, 5, 6, 4)
    np.testing.assert_allclose(q.data, v.data, atol=0)


@pytest.mark.parametrize("toggle", ["use_self", "use_cross", "use_mlp", "use_pos"])
def test_each_toggle_removes_parameters(toggle):
    assert _stack(**{toggle: False}).num_parameters() < _stack().num_parameters()


def test_depth_adds_parameters_linearly():
    n1, n2, n3 = (_stack(depth=d).num_parameters() for d in (1, 2, 3))
    assert n3 - n2 == n2 - n1 > 0


def test_without_cross_the_streams_do_not_interact():
    pm = _stack(use_cross=False, depth=2)
    rng = _rng(12)
    F1 = rng.normal(size=(1, 3, 3, 4))
    a, _ = pm(Tensor(F1), Tensor(rng.normal(size=(1, 3, 3, 4))))
    b, _ = pm(Tensor(F1), Tensor(rng.normal(size=(1, 3, 3, 4))))
    np.testing.assert_array_equal(a.data, b.data)


def test_with_cross_the_streams_interact():
    pm = _stack(depth=1)
    rng = _rng(13)
    F1 = rng.normal(size=(1, 3, 3, 4))
    a, _ = pm(Tensor(F1), Tensor(rng.normal(size=(1, 3, 3, 4))))
    b, _ = pm(Tensor(F1), Tensor(rng.normal(size=(1, 3, 3, 4))))
    assert np.abs(a.data - b.data).max() > 1e-8
