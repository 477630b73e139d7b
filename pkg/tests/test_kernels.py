import csv
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import sparsellm.kernels.core as core
from sparsellm.codec import Layout, StorageDtype, decode_matrix, encode_matrix
from sparsellm.errors import ShapeError
from sparsellm.kernels import (
    KERNEL_CSV_COLUMNS,
    FlopCounter,
    KernelTiming,
    Workload,
    bench_dense,
    bench_kernel,
    dense_gemm,
    dense_gemm_i8_acc,
    dense_gemv,
    dense_gemv_i8_acc,
    dequantize_acc,
    kernel_csv_row,
    sparse_gemm,
    sparse_gemm_i8_acc,
    sparse_gemv,
    sparse_gemv_i8,
    sparse_gemv_i8_acc,
    time_call,
    write_csv,
)

SHAPES = [(1, 1), (2, 8), (3, 5), (17, 33), (64, 100), (130, 257)]


def _sparse_f32(rng, shape, s):
    w = rng.standard_normal(shape).astype(np.float32)
    w[rng.random(shape) < s] = 0
    return w


def _sparse_i8(rng, shape, s):
    w = rng.integers(-127, 128, size=shape).astype(np.int8)
    w[rng.random(shape) < s] = 0
    return w


@pytest.mark.parametrize("layout", list(Layout))
@pytest.mark.parametrize("shape", SHAPES)
def test_float_gemv_bit_identical_to_sequential_dense(layout, shape, rng):
    w = _sparse_f32(rng, shape, 0.7)
    x = rng.standard_normal(shape[1]).astype(np.float32)
    assert np.array_equal(sparse_gemv(encode_matrix(w, layout), x), dense_gemv(w, x))


@pytest.mark.parametrize("layout", list(Layout))
@pytest.mark.parametrize("shape", SHAPES)
def test_float_gemm_bit_identical_to_gemv_columns(layout, shape, rng):
    w = _sparse_f32(rng, shape, 0.5)
    b = rng.standard_normal((shape[1], 5)).astype(np.float32)
    sm = encode_matrix(w, layout)
    out = sparse_gemm(sm, b)
    assert np.array_equal(out, dense_gemm(w, b))
    for j in range(b.shape[1]):
        assert np.array_equal(out[:, j], sparse_gemv(sm, np.ascontiguousarray(b[:, j])))


@pytest.mark.parametrize("layout", list(Layout))
@pytest.mark.parametrize("shape", SHAPES)
def test_int8_accumulators_exact(layout, shape, rng):
    w = _sparse_i8(rng, shape, 0.5)
    x = rng.integers(-128, 128, size=shape[1]).astype(np.int8)
    b = rng.integers(-128, 128, size=(shape[1], 3)).astype(np.int8)
    sm = encode_matrix(w, layout)
    ref_v = w.astype(np.int64) @ x.astype(np.int64)
    ref_m = w.astype(np.int64) @ b.astype(np.int64)
    assert np.array_equal(sparse_gemv_i8_acc(sm, x), ref_v)
    assert np.array_equal(sparse_gemv(sm, x), ref_v)
    assert np.array_equal(sparse_gemm_i8_acc(sm, b), ref_m)
    assert np.array_equal(dense_gemv_i8_acc(w, x), ref_v)
    assert np.array_equal(dense_gemm_i8_acc(w, b), ref_m)


def test_int8_portable_path_matches_vnni_path(monkeypatch, rng):
    w = _sparse_i8(rng, (66, 300), 0.6)
    x = rng.integers(-128, 128, size=300).astype(np.int8)
    sm = encode_matrix(w, Layout.ROWPAIR16)
    fast = sparse_gemv_i8_acc(sm, x)
    monkeypatch.setattr(core, "HAS_VNNI", False)
    assert np.array_equal(sparse_gemv_i8_acc(sm, x), fast)
    assert np.array_equal(fast, w.astype(np.int64) @ x.astype(np.int64))


def test_int8_extreme_values_do_not_overflow():
    w = np.full((4, 4096), -127, np.int8)
    x = np.full(4096, -128, np.int8)
    expected = np.full(4, 127 * 128 * 4096, np.int64)
    for layout in Layout:
        assert np.array_equal(sparse_gemv_i8_acc(encode_matrix(w, layout), x), expected)
    assert np.array_equal(dense_gemv_i8_acc(w, x), expected)


def test_int16_storage_with_int_input(rng):
    w = rng.integers(-3000, 3000, size=(9, 20)).astype(np.int16)
    w[rng.random(w.shape) < 0.5] = 0
    x = rng.integers(-3000, 3000, size=20).astype(np.int16)
    assert np.array_equal(sparse_gemv(encode_matrix(w), x), w.astype(np.int64) @ x.astype(np.int64))


def test_int_storage_with_float_input(rng):
    w = _sparse_i8(rng, (8, 24), 0.4)
    x = rng.standard_normal(24).astype(np.float32)
    y = sparse_gemv(encode_matrix(w), x)
    assert y.dtype == np.float32
    np.testing.assert_allclose(y, w.astype(np.float64) @ x, rtol=1e-6, atol=1e-5)


def test_all_zero_matrix(rng):
    w = np.zeros((5, 7), np.float32)
    assert np.array_equal(sparse_gemv(encode_matrix(w), rng.standard_normal(7).astype(np.float32)), np.zeros(5))


def test_shape_errors_name_shapes():
    sm = encode_matrix(np.ones((3, 4), np.float32))
    with pytest.raises(ShapeError, match=r"4 columns"):
        sparse_gemv(sm, np.ones(5, np.float32))
    with pytest.raises(ShapeError):
        sparse_gemm(sm, np.ones((3, 2), np.float32))
    with pytest.raises(ShapeError):
        sparse_gemv_i8_acc(sm, np.ones(4, np.int8))
    with pytest.raises(ShapeError):
        sparse_gemv_i8_acc(encode_matrix(np.ones((3, 4), np.int8)), np.ones(4, np.int16))


def test_dequantize_acc():
    acc = np.array([10, -4], np.int64)
    np.testing.assert_array_equal(dequantize_acc(acc, [0.5, 2.0], 0.25), np.array([1.25, -2.0], np.float32))
    sm = encode_matrix(np.array([[2, 0], [0, -3]], np.int8))
    out = sparse_gemv_i8(sm, np.array([5, 7], np.int8), [0.1, 1.0], 2.0)
    np.testing.assert_allclose(out, [2.0, -42.0], rtol=1e-6)
    with pytest.raises(ShapeError):
        dequantize_acc(acc, [1.0], 1.0)


def test_flop_counter_counts_nonzeros(rng):
    w = _sparse_f32(rng, (16, 32), 0.75)
    sm = encode_matrix(w)
    counter = FlopCounter()
    sparse_gemm(sm, rng.standard_normal((32, 3)).astype(np.float32), counter=counter)
    assert counter.useful_flops == 2 * np.count_nonzero(w) * 3
    assert counter.dense_equiv_flops == 2 * 16 * 32 * 3
    assert counter.exact_ratio == Fraction(np.count_nonzero(w), w.size)
    other = FlopCounter()
    other.add_dense(2, 2)
    counter.merge(other)
    assert counter.useful_flops == 2 * np.count_nonzero(w) * 3 + 8
    assert FlopCounter().ratio == 0.0


def test_workload_parse():
    assert Workload.parse("gemv") == Workload.gemv()
    assert Workload.parse("gemm:8") == Workload.gemm_batch(8)
    assert str(Workload.gemm_batch(8)) == "gemm:8"
    for bad in ("gemm", "gemm:x", "conv"):
        with pytest.raises(ValueError):
            Workload.parse(bad)


def test_timing_requires_five_repeats():
    with pytest.raises(ValueError):
        time_call(lambda: None, repeats=4)
    with pytest.raises(ValueError):
        KernelTiming(1, 3, 0)
    assert time_call(lambda: None, repeats=5) >= 0


def test_bench_rows_and_csv(tmp_path, rng):
    w = _sparse_f32(rng, (64, 64), 0.5)
    sm = encode_matrix(w)
    timing, flops = bench_kernel(sm, Workload.gemm_batch(4), repeats=5)
    dense_t, dense_f = bench_dense(w, Workload.gemv(), repeats=5)
    assert flops.useful_flops == 2 * sm.nnz * 4
    assert dense_f.ratio == 1.0
    rows = [kernel_csv_row(w.shape, "rowpair16", "real32", 0.5, timing, flops),
            kernel_csv_row(w.shape, "dense", "real32", 0.0, dense_t, dense_f)]
    path = tmp_path / "k.csv"
    write_csv(path, rows)
    with open(path, newline="") as fh:
        read = list(csv.DictReader(fh))
    assert tuple(read[0]) == KERNEL_CSV_COLUMNS
    assert read[0]["shape"] == "64x64" and int(read[0]["useful_flops"]) == flops.useful_flops


@settings(max_examples=40, deadline=None)
@given(rows=st.integers(1, 50), cols=st.integers(1, 70), s=st.floats(0, 1), seed=st.integers(0, 2**31),
       tile_rows=st.sampled_from([1, 2, 4, 16]), tile_cols=st.sampled_from([16, 32]))
def test_tile_geometry_property(rows, cols, s, seed, tile_rows, tile_cols):
    r = np.random.default_rng(seed)
    w = _sparse_f32(r, (rows, cols), s)
    x = r.standard_normal(cols).astype(np.float32)
    sm = encode_matrix(w, Layout.TILE, tile_rows=tile_rows, tile_cols=tile_cols)
    assert np.array_equal(decode_matrix(sm), w)
    assert np.array_equal(sparse_gemv(sm, x), dense_gemv(w, x))


def test_gemv_counts_one_column(rng):
    w = _sparse_f32(rng, (8, 16), 0.5)
    counter = FlopCounter()
    sparse_gemv(encode_matrix(w), np.ones(16, np.float32), counter=counter)
    assert counter.useful_flops == 2 * np.count_nonzero(w)
    assert counter.exact_ratio == Fraction(np.count_nonzero(w), 128)
