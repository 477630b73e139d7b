import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsellm.compression import (
    CalibrationSet,
    Granularity,
    ProfileKind,
    QuantizedMatrix,
    QuantRecipe,
    channel_scales,
    hessian,
    inverse_hessian,
    iterative_prune_schedule,
    outlier_ratio,
    owl_sparsities,
    profile_owl,
    profile_uniform,
    prune_count,
    prune_magnitude,
    prune_obs,
    prune_weights,
    quantize_gptq,
    quantize_layer,
    quantize_weights,
    reconstruction_error,
    round_to_grid,
    select_skip_layers,
    smooth_activations,
    weight_kurtosis,
)
from sparsellm.errors import ScheduleError, ShapeError, SingularHessianError
from sparsellm.masks import SparsityMask

# --- calibration ------------------------------------------------------------


def test_calibration_set_is_read_only(rng):
    cs = CalibrationSet({"a": rng.standard_normal((4, 3))}, 1, 4)
    with pytest.raises(ValueError):
        cs["a"][0, 0] = 1.0
    with pytest.raises(ShapeError):
        cs["missing"]
    with pytest.raises(ShapeError):
        cs.check("a", np.ones((2, 5)))
    with pytest.raises(ShapeError):
        CalibrationSet({"a": np.ones(3)}, 1, 1)


def test_hessian_damping_and_inverse(rng):
    x = rng.standard_normal((50, 6))
    h = hessian(x, 0.1)
    base = x.T @ x
    np.testing.assert_allclose(h - base, 0.1 * np.mean(np.diag(base)) * np.eye(6), atol=1e-9)
    np.testing.assert_allclose(inverse_hessian(x, 0.1) @ h, np.eye(6), atol=1e-8)


def test_singular_hessian_needs_damping():
    x = np.zeros((5, 3))
    x[:, 0] = 1.0
    with pytest.raises(SingularHessianError, match="damp"):
        inverse_hessian(x, 0.0)


def test_reconstruction_error_zero_for_identical(rng):
    w = rng.standard_normal((3, 4))
    x = rng.standard_normal((10, 4))
    assert reconstruction_error(w, w, x) == 0.0
    assert reconstruction_error(w, np.zeros_like(w), x) == pytest.approx(np.sum((x @ w.T) ** 2))


# --- profiles ---------------------------------------------------------------


def test_uniform_profile_is_constant():
    p = profile_uniform({"a": 10, "b": 30}, 0.6)
    assert p.kind == ProfileKind.UNIFORM
    assert dict(p.per_layer) == {"a": 0.6, "b": 0.6}


def test_owl_two_layer_example():
    out = owl_sparsities({"hi": 0.9, "lo": 0.1}, {"hi": 10, "lo": 10}, 0.4, 0.08)
    assert out["hi"] == pytest.approx(0.32)
    assert out["lo"] == pytest.approx(0.48)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(1, 1000)), min_size=2, max_size=12),
       st.floats(0.1, 0.8), st.floats(0, 0.1))
def test_owl_mean_matches_target(layers, target, lam):
    ratios = {f"l{i}": d for i, (d, _) in enumerate(layers)}
    sizes = {f"l{i}": n for i, (_, n) in enumerate(layers)}
    out = owl_sparsities(ratios, sizes, target, lam)
    mean = sum(out[k] * sizes[k] for k in out) / sum(sizes.values())
    assert mean == pytest.approx(target, abs=1e-12)
    assert all(target - lam - 1e-12 <= v <= target + lam + 1e-12 for v in out.values())
    # more outliers never means more sparsity
    names = sorted(out, key=lambda k: ratios[k])
    for a, b in zip(names, names[1:]):
        if ratios[a] < ratios[b]:
            assert out[a] >= out[b] - 1e-12


def test_owl_equal_ratios_fall_back_to_uniform(rng):
    w = {"a": np.ones((4, 4)), "b": np.ones((4, 4))}
    x = {"a": np.ones((3, 4)), "b": np.ones((3, 4))}
    p = profile_owl(x, w, 0.5)
    assert dict(p.per_layer) == {"a": 0.5, "b": 0.5}
    assert p.notice


def test_owl_lambda_capped_at_target(rng):
    w = {"a": rng.standard_normal((8, 8)), "b": rng.standard_normal((8, 8))}
    x = {"a": rng.standard_normal((16, 8)) * np.r_[50.0, np.ones(7)], "b": rng.standard_normal((16, 8))}
    p = profile_owl(x, w, 0.05, owl_lambda=0.2, owl_m=2.0)
    assert min(p.per_layer.values()) >= 0.0
    assert p.notice and "capped" in p.notice


def test_outlier_ratio(rng):
    w = np.ones((2, 4))
    x = np.ones((5, 4))
    x[:, 0] = 100.0
    assert outlier_ratio(w, x, 2.0) == pytest.approx(2 / 8)
    assert outlier_ratio(np.zeros((2, 4)), x) == 0.0
    with pytest.raises(ShapeError):
        outlier_ratio(w, np.ones((5, 3)))


def test_owl_beats_uniform_with_outlier_layers():
    """Layers with outlier activation channels dominate the error; OWL spares them."""
    wins = 0
    for seed in range(10):
        r = np.random.default_rng(seed)
        weights, acts = {}, {}
        for i in range(6):
            x = r.standard_normal((256, 32))
            if i % 2 == 0:
                x[:, r.choice(32, 3, replace=False)] *= 20
            weights[f"l{i}"] = r.standard_normal((32, 32)).astype(np.float32)
            acts[f"l{i}"] = x.astype(np.float32)
        calib = CalibrationSet(acts, 8, 32)
        errors = {}
        for name, prof in (("uniform", profile_uniform(weights, 0.7)), ("owl", profile_owl(calib, weights, 0.7))):
            _, _, reports = prune_weights(weights, prof, "magnitude", calib, scope="per-layer")
            errors[name] = sum(r.recon_error for r in reports)
        wins += errors["owl"] <= errors["uniform"]
    assert wins >= 8


# --- magnitude pruning -------------------------------------------------------


def test_prune_count_rounds_half_even():
    assert prune_count(0.5, 5) == 2
    assert prune_count(0.7, 10) == 7
    assert prune_count(0.0, 10) == 0
    with pytest.raises(ValueError):
        prune_count(1.0, 4)


def test_magnitude_ties_break_to_lowest_index():
    w = np.array([[1.0, -1.0, 1.0, 2.0]], np.float32)
    out, keep = prune_magnitude(w, 0.5)
    assert keep.tolist() == [[False, False, True, True]]
    assert out.tolist() == [[0.0, 0.0, 1.0, 2.0]]


@pytest.mark.parametrize("scope", ["per-row", "per-layer"])
def test_magnitude_exact_counts(scope, rng):
    w = rng.standard_normal((6, 10)).astype(np.float32)
    out, keep = prune_magnitude(w, 0.7, scope)
    if scope == "per-row":
        assert (keep.sum(axis=1) == 3).all()
    else:
        assert keep.sum() == 60 - prune_count(0.7, 60)
    assert np.array_equal(out != 0, keep)


def test_magnitude_respects_existing_mask(rng):
    w = rng.standard_normal((4, 8)).astype(np.float32)
    _, first = prune_magnitude(w, 0.5, "per-row")
    _, second = prune_magnitude(w, 0.75, "per-row", keep=first)
    assert not np.any(second & ~first)
    with pytest.raises(ScheduleError):
        prune_magnitude(w, 0.25, "per-row", keep=first)


# --- OBS -------------------------------------------------------------------


def test_obs_refit_is_least_squares(rng):
    w = rng.standard_normal((1, 6)).astype(np.float32)
    x = rng.standard_normal((40, 6)).astype(np.float32)
    out, keep = prune_obs(w, x, 0.5, damp=1e-10)
    s = np.flatnonzero(keep[0])
    coef, *_ = np.linalg.lstsq(x[:, s].astype(np.float64), x.astype(np.float64) @ w[0], rcond=None)
    np.testing.assert_allclose(out[0, s], coef, rtol=1e-4, atol=1e-6)
    assert not np.any(out[0, ~keep[0]])


def test_obs_greedy_path_beats_magnitude(rng):
    w = rng.standard_normal((8, 64)).astype(np.float32)
    x = (rng.standard_normal((256, 64)) @ rng.standard_normal((64, 64)) * 0.2).astype(np.float32)
    out, keep = prune_obs(w, x, 0.7)
    assert (keep.sum(axis=1) == 64 - prune_count(0.7, 64)).all()
    assert reconstruction_error(w, out, x) < reconstruction_error(w, prune_magnitude(w, 0.7, "per-row")[0], x)


def test_obs_exact_and_greedy_agree_on_easy_case(rng):
    w = rng.standard_normal((3, 8)).astype(np.float32)
    x = rng.standard_normal((64, 8)).astype(np.float32)
    a, ka = prune_obs(w, x, 0.25)
    b, kb = prune_obs(w, x, 0.25, exact_limit=0)
    assert reconstruction_error(w, a, x) <= reconstruction_error(w, b, x) * (1 + 1e-9)


def test_obs_keeps_forced_zeros(rng):
    w = rng.standard_normal((4, 8)).astype(np.float32)
    x = rng.standard_normal((64, 8)).astype(np.float32)
    _, first = prune_obs(w, x, 0.25)
    out, second = prune_obs(w, x, 0.5, keep=first)
    assert not np.any(second & ~first)
    assert not np.any(out[~second])


def test_obs_shape_checks(rng):
    with pytest.raises(ShapeError):
        prune_obs(np.ones((2, 4)), np.ones((8, 3)), 0.5)
    with pytest.raises(ShapeError):
        prune_weights({"a": np.ones((2, 4))}, profile_uniform({"a": 8}, 0.5), "obs")


def test_prune_weights_reports(rng):
    w = {"a": rng.standard_normal((4, 8)).astype(np.float32), "b": rng.standard_normal((6, 8)).astype(np.float32)}
    calib = CalibrationSet({k: rng.standard_normal((32, 8)) for k in w}, 1, 32)
    out, mask, reports = prune_weights(w, profile_uniform(w, 0.5), "obs", calib)
    assert isinstance(mask, SparsityMask)
    assert [r.name for r in reports] == ["a", "b"]
    assert all(r.sparsity == 0.5 and r.recon_error > 0 for r in reports)


def test_iterative_schedule_never_resurrects(rng):
    w = {"a": rng.standard_normal((8, 16)).astype(np.float32)}
    seen = []

    def trainer(weights, mask):
        seen.append(mask)
        return mask.apply({k: v + 0.01 for k, v in weights.items()}), {"steps": 1}

    stages = iterative_prune_schedule(w, [0.5, 0.7], trainer, lambda t: profile_uniform(w, t))
    assert [s.target for s in stages] == [0.5, 0.7]
    assert stages[1].mask.covers(stages[0].mask)
    assert stages[1].mask.sparsity() == pytest.approx(prune_count(0.7, 16) / 16)
    for bad in ([0.7, 0.5], [], [0.5, 1.0]):
        with pytest.raises(ScheduleError):
            iterative_prune_schedule(w, bad, trainer, lambda t: profile_uniform(w, t))


# --- masks -------------------------------------------------------------------


def test_mask_is_frozen_and_hashable(rng):
    m = SparsityMask({"b": rng.random((3, 3)) > 0.5, "a": np.ones((2, 2), bool)})
    assert list(m) == ["a", "b"]
    with pytest.raises(ValueError):
        m["a"][0, 0] = False
    assert m == SparsityMask({k: np.array(v) for k, v in m.items()})
    assert hash(m) == hash(SparsityMask(dict(m)))
    assert SparsityMask.dense({"a": (2, 2)}).sparsity() == 0.0


def test_mask_apply_and_covers():
    m = SparsityMask({"w": np.array([[True, False]])})
    out = m.apply({"w": np.array([[3.0, 4.0]], np.float32), "other": 1})
    assert out["w"].tolist() == [[3.0, 0.0]] and out["other"] == 1
    tighter = SparsityMask({"w": np.array([[False, False]])})
    assert tighter.covers(m) and not m.covers(tighter)
    with pytest.raises(ShapeError):
        m.apply({"w": np.ones((2, 2))})


# --- quantization ------------------------------------------------------------


def test_channel_scales_and_grid():
    w = np.array([[1.27, -0.5], [0.0, 0.0]], np.float32)
    s = channel_scales(w)
    assert s[0] == pytest.approx(0.01) and s[1] == 1.0
    assert round_to_grid(w, s).tolist() == [[127, -50], [0, 0]]
    assert channel_scales(w, Granularity.PER_TENSOR).tolist() == pytest.approx([0.01, 0.01])


def test_smoothing_preserves_product(rng):
    w = rng.standard_normal((5, 6)).astype(np.float32)
    x = (rng.standard_normal((20, 6)) * np.r_[30.0, np.ones(5)]).astype(np.float32)
    ws, s = smooth_activations(w, x, 0.5)
    np.testing.assert_allclose((x / s) @ ws.T, x @ w.T, rtol=1e-4, atol=1e-4)
    assert smooth_activations(w, x, 0.0)[1].tolist() == pytest.approx((1 / np.abs(w).max(axis=0)).tolist(), rel=1e-6)


def test_gptq_sweep_beats_round_to_nearest(rng):
    w = rng.standard_normal((32, 64)).astype(np.float32)
    w[rng.random(w.shape) < 0.5] = 0
    x = (rng.standard_normal((512, 64)) @ rng.standard_normal((64, 64))).astype(np.float32)
    qm = quantize_gptq(w, x)
    rtn = round_to_grid(w, qm.scales) * qm.scales[:, None]
    assert reconstruction_error(w, qm.dequantize(), x) < reconstruction_error(w, rtn, x)
    assert not np.any(qm.q[w == 0])


def test_gptq_exact_rows_match_brute_force(rng):
    for _ in range(10):
        w = rng.standard_normal((1, 3)).astype(np.float32)
        x = rng.standard_normal((12, 3)).astype(np.float32)
        qm = quantize_gptq(w, x)
        s = np.float64(qm.scales[0])
        z = w[0].astype(np.float64) / s
        best = min(itertools.product(*[(np.floor(v), np.ceil(v)) for v in z]),
                   key=lambda c: np.sum((x.astype(np.float64) @ (w[0] - np.clip(c, -127, 127) * s)) ** 2))
        assert qm.q[0].tolist() == np.clip(best, -127, 127).tolist()


def test_quantized_matrix_validation():
    with pytest.raises(ShapeError):
        QuantizedMatrix(np.zeros((2, 2), np.int16), np.ones(2))
    with pytest.raises(ShapeError):
        QuantizedMatrix(np.full((1, 2), -128, np.int8), np.ones(1))
    with pytest.raises(ShapeError):
        QuantizedMatrix(np.zeros((2, 2), np.int8), np.ones(3))
    with pytest.raises(ShapeError):
        QuantizedMatrix(np.zeros((2, 2), np.int8), np.ones(2)).quantize_input(np.ones(2))


def test_quantize_layer_round_trip(rng):
    w = rng.standard_normal((16, 32)).astype(np.float32)
    x = rng.standard_normal((64, 32)).astype(np.float32)
    qm = quantize_layer(w, x, QuantRecipe(alpha=0.5))
    xq = qm.quantize_input(x)
    assert xq.dtype == np.int8 and np.abs(xq).max() <= 127
    approx = (xq.astype(np.float64) * qm.act_scale) @ (qm.q.astype(np.float64) * qm.scales[:, None]).T
    rel = np.abs(approx - x @ w.T).max() / np.abs(x @ w.T).max()
    assert rel < 0.05


def test_kurtosis_skip_selection(rng):
    normal = rng.standard_normal((32, 32))
    heavy = normal.copy()
    heavy[0, 0] = 80.0
    weights = {"a": normal, "b": heavy, "c": np.ones((4, 4))}
    assert weight_kurtosis(np.ones((4, 4))) == float("-inf")
    assert select_skip_layers(weights, 1) == {"b"}
    assert select_skip_layers(weights, 0) == set()
    with pytest.raises(ValueError):
        select_skip_layers(weights, 4)


def test_quantize_weights_skips_and_preserves_masks(rng):
    weights = {f"l{i}": rng.standard_normal((8, 16)).astype(np.float32) for i in range(3)}
    weights["l1"][0, 0] = 50.0
    for w in weights.values():
        w[rng.random(w.shape) < 0.6] = 0
    calib = CalibrationSet({k: rng.standard_normal((32, 16)) for k in weights}, 1, 32)
    qms, skip, reports = quantize_weights(weights, calib, QuantRecipe(skip_top_k_kurtosis=1))
    assert skip == {"l1"} and set(qms) == {"l0", "l2"}
    for k, qm in qms.items():
        assert not np.any(qm.q[weights[k] == 0])
    assert [r.skipped for r in reports] == [False, True, False]


def test_quant_recipe_validation():
    with pytest.raises(ValueError):
        QuantRecipe(alpha=1.5)
    with pytest.raises(ValueError):
        QuantRecipe(skip_top_k_kurtosis=-1)
