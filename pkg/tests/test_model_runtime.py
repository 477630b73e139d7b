import numpy as np
import pytest
import torch

from sparsellm.compression import CalibrationSet, QuantRecipe, profile_uniform, prune_weights, quantize_weights
from sparsellm.errors import ContextError, ShapeError
from sparsellm.model import ModelConfig, check_params, init_params, linear_names, param_shapes
from sparsellm.runtime import (
    Backend,
    GenRequest,
    KVCache,
    ToyTransformer,
    capture_inputs,
    decode_step,
    forward_full,
    generate,
    generate_recompute,
    prefill,
)
from sparsellm.runtime.ops import causal_attention, rmsnorm
from sparsellm.tensors import Rng, array_digest, kurtosis, matmul, rel_error, sparsity_of
from sparsellm.training import TorchTransformer

CFG = ModelConfig(vocab=64, d_model=32, n_heads=4, n_layers=2, d_ff=64, max_ctx=48)


@pytest.fixture(scope="module")
def params():
    return init_params(CFG, 0)


def test_config_validation():
    with pytest.raises(ShapeError):
        ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ShapeError):
        ModelConfig(n_layers=0)
    assert ModelConfig.from_dict(CFG.to_dict()) == CFG


def test_param_names_and_shapes(params):
    assert linear_names(CFG)[:6] == ["layers.0.attn.q", "layers.0.attn.k", "layers.0.attn.v",
                                     "layers.0.attn.o", "layers.0.mlp.up", "layers.0.mlp.down"]
    assert param_shapes(CFG)["layers.1.mlp.down"] == (32, 64)
    check_params(CFG, params)
    bad = dict(params)
    del bad["head"]
    with pytest.raises(ShapeError, match="head"):
        check_params(CFG, bad)


def test_init_is_seeded():
    a, b, c = init_params(CFG, 1), init_params(CFG, 1), init_params(CFG, 2)
    assert array_digest(*a.values()) == array_digest(*b.values())
    assert array_digest(*a.values()) != array_digest(*c.values())


def test_rng_substreams_are_stable():
    r = Rng(7)
    assert r.substream("x").seed == Rng(7).substream("x").seed
    assert r.substream("x").seed != r.substream("y").seed
    with pytest.raises(ValueError):
        Rng(-1)


def test_tensor_helpers():
    assert kurtosis(np.r_[np.zeros(50), np.ones(50)]) == pytest.approx(1.0)
    assert sparsity_of([0, 0, 1, 2]) == 0.5
    assert rel_error([1.0, 2.1], [1.0, 2.0]) == pytest.approx(0.05)
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones(4))


def test_rmsnorm_and_attention_oracles(rng):
    x = rng.standard_normal((3, 8)).astype(np.float32)
    g = rng.standard_normal(8).astype(np.float32)
    ref = x / np.sqrt(np.mean(x.astype(np.float64) ** 2, axis=1, keepdims=True) + 1e-5) * g
    np.testing.assert_allclose(rmsnorm(x, g, 1e-5), ref, rtol=1e-5)
    q = rng.standard_normal((4, 8)).astype(np.float32)
    k = rng.standard_normal((6, 8)).astype(np.float32)
    v = rng.standard_normal((6, 8)).astype(np.float32)
    out = causal_attention(q, k, v, 0, 2)
    for t in range(4):
        for h in range(2):
            sl = slice(4 * h, 4 * h + 4)
            s = k[: t + 1, sl] @ q[t, sl] / 2.0
            w = np.exp(s - s.max())
            np.testing.assert_allclose(out[t, sl], (w / w.sum()) @ v[: t + 1, sl], rtol=1e-4, atol=1e-6)


def test_numpy_runtime_matches_torch(params):
    ids = np.arange(20) % CFG.vocab
    ref = TorchTransformer(CFG, params)(torch.tensor(ids[None])).detach().numpy()[0]
    np.testing.assert_allclose(forward_full(ToyTransformer(CFG, params), ids), ref, rtol=1e-4, atol=1e-4)


def test_incremental_decode_is_bit_identical_to_full_forward(params):
    model = ToyTransformer(CFG, params)
    ids = [3, 14, 15, 9, 26, 5, 35]
    full = forward_full(model, ids)
    cache, last, _ = prefill(model, ids[:3])
    assert np.array_equal(last, full[2])
    for t in range(3, len(ids)):
        logits, cache, ns = decode_step(model, cache, ids[t])
        assert np.array_equal(logits, full[t])
        assert ns >= 0
    assert cache.length == len(ids)


@pytest.mark.parametrize("backend", list(Backend))
def test_cached_generation_equals_recompute(params, backend):
    weights, _, _ = prune_weights(params, profile_uniform({n: params[n] for n in linear_names(CFG)}, 0.5),
                                  "magnitude", scope="per-layer")
    quantized = None
    if backend.quantized:
        seqs = [list(range(i, i + 16)) for i in range(4)]
        calib = CalibrationSet(capture_inputs(ToyTransformer(CFG, weights), seqs), 4, 16)
        quantized, _, _ = quantize_weights({n: weights[n] for n in linear_names(CFG)}, calib, QuantRecipe())
    model = ToyTransformer(CFG, weights, backend, quantized)
    req = GenRequest((1, 2, 3, 4), 12)
    res = generate(model, req)
    assert res.tokens == generate_recompute(model, req)
    assert len(res.decode_ns) == 11


def test_sparse_backend_matches_dense_on_pruned_weights(params):
    weights, _, _ = prune_weights(params, profile_uniform({n: params[n] for n in linear_names(CFG)}, 0.7),
                                  "magnitude", scope="per-layer")
    ids = list(range(10))
    dense = forward_full(ToyTransformer(CFG, weights, Backend.DENSE), ids)
    sparse_model = ToyTransformer(CFG, weights, Backend.SPARSE)
    np.testing.assert_allclose(forward_full(sparse_model, ids), dense, rtol=1e-4, atol=1e-5)
    assert sparse_model.footprint_ratio() < 0.5
    flops = sparse_model.linear_flops(1)
    assert flops.ratio == pytest.approx(0.3, abs=0.01)


def test_context_limits(params):
    model = ToyTransformer(CFG, params)
    with pytest.raises(ContextError):
        forward_full(model, [0] * (CFG.max_ctx + 1))
    with pytest.raises(ContextError):
        generate(model, GenRequest((0,) * 40, 9))
    cache = KVCache.empty(CFG)
    cache.length = CFG.max_ctx
    with pytest.raises(ContextError):
        decode_step(model, cache, 0)
    with pytest.raises(ShapeError):
        forward_full(model, [CFG.vocab])
    with pytest.raises(ShapeError):
        prefill(model, [])


def test_gen_request_validation(params):
    with pytest.raises(ValueError):
        GenRequest((1,), 2, greedy=False)
    with pytest.raises(ValueError):
        GenRequest((1,), -1)
    assert generate(ToyTransformer(CFG, params), GenRequest((1,), 0)).tokens == ()


def test_mixed_backends_and_capture(params):
    first = linear_names(CFG)[0]
    model = ToyTransformer(CFG, params, backends={first: "sparse"})
    assert model.backends[first] == "sparse"
    acts = capture_inputs(model, [[1, 2, 3], [4, 5]])
    assert acts[first].shape == (5, CFG.d_model)
    assert acts["layers.0.mlp.down"].shape == (5, CFG.d_ff)
