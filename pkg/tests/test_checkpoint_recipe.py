import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsellm.checkpoint import Checkpoint, load_checkpoint, read_manifest, save_checkpoint
from sparsellm.compression import QuantizedMatrix
from sparsellm.errors import CheckpointError, RecipeError
from sparsellm.masks import SparsityMask
from sparsellm.model import ModelConfig, init_params, linear_names
from sparsellm.recipe import SCHEMA, Recipe, load_recipe, parse, serialize

CFG = ModelConfig(vocab=32, d_model=16, n_heads=2, n_layers=1, d_ff=32, max_ctx=16)


def _sparse_ckpt():
    params = init_params(CFG, 0)
    r = np.random.default_rng(0)
    mask = SparsityMask({n: r.random(params[n].shape) < 0.4 for n in linear_names(CFG)})
    params = mask.apply(params)
    q = np.zeros((16, 16), np.int8)
    q[mask["layers.0.attn.q"]] = 3
    qm = QuantizedMatrix(q, np.full(16, 0.5, np.float32), np.ones(16, np.float32), 0.25)
    return Checkpoint(CFG, params, mask, {"layers.0.attn.q": qm}, {"note": "x"}, Recipe().to_dict(), 7)


# --- checkpoints ---------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    ckpt = _sparse_ckpt()
    save_checkpoint(ckpt, tmp_path / "c")
    back = load_checkpoint(tmp_path / "c")
    assert back.cfg == CFG and back.seed == 7 and back.metadata == {"note": "x"}
    assert back.mask == ckpt.mask
    assert all(np.array_equal(back.params[k], ckpt.params[k]) for k in ckpt.params)
    qm = back.quantized["layers.0.attn.q"]
    assert np.array_equal(qm.q, ckpt.quantized["layers.0.attn.q"].q) and qm.act_scale == 0.25
    assert back.layer_sparsity() == ckpt.layer_sparsity()


def test_checkpoint_bytes_are_reproducible(tmp_path):
    for d in ("a", "b"):
        save_checkpoint(_sparse_ckpt(), tmp_path / d)
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_sparse_tensor_files_are_small(tmp_path):
    save_checkpoint(_sparse_ckpt(), tmp_path)
    entry = read_manifest(tmp_path)["tensors"]["layers.0.mlp.up"]
    assert entry["footprint_ratio"] < 0.5


def test_checkpoint_rejects_weights_outside_mask(tmp_path):
    ckpt = _sparse_ckpt()
    ckpt.params["layers.0.attn.k"] = np.ones((16, 16), np.float32)
    with pytest.raises(CheckpointError, match="outside the mask"):
        save_checkpoint(ckpt, tmp_path)


@pytest.mark.parametrize("damage", ["hash", "missing", "format", "json"])
def test_checkpoint_corruption_detected(tmp_path, damage):
    save_checkpoint(_sparse_ckpt(), tmp_path)
    man = tmp_path / "manifest.json"
    if damage == "hash":
        f = tmp_path / "head.spkt"
        data = bytearray(f.read_bytes())
        data[-1] ^= 1
        f.write_bytes(bytes(data))
    elif damage == "missing":
        (tmp_path / "norm_f.spkt").unlink()
    elif damage == "format":
        m = json.loads(man.read_text())
        m["format_version"] = 99
        man.write_text(json.dumps(m))
    else:
        man.write_text("{")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)


def test_checkpoint_unknown_quantized_layer():
    ckpt = _sparse_ckpt()
    with pytest.raises(CheckpointError):
        Checkpoint(CFG, ckpt.params, quantized={"head": ckpt.quantized["layers.0.attn.q"]})
    with pytest.raises(CheckpointError):
        read_manifest("/nonexistent/path")


# --- recipes -------------------------------------------------------------------


def test_defaults_fill_every_key():
    r = Recipe()
    assert set(r) == set(SCHEMA)
    assert r["train"]["patience"] == 5 and r["profile"]["kind"] == "uniform"
    assert r["bench"]["levels"] == (0.0, 0.5, 0.7)


def test_parse_serialize_identity(tmp_path):
    text = "[profile]\nkind = owl\ntarget = 0.6\n[train]\ndistill = yes\npatience = none\nsparsity_targets = 0.5,0.8\n"
    r = parse(text)
    assert r["profile"]["kind"] == "owl" and r["train"]["distill"] is True and r["train"]["patience"] is None
    canon = serialize(r)
    assert parse(canon) == r
    assert serialize(parse(canon)) == canon
    path = tmp_path / "r.ini"
    path.write_text(canon)
    assert load_recipe(path) == r


@pytest.mark.parametrize("text,key", [
    ("[prune]\nmethod = sparsegpt\n", "prune.method"),
    ("[prune]\nbogus = 1\n", "prune.bogus"),
    ("[nosuch]\na = 1\n", "nosuch"),
    ("[bench]\nrepeats = 3\n", "bench.repeats"),
    ("[profile]\ntarget = 1.0\n", "profile.target"),
    ("[train]\nsteps = many\n", "train.steps"),
    ("[train]\nsteps = 1\nsteps = 2\n", "train.steps"),
    ("[train]\ndistill = maybe\n", "train.distill"),
    ("[quant]\nalpha = nan\n", "quant.alpha"),
])
def test_invalid_recipes_name_the_key(text, key):
    with pytest.raises(RecipeError) as info:
        parse(text)
    assert info.value.key == key


def test_overrides_win_and_are_validated():
    r = parse("[profile]\ntarget = 0.5\n").with_overrides({"profile.target": 0.7})
    assert r["profile"]["target"] == 0.7
    with pytest.raises(RecipeError):
        r.with_overrides({"profile.nope": 1})
    assert r.digest() != Recipe().digest()
    assert hash(r) == hash(parse(serialize(r)))


_floats01 = st.floats(0, 0.99, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(target=_floats01, lam=st.floats(0, 1), steps=st.integers(0, 10**6), distill=st.booleans(),
       patience=st.one_of(st.none(), st.integers(1, 50)), levels=st.lists(_floats01, min_size=1, max_size=5),
       kind=st.sampled_from(["uniform", "owl"]))
def test_recipe_round_trip_property(target, lam, steps, distill, patience, levels, kind):
    r = Recipe({"profile": {"target": target, "owl_lambda": lam, "kind": kind},
                "train": {"steps": steps, "distill": distill, "patience": patience},
                "bench": {"levels": levels}})
    assert parse(serialize(r)) == r
