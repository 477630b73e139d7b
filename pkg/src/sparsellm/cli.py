"""Command-line entry point: prune, quantize, train, bench, inspect, sweep."""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import __version__
from .checkpoint import MANIFEST, Checkpoint, load_checkpoint, read_manifest, save_checkpoint
from .codec import Layout, StorageDtype, encode_matrix, footprint, from_bytes, read_header
from .compression import Method, QuantRecipe, Scope, prune_magnitude, prune_weights, quantize_weights
from .compression.profiles import profile_owl, profile_uniform
from .errors import CheckpointError, SparseLLMError
from .kernels.bench import KERNEL_CSV_COLUMNS, Workload, bench_dense, bench_kernel, kernel_csv_row, write_csv
from .masks import SparsityMask
from .model import ModelConfig, init_params, linear_names
from .recipe import Recipe, load_recipe
from .tensors import Rng

OUT_ENV = "SPARSELLM_OUT"
EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: kind=UsageError msg={message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _floats(text: str) -> tuple:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _shape(text: str) -> tuple:
    try:
        r, c = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected ROWSxCOLS, got {text!r}") from None
    return r, c


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "sparsellm-out")) / args.command


@contextlib.contextmanager
def _locked(out: Path):
    out.parent.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out) + ".lock")
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise CheckpointError(f"output directory {out} is locked by another run") from None
    try:
        out.mkdir(parents=True, exist_ok=True)
        yield out
    finally:
        lock.release()


def _resolve_recipe(args, overrides: dict) -> Recipe:
    base = load_recipe(args.recipe) if getattr(args, "recipe", None) else Recipe()
    return base.with_overrides({k: v for k, v in overrides.items() if v is not None})


def _input_digest(path) -> str:
    p = Path(path)
    target = p / MANIFEST if p.is_dir() else p
    return hashlib.sha256(target.read_bytes()).hexdigest()


def _input_record(path) -> dict:
    # name plus content hash: the absolute location would make identical runs differ
    return {"in": Path(path).name, "in_sha256": _input_digest(path)}


def _run_record(args, recipe: Recipe, seed: int, inputs: dict) -> dict:
    """Everything needed to re-run the command; the output location is deliberately left out."""
    return {
        "command": args.command,
        "inputs": inputs,
        "recipe": recipe.to_dict(),
        "recipe_sha256": recipe.digest(),
        "seed": seed,
        "toolkit_version": __version__,
    }


def _write_run_manifest(out: Path, record: dict, outputs: list) -> None:
    data = dict(record, outputs=sorted(outputs))
    (out / MANIFEST).write_text(json.dumps(data, sort_keys=True, indent=2) + "\n")


def _emit(fh, record: dict) -> None:
    line = json.dumps(record, sort_keys=True)
    print(line)
    if fh is not None:
        fh.write(line + "\n")


def _calibration(cfg: ModelConfig, params, recipe: Recipe, seed: int):
    from .training import calibrate, pretrain_mixture

    mix = pretrain_mixture(50_000, seed)
    stream = np.concatenate([s.tokens for s in mix.sources])
    return calibrate(cfg, params, stream, recipe["prune"]["calib_samples"], recipe["prune"]["calib_seq_len"], seed)


def _report_csv(path: Path, rows: list, columns: tuple) -> None:
    write_csv(path, rows, columns)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_prune(args) -> int:
    recipe = _resolve_recipe(args, {"profile.target": args.target, "profile.kind": args.profile,
                                    "prune.method": args.method})
    ckpt = load_checkpoint(args.input)
    cfg, seed = ckpt.cfg, args.seed
    names = linear_names(cfg)
    pr = recipe["prune"]
    method = Method(pr["method"])
    prof = recipe["profile"]
    need_calib = method == Method.OBS or prof["kind"] == "owl"
    calib = _calibration(cfg, ckpt.params, recipe, seed) if need_calib else None
    layers = {n: ckpt.params[n] for n in names}
    if prof["kind"] == "owl":
        profile = profile_owl(calib, layers, prof["target"], prof["owl_lambda"], prof["owl_m"])
    else:
        profile = profile_uniform(layers, prof["target"])
    params, mask, reports = prune_weights(ckpt.params, profile, method, calib, pr["damp"], Scope(pr["scope"]),
                                          ckpt.mask)
    record = _run_record(args, recipe, seed, _input_record(args.input))
    with _locked(_out_dir(args)) as out:
        meta = dict(ckpt.metadata, run=record, profile_notice=profile.notice)
        save_checkpoint(Checkpoint(cfg, params, mask, {}, meta, recipe.to_dict(), seed), out)
        _report_csv(out / "report.csv", [
            {"layer": r.name, "target": r.target, "sparsity": r.sparsity, "recon_error": r.recon_error}
            for r in reports], ("layer", "target", "sparsity", "recon_error"))
    print(json.dumps({"event": "pruned", "sparsity": mask.sparsity(), "notice": profile.notice}, sort_keys=True))
    return EXIT_OK


def cmd_quantize(args) -> int:
    recipe = _resolve_recipe(args, {"quant.skip_top_k": args.skip_top_k, "quant.alpha": args.alpha})
    ckpt = load_checkpoint(args.input)
    cfg, seed = ckpt.cfg, args.seed
    q = recipe["quant"]
    qr = QuantRecipe(q["alpha"], q["skip_top_k"], q["group"], q["damp"])
    calib = _calibration(cfg, ckpt.params, recipe, seed)
    names = linear_names(cfg)
    quantized, skipped, reports = quantize_weights({n: ckpt.params[n] for n in names}, calib, qr)
    record = _run_record(args, recipe, seed, _input_record(args.input))
    with _locked(_out_dir(args)) as out:
        meta = dict(ckpt.metadata, run=record, skipped_layers=sorted(skipped))
        save_checkpoint(Checkpoint(cfg, ckpt.params, ckpt.mask, quantized, meta, recipe.to_dict(), seed), out)
        _report_csv(out / "report.csv", [
            {"layer": r.name, "skipped": r.skipped, "kurtosis": r.kurtosis, "recon_error": r.recon_error,
             "sparsity": r.sparsity} for r in reports],
            ("layer", "skipped", "kurtosis", "recon_error", "sparsity"))
    print(json.dumps({"event": "quantized", "layers": len(quantized), "skipped": sorted(skipped)}, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    import torch

    from .training import (
        DistillConfig,
        FinetuneConfig,
        FinetuneMode,
        ModelState,
        TaskData,
        TrainConfig,
        dense_finetune,
        pretrain_mixture,
        run_finetune,
        sparse_pretrain,
        train,
    )

    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    recipe = _resolve_recipe(args, {"train.mode": args.mode, "train.sparsity_targets": args.sparsity_targets,
                                    "train.steps": args.steps, "train.distill": args.distill})
    t = recipe["train"]
    seed = args.seed
    targets = t["sparsity_targets"]
    if not targets:
        raise ValueError("train.sparsity_targets must name at least one level")
    mode = FinetuneMode(t["mode"])
    tcfg = TrainConfig(t["steps"], t["lr"], t["momentum"], t["batch_size"], t["seq_len"], t["eval_every"], 64)
    distill = (DistillConfig(t["lambda_logit"], t["lambda_feature"], t["temperature"], t["teacher"])
               if t["distill"] else None)
    pr = recipe["prune"]
    fcfg = FinetuneConfig(tcfg, pr["method"], pr["scope"], recipe["profile"]["kind"], distill,
                          calib_samples=pr["calib_samples"], calib_seq_len=pr["calib_seq_len"], damp=pr["damp"])
    inputs = {}
    with _locked(_out_dir(args)) as out, open(out / "metrics.jsonl", "w") as fh:
        def log(rec):
            _emit(fh, rec)

        if args.input:
            ckpt = load_checkpoint(args.input)
            if ckpt.mask is not None:
                raise CheckpointError("train starts from a dense checkpoint")
            cfg, base = ckpt.cfg, ckpt.params
            inputs = _input_record(args.input)
        else:
            cfg = ModelConfig()
            mix = pretrain_mixture(100_000, seed)
            base, m = train(cfg, init_params(cfg, seed), mix,
                            TrainConfig(t["pretrain_steps"], t["lr"], t["momentum"], t["batch_size"], t["seq_len"], 0),
                            seed)
            log({"event": "dense-pretrain", "steps": m["steps"], "train_loss": m["final_train_loss"]})
        task = TaskData.arithmetic(seed=seed)
        target = targets[-1]
        reference = None
        if mode == FinetuneMode.SPARSE_PRETRAINED_THEN_SPARSE_FT:
            mix = pretrain_mixture(100_000, seed)
            sp_cfg = TrainConfig(t["sparse_pretrain_steps"], t["lr"], t["momentum"], t["batch_size"], t["seq_len"],
                                 t["eval_every"], 64, t["patience"])
            start, recs = sparse_pretrain(cfg, base, mix, targets, sp_cfg, seed, fcfg)
            for r in recs:
                log({"event": "stage", **r})
            reference, _ = dense_finetune(cfg, base, task, tcfg, seed)
            teacher = base
        else:
            start, teacher = ModelState(base), None
        result = run_finetune(mode, cfg, start, task, target, fcfg, seed, reference, teacher, log=log)
        log({"event": "result", **{k: v for k, v in result.metrics().items() if k != "stages"}})
        record = _run_record(args, recipe, seed, inputs)
        mask = result.state.mask
        if mask is not None and mask.sparsity() == 0.0:
            mask = None
        save_checkpoint(Checkpoint(cfg, result.state.params, mask, {}, {"run": record, "metrics": result.metrics()},
                                   recipe.to_dict(), seed), out)
    return EXIT_OK


def cmd_bench(args) -> int:
    recipe = _resolve_recipe(args, {"bench.levels": args.levels, "bench.repeats": args.repeats,
                                    "bench.layout": args.layout})
    b = recipe["bench"]
    rows_n, cols_n = args.shape
    layout = Layout.TILE if b["layout"] == "tile" else Layout.ROWPAIR16
    dtype = StorageDtype.INT8 if args.dtype == "int8" else StorageDtype.REAL32
    workload = Workload.parse(args.workload)
    rng = Rng(args.seed).substream("bench")
    base = rng.normal((rows_n, cols_n))
    if dtype == StorageDtype.INT8:
        base = np.clip(np.rint(base * 40), -127, 127)
    shape = f"{rows_n}x{cols_n}"
    rows = []
    timing, flops = bench_dense(base.astype(dtype.numpy), workload, b["repeats"], args.seed)
    rows.append(kernel_csv_row((rows_n, cols_n), "dense", dtype.name.lower(), 0.0, timing, flops))
    for s in b["levels"]:
        w, _ = prune_magnitude(base, s, Scope.PER_LAYER)
        sm = encode_matrix(w.astype(dtype.numpy), layout, dtype)
        timing, flops = bench_kernel(sm, workload, b["repeats"], args.seed)
        rows.append(kernel_csv_row((rows_n, cols_n), layout.name.lower(), dtype.name.lower(), s, timing, flops))
    record = _run_record(args, recipe, args.seed, {"shape": shape, "dtype": args.dtype, "workload": args.workload})
    with _locked(_out_dir(args)) as out:
        write_csv(out / "kernels.csv", rows, KERNEL_CSV_COLUMNS)
        _write_run_manifest(out, record, ["kernels.csv"])
    for r in rows:
        print(json.dumps(r, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .runtime.sweep import SweepSpec, run_sweep, write_sweep_csv

    recipe = _resolve_recipe(args, {"bench.levels": args.levels, "bench.quant": args.quant,
                                    "bench.prefill": args.prefill, "bench.decode": args.decode,
                                    "bench.repeats": args.repeats, "bench.layout": args.layout})
    b = recipe["bench"]
    inputs = {}
    if args.input:
        ckpt = load_checkpoint(args.input)
        cfg, params = ckpt.cfg, ckpt.params
        inputs = _input_record(args.input)
    else:
        cfg = ModelConfig(d_model=b["d_model"], d_ff=b["d_ff"], n_layers=b["n_layers"],
                          n_heads=4 if b["d_model"] % 4 == 0 else 1)
        params = None
    spec = SweepSpec(b["levels"], b["quant"], b["prefill"], b["decode"], b["repeats"],
                     Layout.TILE if b["layout"] == "tile" else Layout.ROWPAIR16)
    q = recipe["quant"]
    rows = run_sweep(cfg, spec, args.seed, params, QuantRecipe(q["alpha"], q["skip_top_k"], q["group"], q["damp"]))
    record = _run_record(args, recipe, args.seed, inputs)
    with _locked(_out_dir(args)) as out:
        write_sweep_csv(out / "sweep.csv", rows)
        _write_run_manifest(out, record, ["sweep.csv"])
    for r in rows:
        print(json.dumps(r, sort_keys=True))
    return EXIT_OK


def _inspect_file(path: Path) -> None:
    data = path.read_bytes()
    header = read_header(data)
    sm = from_bytes(data)
    fp = footprint(sm)
    print("header")
    for k, v in header.items():
        print(f"  {k:10s} {v}")
    print(f"sparsity   {sm.sparsity:.6f}")
    print(f"footprint  {fp.compressed_bytes} / {fp.dense_bytes} bytes (ratio {fp.ratio:.6f})")


def _inspect_checkpoint(path: Path) -> None:
    manifest = read_manifest(path)
    cfg = manifest["config"]
    print(f"checkpoint {path} (format {manifest['format_version']}, toolkit {manifest['toolkit_version']})")
    print("config     " + " ".join(f"{k}={cfg[k]}" for k in sorted(cfg)))
    print(f"seed       {manifest['seed']}")
    print(f"{'layer':24s} {'shape':>10s} {'sparsity':>9s} {'footprint':>9s} {'int8':>5s}")
    tensors, quant = manifest["tensors"], manifest["quantized"]
    total_nnz = total = 0
    for name, s in sorted(manifest["layer_sparsity"].items()):
        e = tensors[name]
        shape = "x".join(str(d) for d in e["shape"])
        total += int(np.prod(e["shape"]))
        total_nnz += e["nnz"]
        print(f"{name:24s} {shape:>10s} {s:9.4f} {e['footprint_ratio']:9.4f} {'yes' if name in quant else 'no':>5s}")
    print(f"overall sparsity {1.0 - total_nnz / total:.4f}")


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if path.is_dir():
        _inspect_checkpoint(path)
    elif path.exists():
        _inspect_file(path)
    else:
        raise CheckpointError(f"no such file or checkpoint: {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sparsellm", description="Sparse and int8 compression toolkit for small transformers.")
    parser.add_argument("--version", action="version", version=f"sparsellm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, needs_input=False):
        p.add_argument("--recipe", help="INI recipe file; flags override its keys")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")
        if needs_input:
            p.add_argument("--in", dest="input", required=True, help="input checkpoint directory")

    p = sub.add_parser("prune", help="one-shot prune a checkpoint")
    common(p, True)
    p.add_argument("--target", type=float)
    p.add_argument("--profile", choices=("uniform", "owl"))
    p.add_argument("--method", choices=("obs", "magnitude"))
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("quantize", help="int8 weight and activation quantization")
    common(p, True)
    p.add_argument("--skip-top-k", type=int)
    p.add_argument("--alpha", type=float)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("train", help="run a fine-tuning pipeline")
    common(p)
    p.add_argument("--in", dest="input", help="dense starting checkpoint (default: pretrain a fresh toy model)")
    p.add_argument("--mode", choices=("dense-then-oneshot", "prune-during-finetune", "oneshot-then-sparse-ft",
                                      "sparse-pretrained-then-sparse-ft"))
    p.add_argument("--sparsity-targets", type=_floats)
    p.add_argument("--steps", type=int)
    p.add_argument("--distill", action=argparse.BooleanOptionalAction, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="kernel timing sweep to CSV")
    common(p)
    p.add_argument("--shape", type=_shape, default=(4096, 4096))
    p.add_argument("--levels", type=_floats)
    p.add_argument("--layout", choices=("rowpair16", "tile"))
    p.add_argument("--dtype", choices=("real32", "int8"), default="real32")
    p.add_argument("--workload", default="gemv", help="gemv or gemm:<batch>")
    p.add_argument("--repeats", type=int)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="prefill/decode throughput sweep to CSV")
    common(p)
    p.add_argument("--in", dest="input", help="checkpoint to benchmark (default: random toy model)")
    p.add_argument("--levels", type=_floats)
    p.add_argument("--quant", choices=("off", "on", "both"))
    p.add_argument("--prefill", type=int)
    p.add_argument("--decode", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--layout", choices=("rowpair16", "tile"))
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("inspect", help="describe a .spkt file or checkpoint directory")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return parser


def _error_line(exc: BaseException) -> str:
    parts = [f"kind={type(exc).__name__}"]
    key = getattr(exc, "key", None)
    if key:
        parts.append(f"key={key}")
    msg = " ".join(str(exc).split())
    parts.append(f"msg={msg}")
    return "error: " + " ".join(parts)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except (SparseLLMError, ValueError, OSError) as exc:
        print(_error_line(exc), file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
