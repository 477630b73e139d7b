"""Plain-text INI recipes: typed keys per section, unknown keys rejected.

``serialize`` writes every key in schema order with a canonical value
spelling, so ``parse(serialize(r)) == r`` and ``serialize(parse(t)) == t``
for any canonical text ``t``.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from collections.abc import Mapping
from dataclasses import dataclass
from types import MappingProxyType

from .errors import RecipeError


@dataclass(frozen=True)
class Key:
    kind: str  # float | int | bool | str | floats | optint
    default: object
    choices: tuple = ()
    low: float | None = None
    high: float | None = None


SCHEMA = {
    "profile": {
        "kind": Key("str", "uniform", ("uniform", "owl")),
        "target": Key("float", 0.5, low=0.0, high=0.999999),
        "owl_lambda": Key("float", 0.08, low=0.0, high=1.0),
        "owl_m": Key("float", 5.0, low=1e-9),
    },
    "prune": {
        "method": Key("str", "obs", ("obs", "magnitude")),
        "scope": Key("str", "per-row", ("per-row", "per-layer")),
        "damp": Key("float", 0.01, low=1e-12),
        "calib_samples": Key("int", 16, low=1),
        "calib_seq_len": Key("int", 64, low=1),
    },
    "quant": {
        "alpha": Key("float", 0.5, low=0.0, high=1.0),
        "skip_top_k": Key("int", 0, low=0),
        "group": Key("str", "per-channel", ("per-channel", "per-tensor")),
        "damp": Key("float", 0.01, low=1e-12),
    },
    "train": {
        "mode": Key("str", "sparse-pretrained-then-sparse-ft",
                    ("dense-then-oneshot", "prune-during-finetune", "oneshot-then-sparse-ft",
                     "sparse-pretrained-then-sparse-ft")),
        "sparsity_targets": Key("floats", (0.5, 0.7)),
        "pretrain_steps": Key("int", 800, low=0),
        "sparse_pretrain_steps": Key("int", 400, low=0),
        "steps": Key("int", 400, low=0),
        "lr": Key("float", 0.05, low=1e-12),
        "momentum": Key("float", 0.9, low=0.0, high=0.999999),
        "batch_size": Key("int", 16, low=1),
        "seq_len": Key("int", 64, low=1),
        "eval_every": Key("int", 100, low=0),
        "patience": Key("optint", 5, low=1),
        "distill": Key("bool", False),
        "lambda_logit": Key("float", 1.0, low=0.0),
        "lambda_feature": Key("float", 1.0, low=0.0),
        "temperature": Key("float", 2.0, low=1e-12),
        "teacher": Key("str", "dense-finetuned", ("dense-finetuned", "dense-base")),
    },
    "bench": {
        "levels": Key("floats", (0.0, 0.5, 0.7)),
        "quant": Key("str", "both", ("off", "on", "both")),
        "prefill": Key("int", 512, low=1),
        "decode": Key("int", 128, low=1),
        "repeats": Key("int", 5, low=5),
        "layout": Key("str", "rowpair16", ("rowpair16", "tile")),
        "d_model": Key("int", 64, low=1),
        "d_ff": Key("int", 256, low=1),
        "n_layers": Key("int", 2, low=1),
    },
}


def _format(key: Key, v) -> str:
    if key.kind == "float":
        return repr(float(v))
    if key.kind == "floats":
        return ", ".join(repr(float(x)) for x in v)
    if key.kind == "bool":
        return "true" if v else "false"
    if key.kind == "optint":
        return "none" if v is None else str(int(v))
    return str(v)


def _coerce(section: str, name: str, key: Key, raw) -> object:
    label = f"{section}.{name}"
    try:
        if key.kind == "float":
            v = float(raw)
        elif key.kind == "int":
            v = int(raw)
        elif key.kind == "optint":
            v = None if raw is None or str(raw).strip().lower() == "none" else int(raw)
        elif key.kind == "bool":
            if isinstance(raw, bool):
                v = raw
            else:
                s = str(raw).strip().lower()
                if s not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                    raise ValueError(raw)
                v = s in ("true", "yes", "1", "on")
        elif key.kind == "floats":
            items = raw.split(",") if isinstance(raw, str) else list(raw)
            v = tuple(float(x) for x in items if str(x).strip())
        else:
            v = str(raw).strip()
    except (TypeError, ValueError):
        raise RecipeError(label, f"expected {key.kind}, got {raw!r}") from None
    if key.choices and v not in key.choices:
        raise RecipeError(label, f"must be one of {', '.join(key.choices)}, got {v!r}")
    values = v if key.kind == "floats" else ((v,) if isinstance(v, (int, float)) and not isinstance(v, bool) else ())
    for x in values:
        if x != x or (key.low is not None and x < key.low) or (key.high is not None and x > key.high):
            raise RecipeError(label, f"value {x!r} out of range [{key.low}, {key.high}]")
    return v


class Recipe(Mapping):
    """Read-only ``{section: {key: value}}`` with every schema key present."""

    def __init__(self, values: Mapping | None = None):
        values = values or {}
        for section in values:
            if section not in SCHEMA:
                raise RecipeError(section, "unknown section")
        out = {}
        for section, keys in SCHEMA.items():
            given = dict(values.get(section, {}))
            for name in given:
                if name not in keys:
                    raise RecipeError(f"{section}.{name}", "unknown key")
            out[section] = MappingProxyType({
                name: _coerce(section, name, key, given[name]) if name in given else key.default
                for name, key in keys.items()
            })
        self._values = out

    def __getitem__(self, section):
        return self._values[section]

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def __eq__(self, other):
        return isinstance(other, Recipe) and self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(self.digest())

    def __repr__(self):
        return f"Recipe({self.to_dict()!r})"

    def to_dict(self) -> dict:
        return {s: {k: (list(v) if isinstance(v, tuple) else v) for k, v in keys.items()}
                for s, keys in self._values.items()}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def with_overrides(self, overrides: Mapping) -> "Recipe":
        """``overrides`` maps ``"section.key"`` to a value (flags win over file keys)."""
        merged = {s: dict(keys) for s, keys in self._values.items()}
        for dotted, v in overrides.items():
            section, _, name = dotted.partition(".")
            if section not in SCHEMA:
                raise RecipeError(dotted, "unknown section")
            merged[section][name] = v
        return Recipe(merged)


def parse(text: str) -> Recipe:
    cp = configparser.ConfigParser(interpolation=None, default_section="__no_default__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.DuplicateOptionError as exc:
        raise RecipeError(f"{exc.section}.{exc.option}", "duplicate key") from None
    except configparser.Error as exc:
        raise RecipeError("recipe", str(exc).splitlines()[0]) from None
    return Recipe({s: dict(cp[s]) for s in cp.sections()})


def serialize(recipe: Recipe) -> str:
    lines = []
    for section, keys in SCHEMA.items():
        if lines:
            lines.append("")
        lines.append(f"[{section}]")
        lines += [f"{name} = {_format(key, recipe[section][name])}" for name, key in keys.items()]
    return "\n".join(lines) + "\n"


def load_recipe(path) -> Recipe:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())
