"""Run configuration: defaults, schema validation, hashing, and spec resolution."""

from __future__ import annotations

import copy
import hashlib
import json

import jsonschema

from .assembly import ModelSpec
from .errors import BadArgs, ConfigError, M2MKDError
from .losses import KL_DIRECTIONS
from .train import DistillConfig, derive_seed

CONFIG_VERSION = 1

PHASES = (
    "pretrain_meta",
    "incubate_teacher",
    "finetune_teacher",
    "m2mkd",
    "train_e2e",
    "kd_baseline",
    "incubation_baseline",
    "fewshot",
)

OPTIM_KEYS = ("lr", "min_lr", "warmup_epochs", "warmup_lr", "weight_decay", "batch_size")

DEFAULTS = {
    "version": CONFIG_VERSION,
    "seed": 0,
    "model": {
        "L": 4,
        "num_classes": 8,
        "d_in": 16,
        "tokens": 4,
        "pooling": "mean",
        "meta": {"depth": 4, "d_model": 32, "n_heads": 4, "d_ff": 64},
        "teacher": {"depth": 8, "d_model": 32, "n_heads": 4, "d_ff": 64},
        "student": {"depth": 8, "d_model": 24, "n_heads": 4, "d_ff": 48, "n_experts": 4, "top_k": 2},
    },
    "data": {
        "source": "synthetic",
        "seed": 0,
        "per_class": 300,
        "difficulty": 0.18,
        "fewshot": {"seed": 1, "classes": 8, "per_class": 40, "difficulty": 0.25},
    },
    "phases": {
        "pretrain_meta": {"enabled": True, "epochs": 6},
        "incubate_teacher": {"enabled": True, "epochs": 6},
        "finetune_teacher": {"enabled": True, "epochs": 6},
        "m2mkd": {"enabled": True, "epochs": 6},
        "train_e2e": {"enabled": True, "epochs": 6, "random_baseline": True},
        "kd_baseline": {"enabled": False, "epochs": 6},
        "incubation_baseline": {"enabled": True, "epochs": 6},
        "fewshot": {"enabled": False, "epochs": 20, "shots": [1, 2, 4], "ways": 8, "seeds": 5, "queries": 15},
    },
    "distill": {
        "alpha": 0.5,
        "tau": 1.0,
        "kl_direction": "teacher_as_target",
        "keep_stitch": False,
        "cache_teacher": False,
        "update_freq": 1,
    },
    "optim": {
        "lr": 5e-3,
        "min_lr": 1e-5,
        "warmup_epochs": 0,
        "warmup_lr": 1e-6,
        "weight_decay": 0.05,
        "betas": [0.9, 0.999],
        "eps": 1e-8,
        "batch_size": 64,
    },
    "output": {"dir": "runs/toy", "record_time": False},
}

_pos_int = {"type": "integer", "minimum": 1}
_nonneg_int = {"type": "integer", "minimum": 0}
_num = {"type": "number"}
_nonneg = {"type": "number", "minimum": 0}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_block = _obj(
    {
        "depth": _pos_int,
        "d_model": _pos_int,
        "n_heads": _pos_int,
        "d_ff": _pos_int,
        "n_experts": _nonneg_int,
        "top_k": _nonneg_int,
    },
    ("depth", "d_model", "n_heads", "d_ff"),
)

_optim_overrides = {
    "lr": _nonneg,
    "min_lr": _nonneg,
    "warmup_epochs": _nonneg,
    "warmup_lr": _nonneg,
    "weight_decay": _nonneg,
    "batch_size": _pos_int,
}


def _phase(extra=None):
    return _obj({"enabled": {"type": "boolean"}, "epochs": _nonneg_int, **_optim_overrides, **(extra or {})})


SCHEMA = _obj(
    {
        "version": {"const": CONFIG_VERSION},
        "seed": _nonneg_int,
        "model": _obj(
            {
                "L": _pos_int,
                "num_classes": _pos_int,
                "d_in": _pos_int,
                "tokens": _pos_int,
                "pooling": {"enum": ["mean", "cls"]},
                "meta": _block,
                "teacher": _block,
                "student": {"oneOf": [_block, {"type": "null"}]},
            }
        ),
        "data": _obj(
            {
                "source": {"enum": ["synthetic", "idx"]},
                "seed": _nonneg_int,
                "per_class": {"type": "integer", "minimum": 2},
                "difficulty": _nonneg,
                "train_images": {"type": "string"},
                "train_labels": {"type": "string"},
                "val_images": {"type": "string"},
                "val_labels": {"type": "string"},
                "fewshot": _obj(
                    {
                        "seed": _nonneg_int,
                        "classes": {"type": "integer", "minimum": 2},
                        "per_class": {"type": "integer", "minimum": 2},
                        "difficulty": _nonneg,
                        "images": {"type": "string"},
                        "labels": {"type": "string"},
                    }
                ),
            }
        ),
        "phases": _obj(
            {
                **{p: _phase() for p in PHASES if p not in ("fewshot", "train_e2e")},
                "train_e2e": _phase({"random_baseline": {"type": "boolean"}}),
                "fewshot": _phase(
                    {
                        "shots": {"type": "array", "items": _pos_int, "minItems": 1},
                        "ways": {"type": "integer", "minimum": 2},
                        "seeds": _pos_int,
                        "queries": {"oneOf": [_pos_int, {"type": "null"}]},
                    }
                ),
            }
        ),
        "distill": _obj(
            {
                "alpha": {"type": "number", "minimum": 0, "maximum": 1},
                "tau": {"type": "number", "exclusiveMinimum": 0},
                "kl_direction": {"enum": list(KL_DIRECTIONS)},
                "keep_stitch": {"type": "boolean"},
                "cache_teacher": {"type": "boolean"},
                "update_freq": _pos_int,
            }
        ),
        "optim": _obj(
            {
                **_optim_overrides,
                "betas": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
                "eps": {"type": "number", "exclusiveMinimum": 0},
            }
        ),
        "output": _obj({"dir": {"type": "string"}, "record_time": {"type": "boolean"}}),
    }
)


def deep_merge(base, over):
    out = copy.deepcopy(base)
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def validate(doc, source="<config>"):
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{source}: {where}: {exc.message}") from None


def load_config(path=None, overrides=None):
    """Defaults deep-merged with the JSON file at ``path`` and ``overrides``.

    The file is validated on its own (unknown keys are rejected) and the merged
    result is validated again, then resolved once so spec errors surface early.
    """
    doc = {}
    source = "<defaults>"
    if path is not None:
        source = str(path)
        try:
            with open(path) as f:
                doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}: invalid JSON: {exc}") from None
        except OSError as exc:
            raise ConfigError(f"{source}: cannot read config: {exc.strerror}") from None
        validate(doc, source)
    cfg = deep_merge(DEFAULTS, doc)
    if overrides:
        cfg = deep_merge(cfg, overrides)
    validate(cfg, source)
    try:
        model_specs(cfg)
        for phase in PHASES:
            phase_config(cfg, phase)
    except M2MKDError as exc:
        if isinstance(exc, ConfigError):
            raise ConfigError(f"{source}: {exc}") from None
        raise
    return cfg


def canonical(cfg):
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg):
    """SHA-256 of the canonical JSON config, ignoring where outputs go."""
    doc = copy.deepcopy(cfg)
    doc.get("output", {}).pop("dir", None)
    return hashlib.sha256(canonical(doc).encode()).hexdigest()


def _spec(model, kind, block):
    d = dict(block)
    return ModelSpec.from_dict(
        {
            **d,
            "kind": kind,
            "num_classes": model["num_classes"],
            "n_modules": model["L"],
            "d_in": model["d_in"],
            "tokens": model["tokens"],
            "pooling": model["pooling"],
        }
    )


def model_specs(cfg, keep_stitch=None):
    """ModelSpecs for meta, teacher and student (student may be None).

    With ``keep_stitch`` the student spec carries the meta width so stitches
    stay in the transplanted model.
    """
    model = cfg["model"]
    try:
        meta = _spec(model, "meta", model["meta"])
        teacher = _spec(model, "monolithic", model["teacher"])
        student = None
        if model.get("student") is not None:
            block = model["student"]
            kind = "moe_student" if block.get("n_experts", 0) > 0 else "monolithic"
            student = _spec(model, kind, block)
            if keep_stitch is None:
                keep_stitch = cfg["distill"]["keep_stitch"]
            if keep_stitch and student.d_model != meta.d_model:
                student = ModelSpec.from_dict({**student.to_dict(), "stitch_width": meta.d_model})
    except BadArgs as exc:
        raise ConfigError(f"model: {exc}") from None
    return {"meta": meta, "teacher": teacher, "student": student}


def phase_config(cfg, phase, seed=None):
    """DistillConfig for one phase: optim defaults, then per-phase overrides."""
    p = cfg["phases"][phase]
    optim = {**cfg["optim"], **{k: p[k] for k in OPTIM_KEYS if k in p}}
    dist = cfg["distill"]
    base = cfg["seed"] if seed is None else seed
    try:
        return DistillConfig(
            alpha=dist["alpha"],
            tau=dist["tau"],
            kl_direction=dist["kl_direction"],
            epochs=p["epochs"],
            lr=optim["lr"],
            min_lr=optim["min_lr"],
            warmup_epochs=optim["warmup_epochs"],
            warmup_lr=optim["warmup_lr"],
            weight_decay=optim["weight_decay"],
            betas=tuple(optim["betas"]),
            eps=optim["eps"],
            batch_size=optim["batch_size"],
            seed=derive_seed(base, phase),
            keep_stitch=dist["keep_stitch"],
            update_freq=dist["update_freq"],
            cache_teacher=dist["cache_teacher"],
            record_time=cfg["output"]["record_time"],
        )
    except BadArgs as exc:
        raise ConfigError(f"phases.{phase}: {exc}") from None
