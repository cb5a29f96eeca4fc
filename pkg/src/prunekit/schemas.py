"""JSON schemas for everything the command line writes."""
from __future__ import annotations

import jsonschema

from prunekit.errors import FormatError

_NUM = {"type": "number"}
_INT = {"type": "integer", "minimum": 0}

LAYER_REPORT = {
    "type": "object",
    "required": ["name", "c", "c_prime", "kept", "lam", "mse_unpruned", "mse_masked",
                 "mse_reconstructed", "wall_time", "target", "upstream"],
    "properties": {
        "name": {"type": "string"},
        "c": _INT,
        "c_prime": _INT,
        "kept": {"type": "array", "items": _INT},
        "lam": _NUM,
        "mse_unpruned": _NUM,
        "mse_masked": _NUM,
        "mse_reconstructed": _NUM,
        "wall_time": _NUM,
        "target": {"type": "string"},
        "upstream": {"type": "string"},
        "lambda_trace": {"type": "array", "items": {"type": "array", "minItems": 2, "maxItems": 2}},
        "gap": {"type": "integer"},
    },
}

PRUNE_REPORT = {
    "type": "object",
    "required": ["layers", "flops_before", "flops_after", "speedup", "output_rel_mse", "holdout_images"],
    "properties": {
        "layers": {"type": "array", "items": LAYER_REPORT},
        "flops_before": _INT,
        "flops_after": _INT,
        "speedup": {"type": "number", "minimum": 0},
        "output_rel_mse": _NUM,
        "holdout_images": _INT,
        "budgets": {"type": "object", "additionalProperties": _INT},
        "notes": {"type": "array", "items": {"type": "string"}},
        "config": {"type": "object"},
    },
}

_SHAPE = {"type": "array", "items": _INT, "minItems": 3, "maxItems": 3}

EVAL_METRICS = {
    "type": "object",
    "required": ["images", "flops", "per_node_flops", "shapes"],
    "properties": {
        "images": _INT,
        "flops": _INT,
        "per_node_flops": {"type": "object", "additionalProperties": _INT},
        "shapes": {"type": "object", "additionalProperties": {
            "type": "object", "required": ["input", "output"],
            "properties": {"input": _SHAPE, "output": _SHAPE}}},
        "output_rel_mse": _NUM,
        "reference_flops": _INT,
        "speedup": _NUM,
    },
}

COMPARE_ROWS = {
    "type": "array",
    "items": {
        "type": "object",
        "required": ["strategy", "c", "c_prime", "relative_mse", "wall_ms"],
        "properties": {
            "strategy": {"enum": ["lasso", "first_k", "max_response", "brute_force"]},
            "c": _INT,
            "c_prime": _INT,
            "relative_mse": _NUM,
            "wall_ms": _NUM,
        },
    },
}

GEN_SUMMARY = {
    "type": "object",
    "required": ["model", "input_shape", "convs", "flops"],
    "properties": {
        "model": {"type": "string"},
        "input_shape": _SHAPE,
        "convs": {"type": "array", "items": {"type": "string"}},
        "flops": _INT,
        "data": {"type": "string"},
    },
}


def validate(doc, schema, what: str) -> None:
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise FormatError(f"{what} failed schema validation at {path}: {exc.message}") from None
