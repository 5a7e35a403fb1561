"""Versioned, self-describing model persistence.

Numeric arrays are stored base64-encoded with explicit little-endian dtypes
so a saved model reproduces its predictions bit-for-bit on any platform.
"""

from __future__ import annotations

import base64
import json
import os
import tempfile

import numpy as np

from .forest import Forest, ForestParams, Tree, TrainingSet
from .gpd import PenaltyConfig, ThetaBox
from .model import ErfModel

__all__ = ["FORMAT_VERSION", "save_model", "load_model", "ArchiveError"]

FORMAT_VERSION = 1

_TREE_ARRAYS = (
    "feature",
    "threshold",
    "left",
    "right",
    "leaf_members",
    "leaf_offsets",
    "prediction_indices",
    "split_indices",
)


class ArchiveError(ValueError):
    pass


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a)
    dtype = "<f8" if a.dtype.kind == "f" else "<i8"
    le = a.astype(dtype)
    return {
        "dtype": dtype,
        "shape": list(a.shape),
        "data": base64.b64encode(le.tobytes()).decode("ascii"),
    }


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=np.dtype(d["dtype"])).reshape(d["shape"]).copy()


def _encode_tree(tree: Tree) -> dict:
    return {name: _encode_array(getattr(tree, name)) for name in _TREE_ARRAYS}


def _decode_tree(d: dict) -> Tree:
    return Tree(**{name: _decode_array(d[name]) for name in _TREE_ARRAYS})


def _encode_forest(forest: Forest) -> dict:
    return {
        "params": forest.params.__dict__ | {"split_quantile_levels": list(forest.params.split_quantile_levels)},
        "training_n": forest.training_n,
        "training_p": forest.training_p,
        "trees": [_encode_tree(t) for t in forest.trees],
    }


def _decode_forest(d: dict) -> Forest:
    params = dict(d["params"])
    params["split_quantile_levels"] = tuple(params["split_quantile_levels"])
    return Forest(
        trees=[_decode_tree(t) for t in d["trees"]],
        params=ForestParams(**params),
        training_n=d["training_n"],
        training_p=d["training_p"],
    )


def save_model(model: ErfModel, path: str) -> None:
    shared = model.weight_forest is model.intermediate_forest
    doc = {
        "format_version": FORMAT_VERSION,
        "tau_n": model.tau_n,
        "n": model.training.n,
        "p": model.training.p,
        "x": _encode_array(model.training.x),
        "y": _encode_array(model.training.y),
        "exceedances": _encode_array(model.exceedances),
        "intermediate_at_train": _encode_array(model.intermediate_at_train),
        "penalty": {
            "lam": model.penalty.lam,
            "xi_anchor": model.penalty.xi_anchor,
            "k_over_n_scale": model.penalty.k_over_n_scale,
        },
        "theta_box": {
            "sigma_lo": model.theta_box.sigma_lo,
            "sigma_hi": model.theta_box.sigma_hi,
            "xi_lo": model.theta_box.xi_lo,
            "xi_hi": model.theta_box.xi_hi,
        },
        "shared_forests": shared,
        "intermediate_forest": _encode_forest(model.intermediate_forest),
    }
    if not shared:
        doc["weight_forest"] = _encode_forest(model.weight_forest)
    text = json.dumps(doc, sort_keys=True)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_model(path: str) -> ErfModel:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ArchiveError(f"not a model archive: {path}: {exc}") from exc
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ArchiveError(
            f"unsupported archive format_version {version!r}; this build reads {FORMAT_VERSION}"
        )
    intermediate = _decode_forest(doc["intermediate_forest"])
    weight = intermediate if doc["shared_forests"] else _decode_forest(doc["weight_forest"])
    return ErfModel(
        weight_forest=weight,
        intermediate_forest=intermediate,
        tau_n=doc["tau_n"],
        training=TrainingSet(x=_decode_array(doc["x"]), y=_decode_array(doc["y"])),
        exceedances=_decode_array(doc["exceedances"]),
        intermediate_at_train=_decode_array(doc["intermediate_at_train"]),
        penalty=PenaltyConfig(**doc["penalty"]),
        theta_box=ThetaBox(**doc["theta_box"]),
    )
