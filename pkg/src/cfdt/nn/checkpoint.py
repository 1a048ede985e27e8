"""Checkpoint files: a JSON header plus base64-encoded little-endian parameter arrays."""
from __future__ import annotations

import base64
import json

import numpy as np

FORMAT = "cfdt-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _encode(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a)
    le = a.astype(a.dtype.newbyteorder("<"), copy=False)
    return {"dtype": a.dtype.str.lstrip("<>|="), "shape": list(a.shape),
            "data": base64.b64encode(le.tobytes()).decode("ascii")}


def _decode(d: dict) -> np.ndarray:
    dtype = np.dtype("<" + d["dtype"])
    return np.frombuffer(base64.b64decode(d["data"]), dtype=dtype).reshape(d["shape"]).copy()


def dumps(params: dict[str, np.ndarray], config: dict, extra: dict | None = None) -> str:
    body = {
        "format": FORMAT,
        "version": VERSION,
        "config": config,
        "extra": extra or {},
        "params": {name: _encode(params[name]) for name in sorted(params)},
    }
    return json.dumps(body, sort_keys=True)


def loads(text: str) -> tuple[dict[str, np.ndarray], dict, dict]:
    body = json.loads(text)
    if body.get("format") != FORMAT:
        raise CheckpointError(f"not a {FORMAT} file")
    if body.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {body.get('version')}")
    params = {name: _decode(d) for name, d in body["params"].items()}
    return params, body["config"], body.get("extra", {})


def save(path, params: dict[str, np.ndarray], config: dict, extra: dict | None = None) -> None:
    with open(path, "w") as f:
        f.write(dumps(params, config, extra))


def load(path) -> tuple[dict[str, np.ndarray], dict, dict]:
    with open(path) as f:
        return loads(f.read())
