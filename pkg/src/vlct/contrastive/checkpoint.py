"""Parameter checkpoints.

A checkpoint is one ``.npz`` archive. The entry ``__header__`` holds a
UTF-8 JSON document with the model spec, seeds and module versions; every
other entry is a trainable array stored under its flat name
(``"proj.W1"``, ``"log_tau"``, ...).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .. import __version__
from .model import Frozen, ModelSpec, flatten, init_params, unflatten

FORMAT_VERSION = 1


def save_checkpoint(path, params: dict, spec: ModelSpec, extra: dict | None = None) -> Path:
    path = Path(path)
    header = {"format": FORMAT_VERSION, "vlct_version": __version__, "spec": spec.to_dict(),
              **(extra or {})}
    arrays = {k: np.asarray(v) for k, v in flatten(params).items()}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def read_header(path) -> dict:
    with np.load(path) as z:
        return json.loads(bytes(z["__header__"]).decode())


def load_checkpoint(path, frozen: Frozen) -> tuple[dict, ModelSpec, dict]:
    with np.load(path) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        flat = {k: z[k] for k in z.files if k != "__header__"}
    spec = ModelSpec(**header["spec"])
    template = init_params(spec, frozen, 0)
    return unflatten(flat, template), spec, header
