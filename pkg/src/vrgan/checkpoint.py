"""Single-file checkpoints: named arrays plus a JSON header, stored as ``.npz``.

The header records the model specifications and conditioning statistics
together with ``spec_hash``; loading against a different configuration
raises :class:`CheckpointMismatchError`.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointMismatchError
from .storage import content_hash

HEADER_KEY = "__header__"


def spec_hash(specs: dict) -> str:
    """Hash of the architecture description (method + model specs)."""
    return content_hash(specs)


def save_archive(path, arrays: dict, header: dict):
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    payload[HEADER_KEY] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_archive(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(bytes(data[HEADER_KEY]).decode())
        arrays = {k: data[k] for k in data.files if k != HEADER_KEY}
    return arrays, header


def module_arrays(prefix: str, module: torch.nn.Module) -> dict:
    return {f"{prefix}.{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module_arrays(prefix: str, module: torch.nn.Module, arrays: dict):
    start = prefix + "."
    state = {k[len(start):]: torch.from_numpy(np.array(v)) for k, v in arrays.items() if k.startswith(start)}
    module.load_state_dict(state, strict=True)


def optimizer_arrays(prefix: str, opt: torch.optim.Optimizer):
    """Flatten optimizer state into arrays plus JSON-able param-group metadata."""
    sd = opt.state_dict()
    arrays = {}
    for idx, st in sd["state"].items():
        for name, value in st.items():
            arrays[f"{prefix}.state.{idx}.{name}"] = torch.as_tensor(value).detach().cpu().numpy()
    return arrays, sd["param_groups"]


def load_optimizer_arrays(prefix: str, opt: torch.optim.Optimizer, arrays: dict, param_groups):
    start = prefix + ".state."
    state: dict = {}
    for key, value in arrays.items():
        if key.startswith(start):
            idx, name = key[len(start):].split(".", 1)
            state.setdefault(int(idx), {})[name] = torch.from_numpy(np.array(value))
    opt.load_state_dict({"state": state, "param_groups": param_groups})


def check_header(header: dict, expected_hash: str):
    found = header.get("spec_hash")
    if found != expected_hash:
        raise CheckpointMismatchError(
            f"checkpoint spec hash {found!r} does not match configuration hash {expected_hash!r}"
        )
