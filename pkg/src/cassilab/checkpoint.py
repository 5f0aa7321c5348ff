"""Checkpoint container: one binary parameter blob plus manifest.json.

The blob is a plain concatenation of little-endian tensor payloads; the
manifest records the byte layout together with the config snapshot, the
frequency-bank values, iteration counters and both RNG states.  Every byte
written is a pure function of the training state, so identically seeded
runs produce identical checkpoint files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .errors import CubeFormatError

FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


class _BlobWriter:
    def __init__(self):
        self.buf = bytearray()
        self.index = []

    def add(self, name: str, tensor: torch.Tensor) -> None:
        t = tensor.detach().cpu().contiguous()
        code = _DTYPES[t.dtype]
        arr = t.numpy().astype(code, copy=False)
        raw = arr.tobytes()
        self.index.append(
            {
                "name": name,
                "shape": list(t.shape),
                "dtype": code,
                "offset": len(self.buf),
                "nbytes": len(raw),
            }
        )
        self.buf.extend(raw)


def save_checkpoint(path, model, config_dict: dict, *, optimizer=None, step: int = 0,
                    epoch: int = 0, np_rng=None, audit=None) -> None:
    """Write the model (and optionally full training state) to ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    writer = _BlobWriter()
    for key, value in model.state_dict().items():
        writer.add(f"model.{key}", value)
    param_groups = None
    if optimizer is not None:
        opt_state = optimizer.state_dict()
        for pidx in sorted(opt_state["state"]):
            for key, value in sorted(opt_state["state"][pidx].items()):
                writer.add(f"optim.{pidx}.{key}", torch.as_tensor(value))
        param_groups = opt_state["param_groups"]
    writer.add("rng.torch", torch.get_rng_state())

    bank = []
    bank_t = getattr(model, "frequency_bank", None)
    if bank_t is None:
        bank_t = getattr(getattr(model, "prior", None), "frequency_bank", None)
    if bank_t is not None:
        bank = [float(v) for v in bank_t.cpu().numpy()]

    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config_dict,
        "frequency_bank": bank,
        "step": int(step),
        "epoch": int(epoch),
        "audit_wavelengths": sorted(float(l) for l in (audit or [])),
        "optim_param_groups": param_groups,
        "np_rng_state": np_rng.bit_generator.state if np_rng is not None else None,
        "tensors": writer.index,
    }
    with open(path / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(path / "params.bin", "wb") as fh:
        fh.write(bytes(writer.buf))


def load_checkpoint(path) -> dict:
    """Read a checkpoint directory into a manifest dict plus named tensors."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise CubeFormatError(f"no manifest.json under {path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CubeFormatError(
            f"unsupported checkpoint format version {manifest.get('format_version')}"
        )
    raw = (path / "params.bin").read_bytes()
    tensors = {}
    for entry in manifest["tensors"]:
        arr = np.frombuffer(
            raw, dtype=entry["dtype"],
            count=int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1,
            offset=entry["offset"],
        ).reshape(entry["shape"]).copy()
        t = torch.from_numpy(arr)
        tensors[entry["name"]] = t.to(_TORCH_DTYPES[entry["dtype"]])
    manifest["_tensors"] = tensors
    return manifest


def model_state_from(manifest: dict) -> dict:
    return {
        name[len("model."):]: t
        for name, t in manifest["_tensors"].items()
        if name.startswith("model.")
    }


def optimizer_state_from(manifest: dict) -> dict | None:
    if manifest.get("optim_param_groups") is None:
        return None
    state = {}
    for name, t in manifest["_tensors"].items():
        if not name.startswith("optim."):
            continue
        _, pidx, key = name.split(".", 2)
        state.setdefault(int(pidx), {})[key] = t
    return {"state": state, "param_groups": manifest["optim_param_groups"]}


def restore_rng(manifest: dict) -> np.random.Generator:
    """Restore the torch global RNG and return the restored numpy generator."""
    torch.set_rng_state(manifest["_tensors"]["rng.torch"].to(torch.uint8))
    rng = np.random.default_rng()
    if manifest.get("np_rng_state") is not None:
        rng.bit_generator.state = manifest["np_rng_state"]
    return rng
