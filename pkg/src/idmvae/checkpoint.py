"""Checkpoint archive: JSON manifest plus raw little-endian float32 tensors.

The archive is an uncompressed zip with fixed timestamps, so identical
parameters and metadata always produce identical bytes.
"""

import io
import json
import zipfile

import numpy as np
import torch

from .diffusion import DiffusionPrior
from .errors import InputError
from .model import MultimodalModel

FORMAT_NAME = "idmvae-checkpoint"
FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _named_tensors(model, diffusion):
    named = [(f"model/{k}", v) for k, v in model.state_dict().items()]
    if diffusion is not None:
        named += [(f"diffusion/{k}", v) for k, v in diffusion.state_dict().items()]
    return named


def checkpoint_bytes(model, diffusion=None, meta=None):
    tensors, blobs = [], []
    for i, (name, t) in enumerate(_named_tensors(model, diffusion)):
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        fname = f"tensors/{i:04d}.f32"
        tensors.append({"name": name, "shape": list(arr.shape), "file": fname})
        blobs.append((fname, arr.tobytes()))
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "dtype": "float32",
        "byte_order": "little",
        "model": model.config(),
        "diffusion": diffusion.config() if diffusion is not None else None,
        "meta": meta or {},
        "tensors": tensors,
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, data in [("manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode())] + blobs:
            info = zipfile.ZipInfo(name, date_time=_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)
    return buf.getvalue()


def save_checkpoint(path, model, diffusion=None, meta=None):
    data = checkpoint_bytes(model, diffusion, meta)
    with open(path, "wb") as f:
        f.write(data)
    return path


def load_checkpoint(source):
    """Return ``(model, diffusion_or_None, manifest)`` from a path or bytes."""
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    with zipfile.ZipFile(source) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != FORMAT_NAME:
            raise InputError("not an idmvae checkpoint")
        arrays = {t["name"]: np.frombuffer(zf.read(t["file"]), dtype="<f4").reshape(t["shape"])
                  for t in manifest["tensors"]}
    model = MultimodalModel.from_config(manifest["model"])
    model.load_state_dict(_prefixed(arrays, "model/"))
    diffusion = None
    if manifest["diffusion"] is not None:
        diffusion = DiffusionPrior.from_config(manifest["diffusion"])
        diffusion.load_state_dict(_prefixed(arrays, "diffusion/"))
    return model, diffusion, manifest


def _prefixed(arrays, prefix):
    return {k[len(prefix):]: torch.from_numpy(v.astype(np.float32))
            for k, v in arrays.items() if k.startswith(prefix)}
