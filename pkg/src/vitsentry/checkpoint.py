"""Checkpoint container for both model families.

A checkpoint is a NumPy ``.npz`` archive: one entry per parameter under
its state-dict name (shape and dtype live in the array headers), plus a
``meta_json`` entry holding {format, version, kind, dtype, config}.
Arrays are stored raw, so save -> load -> save round-trips bit-exactly.
Files are written to a temp name and renamed into place.
"""

import json
import os
import tempfile
from dataclasses import asdict

import numpy as np
import torch

from .errors import StateError

FORMAT = "vitsentry-checkpoint"
VERSION = 1

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def save_checkpoint(path, model):
    """Persist a trained VitClassifier or MaskedAutoencoder."""
    from .mae import MaskedAutoencoder
    from .vit import VitClassifier

    if isinstance(model, VitClassifier):
        kind = "classifier"
    elif isinstance(model, MaskedAutoencoder):
        kind = "autoencoder"
    else:
        raise StateError(f"cannot checkpoint object of type {type(model).__name__}")
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "dtype": str(model.dtype).replace("torch.", ""),
        "config": asdict(model.config),
    }
    payload = {"meta_json": np.frombuffer(json.dumps(meta, sort_keys=True).encode(),
                                          dtype=np.uint8)}
    for name, tensor in model.state_dict().items():
        payload[f"param/{name}"] = tensor.detach().cpu().numpy()

    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path):
    """Raw contents: (meta dict, {param_name: numpy array})."""
    if not os.path.exists(path):
        raise StateError(f"checkpoint {path!r} does not exist")
    try:
        data = np.load(path)
    except (OSError, ValueError) as exc:
        raise StateError(f"cannot read checkpoint {path!r}: {exc}") from exc
    if "meta_json" not in data.files:
        raise StateError(f"{path!r} is not a checkpoint (missing metadata)")
    meta = json.loads(bytes(data["meta_json"]).decode())
    if meta.get("format") != FORMAT:
        raise StateError(f"{path!r} has unknown format {meta.get('format')!r}")
    params = {name[len("param/"):]: data[name]
              for name in data.files if name.startswith("param/")}
    return meta, params


def _rebuild(meta, params, expected_kind, config_cls, model_cls):
    if meta["kind"] != expected_kind:
        raise StateError(f"checkpoint holds a {meta['kind']}, expected {expected_kind}")
    dtype = _DTYPES.get(meta.get("dtype"))
    if dtype is None:
        raise StateError(f"unsupported checkpoint dtype {meta.get('dtype')!r}")
    config = config_cls(**meta["config"])
    model = model_cls(config).to(dtype)
    state = {name: torch.from_numpy(np.array(array)) for name, array in params.items()}
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise StateError(f"checkpoint parameters do not match the config: {exc}") from exc
    model.eval()
    return model


def load_classifier(path):
    from .vit import ModelConfig, VitClassifier
    meta, params = read_checkpoint(path)
    return _rebuild(meta, params, "classifier", ModelConfig, VitClassifier)


def load_autoencoder(path):
    from .mae import MAEConfig, MaskedAutoencoder
    meta, params = read_checkpoint(path)
    return _rebuild(meta, params, "autoencoder", MAEConfig, MaskedAutoencoder)
