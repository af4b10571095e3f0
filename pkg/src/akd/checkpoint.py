"""Checkpoint files: a zip of ``.npy`` arrays plus a JSON metadata record.

Parameters are stored flat (row-major, float32) under ``<role>/<path>``;
shapes, freeze flags, optimizer scalars, scheduler state, epoch and RNG state
live in ``meta.json``.  Archive members carry a fixed timestamp so identical
states produce identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from akd.distill import AlignProjection
from akd.encoders import Encoder, EncoderConfig
from akd.errors import ParseError
from akd.model import ModelBundle
from akd.optim import Adam, PlateauScheduler
from akd.tensor import Tensor

CHECKPOINT_VERSION = 1
_STAMP = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    models: dict[str, ModelBundle]
    optimizers: dict[str, dict] = field(default_factory=dict)
    schedulers: dict[str, dict] = field(default_factory=dict)
    epoch: int = 0
    step: int = 0
    config: dict = field(default_factory=dict)
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _put(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_STAMP)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, payload)


def save_checkpoint(path, models: dict[str, ModelBundle], optimizers: dict[str, Adam] | None = None,
                    schedulers: dict[str, PlateauScheduler] | None = None, epoch: int = 0, step: int = 0,
                    config: dict | None = None, rng_state: dict | None = None, extra: dict | None = None) -> None:
    meta = {
        "format": "akd-checkpoint",
        "version": CHECKPOINT_VERSION,
        "epoch": int(epoch),
        "step": int(step),
        "config": config or {},
        "rng_state": rng_state,
        "extra": extra or {},
        "models": {},
        "optimizers": {},
        "schedulers": {k: s.state_dict() for k, s in (schedulers or {}).items()},
    }
    arrays: dict[str, np.ndarray] = {}
    for role, bundle in models.items():
        entry = {
            "encoder": bundle.encoder.config.to_dict(),
            "align": None if bundle.align is None else [bundle.align.student_hidden, bundle.align.teacher_hidden],
            "params": {},
        }
        for name, t in bundle.params().items():
            entry["params"][name] = {"shape": list(t.shape), "frozen": bool(t.frozen)}
            arrays[f"{role}/param/{name}"] = t.data.astype(np.float32).ravel()
        meta["models"][role] = entry
    for role, opt in (optimizers or {}).items():
        sd = opt.state_dict()
        meta["optimizers"][role] = {k: sd[k] for k in ("lr", "beta1", "beta2", "eps", "step")}
        meta["optimizers"][role]["params"] = sorted(opt.params)
        for name in sd["m"]:
            arrays[f"{role}/adam_m/{name}"] = sd["m"][name].astype(np.float32).ravel()
            arrays[f"{role}/adam_v/{name}"] = sd["v"][name].astype(np.float32).ravel()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        _put(zf, "meta.json", json.dumps(meta, sort_keys=True).encode())
        for key in sorted(arrays):
            _put(zf, key + ".npy", _npy_bytes(arrays[key]))


def _read_array(zf: zipfile.ZipFile, key: str, shape, where: str) -> np.ndarray:
    try:
        raw = zf.read(key + ".npy")
    except KeyError:
        raise ParseError(f"checkpoint is missing values for {where}") from None
    arr = np.lib.format.read_array(io.BytesIO(raw), allow_pickle=False)
    expected = int(np.prod(shape)) if shape else 1
    if arr.size != expected:
        raise ParseError(f"{where}: expected {expected} values for shape {tuple(shape)}, found {arr.size}")
    return arr.reshape(shape)


def load_checkpoint(path) -> Checkpoint:
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, OSError) as exc:
        raise ParseError(f"{path}: not a checkpoint archive ({exc})") from None
    with zf:
        try:
            meta = json.loads(zf.read("meta.json"))
        except (KeyError, json.JSONDecodeError):
            raise ParseError(f"{path}: missing or unreadable meta.json") from None
        if meta.get("format") != "akd-checkpoint":
            raise ParseError(f"{path}: not an akd checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ParseError(
                f"{path}: checkpoint format version {meta.get('version')} is not supported "
                f"(this build reads version {CHECKPOINT_VERSION})"
            )
        models = {}
        for role, entry in meta["models"].items():
            tensors: dict[str, Tensor] = {}
            for name, info in entry["params"].items():
                arr = _read_array(zf, f"{role}/param/{name}", info["shape"], f"{role}.{name}")
                t = Tensor(arr, requires_grad=not info["frozen"], name=name, dtype=np.float32)
                if info["frozen"]:
                    t.freeze()
                tensors[name] = t
            enc_params = {k[len("encoder."):]: v for k, v in tensors.items() if k.startswith("encoder.")}
            adapters = {k[len("adapters."):]: v for k, v in tensors.items() if k.startswith("adapters.")}
            align = None
            if entry["align"] is not None:
                sh, th = entry["align"]
                align = AlignProjection(sh, th, params={k[len("align."):]: v for k, v in tensors.items()
                                                        if k.startswith("align.")})
            encoder = Encoder(EncoderConfig(**entry["encoder"]), params=enc_params)
            models[role] = ModelBundle(encoder, adapters, align)
        optimizers = {}
        for role, o in meta["optimizers"].items():
            m, v = {}, {}
            for name in o["params"]:
                key = f"{role}/adam_m/{name}"
                if key + ".npy" not in zf.namelist():
                    continue
                shape = _param_shape(meta, role, name)
                m[name] = _read_array(zf, key, shape, f"{role} optimizer m[{name}]")
                v[name] = _read_array(zf, f"{role}/adam_v/{name}", shape, f"{role} optimizer v[{name}]")
            optimizers[role] = {**{k: o[k] for k in ("lr", "beta1", "beta2", "eps", "step")}, "m": m, "v": v}
    return Checkpoint(models, optimizers, meta["schedulers"], meta["epoch"], meta["step"], meta["config"],
                      meta["rng_state"], meta["extra"])


def _param_shape(meta: dict, role: str, name: str):
    # an optimizer is stored under the role of the model it updates
    entry = meta["models"].get(role)
    if entry is not None and name in entry["params"]:
        return entry["params"][name]["shape"]
    raise ParseError(f"optimizer state for unknown parameter {role}.{name}")
