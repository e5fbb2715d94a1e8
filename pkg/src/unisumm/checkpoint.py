"""Self-describing binary checkpoints.

Layout::

    b"USUMCKPT"              magic (8 bytes)
    uint32 LE                format version
    uint32 LE 0x01020304     byte-order mark
    uint64 LE                header length
    header                   UTF-8 JSON: kind, config, tensor index, hashes
    payload                  float64 little-endian tensors, back to back

A backbone, a prefix bank and a single tuned prefix are separate files;
prefix files name the ``content_hash`` of the backbone they were trained
against.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import CorruptCheckpointError, HashMismatchError, UnsupportedVersionError
from .model import ModelConfig, ParameterStore, PrefixBank, PrefixParams, content_hash
from .vocab import Vocabulary

MAGIC = b"USUMCKPT"
FORMAT_VERSION = 1
_BOM = 0x01020304
_PREAMBLE = struct.Struct("<8sIIQ")


def atomic_write_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode())


def _pack(kind, arrays, meta):
    index, chunks, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset,
                      "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = dict(meta)
    header.update({"kind": kind, "format_version": FORMAT_VERSION, "endianness": "little",
                   "dtype": "float64", "tensors": index, "payload_bytes": offset,
                   "content_hash": content_hash(arrays)})
    hbytes = json.dumps(header, sort_keys=True).encode()
    return _PREAMBLE.pack(MAGIC, FORMAT_VERSION, _BOM, len(hbytes)) + hbytes + b"".join(chunks)


def _unpack(blob, path="<bytes>"):
    if len(blob) < _PREAMBLE.size:
        raise CorruptCheckpointError(f"{path}: file too short for a checkpoint header")
    magic, version, bom, hlen = _PREAMBLE.unpack_from(blob)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint (bad magic)")
    if bom != _BOM:
        raise CorruptCheckpointError(f"{path}: unexpected byte order mark")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"{path}: format version {version} unsupported (this build reads {FORMAT_VERSION})")
    start = _PREAMBLE.size
    if len(blob) < start + hlen:
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[start:start + hlen])
    except ValueError:
        raise CorruptCheckpointError(f"{path}: unreadable header") from None
    payload = memoryview(blob)[start + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise CorruptCheckpointError(
            f"{path}: payload is {len(payload)} bytes, header promises {header['payload_bytes']}")
    arrays = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(
            entry["shape"])
    if content_hash(arrays) != header["content_hash"]:
        raise HashMismatchError(f"{path}: content hash does not match stored tensors")
    return header, arrays


def _read(path):
    return _unpack(Path(path).read_bytes(), path)


# ---------------------------------------------------------------- public API


def save_backbone(path, params, run_config=None):
    meta = {"model_config": params.config.to_dict(),
            "vocab": params.vocab.to_list() if params.vocab is not None else None,
            "run_config": run_config}
    atomic_write_bytes(path, _pack("backbone", params.arrays(), meta))
    return params.content_hash


def _backbone_from(header, arrays):
    cfg = ModelConfig.from_dict(header["model_config"])
    vocab = Vocabulary.from_list(header["vocab"]) if header.get("vocab") else None
    return ParameterStore({k: Tensor(v) for k, v in arrays.items()}, cfg, vocab)


def save_bank(path, bank, backbone_hash, run_config=None):
    arrays = {f"{task}/{name}": arr
              for task, prefix in bank.items() for name, arr in prefix.arrays().items()}
    meta = {"backbone_hash": backbone_hash, "tasks": sorted(bank.keys()),
            "run_config": run_config}
    atomic_write_bytes(path, _pack("prefix_bank", arrays, meta))
    return bank.content_hash


def _split_prefixes(arrays, tasks):
    grouped = {t: {} for t in tasks}
    for key, arr in arrays.items():
        task, _, name = key.rpartition("/")
        grouped[task][name] = Tensor(arr)
    return {t: PrefixParams(blocks, owner_task=t) for t, blocks in grouped.items()}


def save_prefix(path, prefix, backbone_hash, task_id=None, run_config=None, extra=None):
    meta = {"backbone_hash": backbone_hash, "task_id": task_id, "run_config": run_config,
            "extra": extra}
    atomic_write_bytes(path, _pack("prefix", prefix.arrays(), meta))
    return prefix.content_hash


def load_checkpoint(path, backbone_hash=None):
    """Load a backbone, prefix bank or single prefix.

    Args:
        backbone_hash: when given, prefix files must reference this backbone.

    Raises:
        CorruptCheckpointError, UnsupportedVersionError, HashMismatchError.
    """
    header, arrays = _read(path)
    kind = header["kind"]
    if kind == "backbone":
        return _backbone_from(header, arrays)
    if backbone_hash is not None and header.get("backbone_hash") != backbone_hash:
        raise HashMismatchError(
            f"{path}: trained against backbone {header.get('backbone_hash')}, "
            f"but backbone {backbone_hash} was supplied")
    if kind == "prefix_bank":
        return PrefixBank(_split_prefixes(arrays, header["tasks"]), header["backbone_hash"])
    if kind == "prefix":
        blocks = {k: Tensor(v) for k, v in arrays.items()}
        return PrefixParams(blocks, owner_task=header.get("task_id"))
    if kind == "train_state":
        raise CorruptCheckpointError(f"{path}: use load_train_state for training states")
    raise CorruptCheckpointError(f"{path}: unknown checkpoint kind {kind!r}")


def save_checkpoint(path, obj, backbone_hash=None, run_config=None):
    """Dispatch on type: ParameterStore, PrefixBank or PrefixParams."""
    if isinstance(obj, ParameterStore):
        return save_backbone(path, obj, run_config)
    if isinstance(obj, PrefixBank):
        return save_bank(path, obj, backbone_hash or obj.backbone_hash, run_config)
    if isinstance(obj, PrefixParams):
        return save_prefix(path, obj, backbone_hash, obj.owner_task, run_config)
    raise TypeError(f"cannot checkpoint {type(obj).__name__}")


def read_header(path):
    header, _ = _read(path)
    return header


# ---------------------------------------------------------------- training state


def save_train_state(path, state, opt_config=None):
    arrays = {f"backbone/{k}": v for k, v in state.backbone.arrays().items()}
    for task, prefix in state.bank.items():
        arrays.update({f"prefix/{task}/{k}": v for k, v in prefix.arrays().items()})
    counts = {}
    for key, (m, v, t) in state.moments.items():
        arrays[f"moment/{key}/m"] = m
        arrays[f"moment/{key}/v"] = v
        counts[key] = t
    meta = {"step": state.step, "seed": state.seed, "moment_counts": counts,
            "rng": state.rng_states(), "tasks": sorted(state.bank.keys()),
            "model_config": state.backbone.config.to_dict(),
            "vocab": state.backbone.vocab.to_list() if state.backbone.vocab else None,
            "opt_config": opt_config.to_dict() if opt_config is not None else None,
            "train_backbone": state.train_backbone}
    atomic_write_bytes(path, _pack("train_state", arrays, meta))


def load_train_state(path):
    from .training import TrainState

    header, arrays = _read(path)
    if header["kind"] != "train_state":
        raise CorruptCheckpointError(f"{path}: not a training state")
    backbone_arrays, prefix_arrays, moments = {}, {}, {}
    for key, arr in arrays.items():
        head, _, rest = key.partition("/")
        if head == "backbone":
            backbone_arrays[rest] = arr
        elif head == "prefix":
            prefix_arrays[rest] = arr
    for key, t in header["moment_counts"].items():
        moments[key] = (arrays[f"moment/{key}/m"], arrays[f"moment/{key}/v"], t)
    backbone = _backbone_from(header, backbone_arrays)
    bank = PrefixBank(_split_prefixes(prefix_arrays, header["tasks"]))
    state = TrainState(step=header["step"], backbone=backbone, bank=bank, seed=header["seed"],
                       moments=moments, train_backbone=header["train_backbone"])
    state.set_rng_states(header["rng"])
    return state
