"""Versioned binary checkpoint container.

Layout: magic ``SKIPNET1``, a little-endian uint32 header length, a JSON
header (model config, schema fingerprint, extras, tensor directory, and a
SHA-256 of the payload), then the concatenated row-major float64
little-endian tensor payloads in directory order.  Serialization is fully
deterministic, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError
from .model import ModelConfig, params_from_tensors
from .tensor import Tensor

MAGIC = b"SKIPNET1"


@dataclass
class CheckpointData:
    params: object
    extras: dict
    adam_state: object   # AdamState or None
    schema_fingerprint: str


def save_checkpoint(path, params, schema_fingerprint, adam_state=None, extras=None):
    """Write params (shared FC once) and optionally Adam moments to ``path``."""
    entries = []
    arrays = []
    for name, t in params.named_tensors().items():
        entries.append({"name": name, "shape": list(t.shape)})
        arrays.append(t.data)
    if adam_state is not None:
        for kind, moments in (("m", adam_state.m), ("v", adam_state.v)):
            for name in sorted(moments):
                entries.append({"name": f"adam.{kind}.{name}",
                                "shape": list(moments[name].shape)})
                arrays.append(moments[name])
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    header = {
        "config": params.config.to_json_dict(),
        "schema_fingerprint": schema_fingerprint,
        "adam_step": None if adam_state is None else adam_state.step,
        "extras": extras or {},
        "tensors": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)


def load_checkpoint(path, expected_fingerprint=None):
    """Read a checkpoint into a CheckpointData.

    Verifies the magic string, the payload checksum, and (when given) the
    feature-schema fingerprint.
    """
    from .train import AdamState  # late import; train depends on this module

    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if len(blob) < len(MAGIC) + 4 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    header_len = struct.unpack("<I", blob[len(MAGIC):len(MAGIC) + 4])[0]
    header_end = len(MAGIC) + 4 + header_len
    if len(blob) < header_end:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[len(MAGIC) + 4:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None

    payload = blob[header_end:]
    expected_size = sum(int(np.prod(e["shape"])) for e in header["tensors"]) * 8
    if len(payload) != expected_size:
        raise CheckpointError(f"{path}: truncated payload, expected {expected_size} bytes, "
                              f"got {len(payload)}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    if expected_fingerprint is not None \
            and header["schema_fingerprint"] != expected_fingerprint:
        raise CheckpointError(f"{path}: feature-schema fingerprint mismatch")

    config = ModelConfig.from_json_dict(header["config"])
    offset = 0
    named, moments_m, moments_v = {}, {}, {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) * 8
        arr = np.frombuffer(payload[offset:offset + n], dtype="<f8").reshape(shape).copy()
        offset += n
        name = entry["name"]
        if name.startswith("adam.m."):
            moments_m[name[len("adam.m."):]] = arr
        elif name.startswith("adam.v."):
            moments_v[name[len("adam.v."):]] = arr
        else:
            named[name] = Tensor(arr, requires_grad=True)

    params = params_from_tensors(config, named)
    adam_state = None
    if header.get("adam_step") is not None:
        adam_state = AdamState(m=moments_m, v=moments_v, step=int(header["adam_step"]))
    return CheckpointData(params=params, extras=header.get("extras", {}),
                          adam_state=adam_state,
                          schema_fingerprint=header["schema_fingerprint"])
