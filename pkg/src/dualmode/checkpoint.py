"""Checkpoint files and checkpoint averaging.

Layout::

    DUALMODE-CKPT\\n
    manifest-bytes: <N>\\n
    <N bytes of indented JSON manifest>
    <contiguous little-endian float64 payload>

The manifest lists each parameter's id, shape, trainable flag, group, and
its offset/count (in scalars) into the payload, plus a config echo and the
mandatory ``format_version``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .numerics import ParameterSet

MAGIC = b"DUALMODE-CKPT\n"
FORMAT_VERSION = 1
_LEN_PREFIX = b"manifest-bytes: "


@dataclass
class Checkpoint:
    params: ParameterSet
    config: dict = field(default_factory=dict)

    def manifest_entries(self) -> list[dict]:
        return _entries(self.params)


def _entries(params: ParameterSet) -> list[dict]:
    out, offset = [], 0
    for p in params:
        out.append({"id": p.id, "shape": list(p.value.shape), "trainable": p.trainable,
                    "group": p.group, "offset": offset, "count": int(p.value.size)})
        offset += p.value.size
    return out


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    entries = _entries(ckpt.params)
    manifest = {"format_version": FORMAT_VERSION, "config": ckpt.config,
                "n_scalars": sum(e["count"] for e in entries), "params": entries}
    head = json.dumps(manifest, indent=1, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(p.value, dtype="<f8").tobytes() for p in ckpt.params)
    return MAGIC + _LEN_PREFIX + str(len(head)).encode() + b"\n" + head + payload


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if not blob.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic)")
    rest = blob[len(MAGIC):]
    line, sep, rest = rest.partition(b"\n")
    if not sep or not line.startswith(_LEN_PREFIX):
        raise CheckpointError("missing manifest length line")
    try:
        n = int(line[len(_LEN_PREFIX):])
    except ValueError:
        raise CheckpointError(f"bad manifest length {line!r}") from None
    if n < 0 or len(rest) < n:
        raise CheckpointError("manifest truncated")
    try:
        manifest = json.loads(rest[:n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"format_version {version!r} unsupported (expected {FORMAT_VERSION})")
    payload = rest[n:]
    entries = manifest.get("params", [])
    total = sum(int(e["count"]) for e in entries)
    if total != manifest.get("n_scalars", total):
        raise CheckpointError("manifest scalar count disagrees with its parameter list")
    if len(payload) < 8 * total:
        raise CheckpointError(f"payload truncated: {len(payload)} bytes for {total} scalars")
    if len(payload) != 8 * total:
        raise CheckpointError(f"payload length {len(payload)} != manifest's {8 * total} bytes")
    values = np.frombuffer(payload, dtype="<f8")
    params = ParameterSet()
    for e in entries:
        shape = tuple(e["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        if count != e["count"]:
            raise CheckpointError(f"{e['id']}: shape {shape} does not hold {e['count']} scalars")
        chunk = values[e["offset"]:e["offset"] + count]
        if chunk.size != count:
            raise CheckpointError(f"{e['id']}: payload slice out of range")
        params.add(e["id"], chunk.astype(np.float64).reshape(shape), bool(e["trainable"]), e["group"])
    return Checkpoint(params, manifest.get("config", {}))


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(blob)


def model_soup(a: Checkpoint, b: Checkpoint, w: float) -> Checkpoint:
    """Parameterwise ``w * a + (1 - w) * b``; endpoints return exact copies.

    Checkpoints must agree on ids, shapes and groups. Trainable flags are
    training state and are taken from ``a``.
    """
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"soup weight must be in [0, 1], got {w!r}")
    sig = lambda c: [(e["id"], e["shape"], e["group"]) for e in c.manifest_entries()]
    if sig(a) != sig(b):
        raise CheckpointError("checkpoint manifests differ; cannot average")
    out = ParameterSet()
    for pa in a.params:
        va, vb = pa.value, b.params[pa.id].value
        if w == 1.0:
            v = va
        elif w == 0.0:
            v = vb
        else:
            v = w * va + (1.0 - w) * vb
            # keep a==b bit-exact: w*x + (1-w)*x need not round back to x
            v = np.where(va == vb, va, v)
        out.add(pa.id, v, pa.trainable, pa.group)
    return Checkpoint(out, dict(a.config))
