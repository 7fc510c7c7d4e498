"""Flat binary checkpoint container with a plain-text manifest.

Layout of a ``.ckpt`` file::

    8 bytes   magic b"PFCNCKPT"
    4 bytes   format version, uint32 little-endian
    8 bytes   header length n, uint64 little-endian
    n bytes   UTF-8 JSON header
    ...       raw tensor bytes, little-endian, C order, back to back

The header records the network spec, the iteration counter, a configuration
digest and, for every tensor, its group ("param" or "velocity"), name, dtype,
shape, byte offset (relative to the end of the header) and byte length.  The
manifest written next to it (``<file>.manifest.txt``) lists the same tensor
table one line per tensor for inspection without tooling.
"""
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError
from .network import NetworkSpec

MAGIC = b"PFCNCKPT"
VERSION = 1


@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: dict
    velocity: dict = field(default_factory=dict)
    iteration: int = 0
    config_digest: str = ""
    extra: dict = field(default_factory=dict)


def _tensors(ckpt):
    for group, tensors in (("param", ckpt.params), ("velocity", ckpt.velocity)):
        for name in sorted(tensors):
            yield group, name, np.asarray(tensors[name])


def save_checkpoint(ckpt, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table, blobs, offset = [], [], 0
    for group, name, arr in _tensors(ckpt):
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        data = np.ascontiguousarray(le).tobytes()
        table.append({"group": group, "name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {"spec": ckpt.spec.to_dict(), "iteration": int(ckpt.iteration), "config_digest": ckpt.config_digest,
              "spec_digest": ckpt.spec.digest(), "extra": ckpt.extra, "tensors": table}
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)
    lines = [f"checkpoint {path.name}", f"iteration {ckpt.iteration}", f"config_digest {ckpt.config_digest}",
             f"spec_digest {ckpt.spec.digest()}", "group\tname\tdtype\tshape\toffset\tnbytes"]
    for t in table:
        shape = "x".join(str(s) for s in t["shape"]) or "scalar"
        lines.append(f"{t['group']}\t{t['name']}\t{t['dtype']}\t{shape}\t{t['offset']}\t{t['nbytes']}")
    Path(str(path) + ".manifest.txt").write_text("\n".join(lines) + "\n")
    return path


def load_checkpoint(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != MAGIC:
        raise DataError(f"{path} is not a checkpoint (bad magic)")
    version, n = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + n].decode("utf-8"))
    base = 20 + n
    groups = {"param": {}, "velocity": {}}
    for t in header["tensors"]:
        start = base + t["offset"]
        arr = np.frombuffer(raw[start:start + t["nbytes"]], dtype=np.dtype(t["dtype"]))
        groups[t["group"]][t["name"]] = arr.reshape(t["shape"]).astype(arr.dtype.newbyteorder("="))
    return Checkpoint(NetworkSpec.from_dict(header["spec"]), groups["param"], groups["velocity"],
                      header["iteration"], header["config_digest"], header.get("extra", {}))


def file_digest(path: Optional[str]):
    import hashlib
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
