"""Checkpoint container: text header plus raw little-endian float32 payloads.

Layout::

    CAMDUO-CKPT v1
    meta <n_meta>
    <key> <value>          (n_meta lines)
    tensors <n_tensors>
    <name> f32 <rank> <dims...>   (n_tensors lines)
    end
    <raw f32 payloads, little-endian, in header order>

Round-trips are bit-exact; every tensor is stored as float32.
"""

from __future__ import annotations

from typing import Dict, Tuple

import numpy as np
import torch

MAGIC = "CAMDUO-CKPT"
VERSION = "v1"


class CheckpointError(RuntimeError):
    pass


def save_tensors(path, tensors: Dict[str, torch.Tensor], meta: Dict[str, str]) -> None:
    """Write named tensors and string metadata to `path`."""
    lines = [f"{MAGIC} {VERSION}", f"meta {len(meta)}"]
    for key, value in meta.items():
        if " " in key or "\n" in str(value):
            raise CheckpointError(f"meta key/value may not contain whitespace: {key!r}")
        lines.append(f"{key} {value}")
    lines.append(f"tensors {len(tensors)}")
    arrays = []
    for name, t in tensors.items():
        if " " in name:
            raise CheckpointError(f"tensor name may not contain spaces: {name!r}")
        arr = t.detach().cpu().to(torch.float32).numpy()
        dims = " ".join(str(d) for d in arr.shape)
        lines.append(f"{name} f32 {arr.ndim} {dims}".rstrip())
        arrays.append(np.ascontiguousarray(arr, dtype="<f4"))
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for arr in arrays:
            fh.write(arr.tobytes())


def load_tensors(path) -> Tuple[Dict[str, torch.Tensor], Dict[str, str]]:
    """Read a checkpoint written by `save_tensors`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    header_end = blob.find(b"end\n")
    if header_end < 0:
        raise CheckpointError("truncated checkpoint: missing 'end' header terminator")
    try:
        header = blob[:header_end].decode("ascii")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    payload = blob[header_end + len(b"end\n"):]
    lines = header.splitlines()

    def fail(field, line):
        raise CheckpointError(f"corrupt checkpoint header at {field}: {line!r}")

    if not lines or not lines[0].startswith(MAGIC):
        fail("magic", lines[0] if lines else "<empty>")
    version = lines[0].split()[-1]
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version!r} (expected {VERSION})")
    idx = 1
    if not lines[idx].startswith("meta "):
        fail("meta count", lines[idx])
    n_meta = int(lines[idx].split()[1])
    idx += 1
    meta = {}
    for _ in range(n_meta):
        key, _, value = lines[idx].partition(" ")
        meta[key] = value
        idx += 1
    if not lines[idx].startswith("tensors "):
        fail("tensor count", lines[idx])
    n_tensors = int(lines[idx].split()[1])
    idx += 1
    tensors: Dict[str, torch.Tensor] = {}
    offset = 0
    for _ in range(n_tensors):
        parts = lines[idx].split()
        idx += 1
        if len(parts) < 3:
            fail("tensor record", " ".join(parts))
        name, dtype, rank = parts[0], parts[1], int(parts[2])
        if dtype != "f32":
            raise CheckpointError(f"unsupported dtype tag {dtype!r} for tensor {name!r}")
        dims = tuple(int(d) for d in parts[3:])
        if len(dims) != rank:
            fail(f"dims of tensor {name!r}", " ".join(parts))
        count = int(np.prod(dims)) if dims else 1
        nbytes = 4 * count
        if offset + nbytes > len(payload):
            raise CheckpointError(f"truncated payload while reading tensor {name!r}")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(dims)
        tensors[name] = torch.from_numpy(arr.copy())
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(
            f"payload has {len(payload) - offset} trailing bytes beyond declared tensors"
        )
    return tensors, meta
