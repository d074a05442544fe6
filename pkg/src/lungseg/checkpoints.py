"""Checkpoint archive format.

Layout: the magic line ``SGSEGCKPT1``, a UTF-8 text header (format version,
``[config]`` and ``[meta]`` key = value sections, a ``[params]`` section with
one ``name dtype dims...`` line per tensor), a ``[payload]`` marker, then the
raw little-endian 32-bit float payloads concatenated in header order.
Reloading restores parameters bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

MAGIC = b"SGSEGCKPT1"
FORMAT_VERSION = 1
_PAYLOAD_MARKER = b"\n[payload]\n"


class CheckpointError(Exception):
    code = "checkpoint-error"


class CheckpointFormatError(CheckpointError):
    code = "bad-format"


class CheckpointVersionError(CheckpointError):
    code = "version-mismatch"


class CheckpointTruncatedError(CheckpointError):
    code = "truncated-payload"


class CheckpointShapeError(CheckpointError):
    code = "shape-mismatch"


@dataclass
class CheckpointData:
    kind: str
    config: dict[str, str]
    meta: dict[str, str]
    params: dict[str, np.ndarray]


def save_checkpoint(
    path: Path,
    kind: str,
    config: dict[str, str],
    meta: dict[str, str],
    params: dict[str, torch.Tensor],
) -> None:
    lines = [MAGIC.decode(), f"version = {FORMAT_VERSION}", f"kind = {kind}"]
    lines.append("[config]")
    lines += [f"{k} = {v}" for k, v in config.items()]
    lines.append("[meta]")
    lines += [f"{k} = {v}" for k, v in meta.items()]
    lines.append("[params]")
    arrays = []
    for name, tensor in params.items():
        arr = tensor.detach().cpu().to(torch.float32).numpy()
        arrays.append(arr)
        dims = " ".join(str(d) for d in arr.shape) or "0"
        lines.append(f"{name} float32 {dims}")
    header = "\n".join(lines).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)
    Path(path).write_bytes(header + _PAYLOAD_MARKER + payload)


def _parse_kv(line: str, path: Path) -> tuple[str, str]:
    if "=" not in line:
        raise CheckpointFormatError(f"{path}: malformed header line {line!r}")
    k, v = line.split("=", 1)
    return k.strip(), v.strip()


def load_checkpoint(path: Path) -> CheckpointData:
    path = Path(path)
    blob = path.read_bytes()
    if not blob.startswith(MAGIC):
        raise CheckpointFormatError(f"{path}: bad magic, not a checkpoint archive")
    split_at = blob.find(_PAYLOAD_MARKER)
    if split_at < 0:
        raise CheckpointFormatError(f"{path}: missing payload marker")
    header = blob[:split_at].decode("utf-8").splitlines()
    payload = blob[split_at + len(_PAYLOAD_MARKER) :]

    k, v = _parse_kv(header[1], path)
    if k != "version":
        raise CheckpointFormatError(f"{path}: missing version line")
    if int(v) != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {v} unsupported (expected {FORMAT_VERSION})"
        )
    k, v = _parse_kv(header[2], path)
    if k != "kind":
        raise CheckpointFormatError(f"{path}: missing kind line")
    kind = v

    config: dict[str, str] = {}
    meta: dict[str, str] = {}
    shapes: list[tuple[str, tuple[int, ...]]] = []
    section = None
    for line in header[3:]:
        line = line.strip()
        if not line:
            continue
        if line in ("[config]", "[meta]", "[params]"):
            section = line
            continue
        if section == "[config]":
            k, v = _parse_kv(line, path)
            config[k] = v
        elif section == "[meta]":
            k, v = _parse_kv(line, path)
            meta[k] = v
        elif section == "[params]":
            parts = line.split()
            if len(parts) < 3 or parts[1] != "float32":
                raise CheckpointFormatError(f"{path}: malformed param line {line!r}")
            dims = tuple(int(d) for d in parts[2:])
            if dims == (0,):
                dims = ()
            shapes.append((parts[0], dims))
        else:
            raise CheckpointFormatError(f"{path}: header line outside any section: {line!r}")

    expected = sum(int(np.prod(s, dtype=np.int64)) for _, s in shapes) * 4
    if len(payload) < expected:
        raise CheckpointTruncatedError(
            f"{path}: truncated payload, expected {expected} bytes, got {len(payload)}"
        )
    if len(payload) > expected:
        raise CheckpointFormatError(
            f"{path}: payload longer than declared ({len(payload)} > {expected})"
        )

    params: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in shapes:
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        params[name] = arr.reshape(shape).copy()
        offset += count * 4
    return CheckpointData(kind=kind, config=config, meta=meta, params=params)


def load_params_into(module: torch.nn.Module, data: CheckpointData, path: Path) -> None:
    """Copy checkpoint arrays into a model; shapes must match exactly."""
    model_params = dict(module.named_parameters())
    if set(model_params) != set(data.params):
        missing = sorted(set(model_params) ^ set(data.params))
        raise CheckpointShapeError(f"{path}: parameter set mismatch, offenders {missing}")
    with torch.no_grad():
        for name, p in model_params.items():
            arr = data.params[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointShapeError(
                    f"{path}: shape mismatch for {name}: "
                    f"checkpoint {tuple(arr.shape)} vs model {tuple(p.shape)}"
                )
            p.copy_(torch.from_numpy(arr))
