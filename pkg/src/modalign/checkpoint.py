"""Self-describing text checkpoints.

Layout: a header (format tag, config digest, dtype), then one record per
parameter (name, shape, then the row-major values hex-encoded on one line).
`float.hex` round-trips float64 exactly, so save/load is lossless and the
file is byte-stable across runs."""
from __future__ import annotations

import numpy as np

from .errors import DataError
from .reporting import atomic_write

FORMAT_TAG = "modalign-checkpoint v1"


def save_checkpoint(path: str, state: dict[str, np.ndarray], config_digest: str = "-") -> None:
    lines = [FORMAT_TAG, f"config_digest {config_digest}", "dtype float64"]
    for name in sorted(state):
        values = np.asarray(state[name], dtype=np.float64)
        shape = "x".join(str(d) for d in values.shape) or "scalar"
        lines.append(f"param {name} {shape}")
        lines.append(" ".join(float(v).hex() for v in values.reshape(-1)))
    lines.append("end")
    atomic_write(path, "\n".join(lines) + "\n")


def load_checkpoint(path: str) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != FORMAT_TAG:
        raise DataError(f"{path}: not a recognized checkpoint file")
    header = {"format": lines[0]}
    state: dict[str, np.ndarray] = {}
    i = 1
    while i < len(lines) and not lines[i].startswith("param ") and lines[i] != "end":
        key, _, value = lines[i].partition(" ")
        header[key] = value
        i += 1
    while i < len(lines) and lines[i] != "end":
        if not lines[i].startswith("param "):
            raise DataError(f"{path}: malformed checkpoint near line {i + 1}")
        _, name, shape_text = lines[i].split(" ", 2)
        shape = () if shape_text == "scalar" else tuple(int(d) for d in shape_text.split("x"))
        values = np.asarray([float.fromhex(v) for v in lines[i + 1].split()], dtype=np.float64)
        expected = int(np.prod(shape)) if shape else 1
        if values.size != expected:
            raise DataError(f"{path}: parameter {name!r} expects {expected} values, got {values.size}")
        state[name] = values.reshape(shape)
        i += 2
    if i >= len(lines) or lines[i] != "end":
        raise DataError(f"{path}: checkpoint truncated (missing end marker)")
    return header, state
