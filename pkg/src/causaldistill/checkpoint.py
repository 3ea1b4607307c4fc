"""Binary parameter checkpoints.

Byte layout (little-endian, version 1):

    offset 0   8 bytes   magic ``b"CDSTL01\\n"``
    offset 8   8 bytes   uint64 header length H
    offset 16  H bytes   UTF-8 JSON header
    offset 16+H          float64 parameter blob, row-major, layer order
                         W0, b0, W1, b1, ... (W shaped (fan_in, fan_out))

The JSON header is self-describing: it always carries ``kind``, ``widths``,
``activation`` and ``param_count``; denoiser/generator checkpoints add the
noise-schedule fields, the covariate dimension, ``sigma_init`` and the
training standardization stats. See README for the documented contract.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .nn import Mlp

__all__ = ["MAGIC", "save_mlp", "load_mlp", "write_checkpoint", "read_checkpoint"]

MAGIC = b"CDSTL01\n"


def write_checkpoint(path: str | Path, header: dict, params: np.ndarray) -> None:
    params = np.ascontiguousarray(params, dtype=np.float64)
    header = dict(header)
    header["param_count"] = int(params.size)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint64(len(blob)).tobytes())
        fh.write(blob)
        fh.write(params.tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic {raw[:8]!r})")
    hlen = int(np.frombuffer(raw[8:16], dtype=np.uint64)[0])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    params = np.frombuffer(raw[16 + hlen:], dtype=np.float64).copy()
    if params.size != header["param_count"]:
        raise ValueError(f"{path}: expected {header['param_count']} parameters, found {params.size}")
    return header, params


def mlp_header(net: Mlp) -> dict:
    return {"kind": "mlp", "widths": list(net.widths), "activation": net.activation}


def mlp_from_header(header: dict, params: np.ndarray) -> Mlp:
    net = Mlp(header["widths"], activation=header["activation"])
    net.set_params_flat(params)
    return net


def save_mlp(net: Mlp, path: str | Path, extra: dict | None = None) -> None:
    header = mlp_header(net)
    if extra:
        header.update(extra)
    write_checkpoint(path, header, net.params_flat())


def load_mlp(path: str | Path) -> Mlp:
    header, params = read_checkpoint(path)
    return mlp_from_header(header, params)
