"""Binary dump of solved value/policy tables.

Layout: magic ``CBQV1``, a little-endian uint64 header length, a JSON
header (axes, class table, slice times, config hash), then one record
per slice in ascending time order.  Each record holds, class by class,
a row-major float64 value array followed by the parallel int8 action
array (0 = wait, k = issue layer k).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .solver import Axis, SimplexGrid, Solution, Workspace

MAGIC = b"CBQV1"


def _header_dict(ws: Workspace, config_sha256: str) -> dict:
    axes = [
        {"name": "x1", "lo": ws.x1.lo, "step": ws.x1.step, "n": ws.x1.n},
        {"name": "x2", "lo": ws.x2.lo, "step": ws.x2.step, "n": ws.x2.n},
    ]
    if ws.prior_kind == "gamma":
        axes.append({"name": "p", "lo": ws.p_axis.lo, "step": ws.p_axis.step, "n": ws.p_axis.n})
    else:
        axes.append({"name": "simplex", "cells": ws.simplex.n})
    axes.append({"name": "r", "lo": ws.r_axis.lo, "step": ws.r_axis.step, "n": ws.r_axis.n})
    return {
        "format": "CBQV1",
        "version": 1,
        "config_sha256": config_sha256,
        "prior_kind": ws.prior_kind,
        "beta0": None if ws.prior_kind == "scenario" else ws.beta0,
        "h_time": ws.h_time,
        "n_steps": ws.n_steps,
        "nl": ws.nl,
        "kappa": ws.kappa,
        "n_layers": ws.n_layers,
        "layer_return_periods": list(ws.layers.return_periods),
        "layer_base_oep": list(ws.layers.base_oep),
        "layer_warming_slope": ws.layers.warming_slope,
        "horizon": ws.econ.T,
        "axes": axes,
        "class_shapes": [list(s) for s in ws.class_shapes],
    }


def _slice_nbytes(ws: Workspace) -> int:
    return sum(int(np.prod(s)) * 9 for s in ws.class_shapes)


class DumpWriter:
    """Seek-positioned writer so backward-solved slices land in ascending
    time order; usable as the solver's slice hook."""

    def __init__(self, path, ws: Workspace, config_sha256: str = ""):
        self.path = path
        self.ws = ws
        header = json.dumps(_header_dict(ws, config_sha256), sort_keys=True).encode()
        self._base = len(MAGIC) + 8 + len(header)
        self._slice_bytes = _slice_nbytes(ws)
        self._fh = open(path, "wb")
        self._fh.write(MAGIC)
        self._fh.write(struct.pack("<Q", len(header)))
        self._fh.write(header)
        total = self._base + self._slice_bytes * (ws.n_steps + 1)
        self._fh.truncate(total)

    def write_slice(self, i: int, values: list, policy: list) -> None:
        self._fh.seek(self._base + i * self._slice_bytes)
        for v, p in zip(values, policy):
            self._fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
            self._fh.write(np.ascontiguousarray(p, dtype=np.int8).tobytes())

    def close(self) -> None:
        self._fh.close()

    def __call__(self, i: int, values: list, policy: list) -> None:
        self.write_slice(i, values, policy)


@dataclass
class DumpData:
    """Loaded dump: header plus per-slice per-class arrays."""

    header: dict
    values: list  # [slice][class] float64 arrays
    policy: list  # [slice][class] int8 arrays

    @property
    def config_sha256(self) -> str:
        return self.header.get("config_sha256", "")


def read_dump(path) -> DumpData:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a CBQV1 dump")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        shapes = [tuple(s) for s in header["class_shapes"]]
        n_slices = header["n_steps"] + 1
        values, policy = [], []
        for _ in range(n_slices):
            vs, ps = [], []
            for shape in shapes:
                count = int(np.prod(shape))
                vs.append(np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape))
                ps.append(np.frombuffer(fh.read(count), dtype=np.int8).reshape(shape))
            values.append(vs)
            policy.append(ps)
    return DumpData(header=header, values=values, policy=policy)


def write_solution(path, sol: Solution, config_sha256: str = "") -> None:
    """Write a fully retained solution (keep_values solves) in one pass."""
    w = DumpWriter(path, sol.workspace, config_sha256)
    try:
        for i in sorted(sol.values):
            w.write_slice(i, sol.values[i], sol.policy[i])
    finally:
        w.close()


def section_csv(data: DumpData, slice_index: int, class_index: int, fixed: dict) -> tuple[list, list]:
    """Extract a 2-D section of one slice/class as CSV rows.

    ``fixed`` maps axis positions to indices for all but two axes; the
    two free axes become the row/column coordinates.  Returns
    (header_row, rows).
    """
    arr = data.values[slice_index][class_index]
    free = [ax for ax in range(arr.ndim) if ax not in fixed]
    if len(free) != 2:
        raise ValueError(f"need exactly two free axes, got {len(free)}")
    idx = [slice(None)] * arr.ndim
    for ax, i in fixed.items():
        idx[ax] = i
    section = arr[tuple(idx)]
    header = ["axis%d_index" % free[0], "axis%d_index" % free[1], "value"]
    rows = []
    for i in range(section.shape[0]):
        for j in range(section.shape[1]):
            rows.append([i, j, repr(float(section[i, j]))])
    return header, rows
