"""Self-describing binary container for grids, fields and data bundles.

Format (little-endian, C-order float64 payload):

    line 1:  ``TCC1 <kind>``
    line 2:  JSON object of scalar attributes (sorted keys)
    line 3:  JSON list of array records ``[name, dtype, shape]``
    line 4:  ``---``
    then the raw bytes of each listed array, concatenated in order.

Round trips are bit exact and writes are deterministic, so file digests can
serve as reproducibility checks.
"""

from __future__ import annotations

import json

import numpy as np

from .core import BoundaryData, CoeffField, Grid, ScalarField3D

_MAGIC = "TCC1"


def save_container(path, kind: str, attrs: dict, arrays: dict):
    records = [[name, str(np.asarray(a).dtype), list(np.asarray(a).shape)]
               for name, a in arrays.items()]
    header = (
        f"{_MAGIC} {kind}\n"
        + json.dumps(attrs, sort_keys=True) + "\n"
        + json.dumps(records) + "\n"
        + "---\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        for name, a in arrays.items():
            f.write(np.ascontiguousarray(a).tobytes())


def load_container(path, expect_kind: str | None = None):
    with open(path, "rb") as f:
        magic = f.readline().decode("ascii").strip()
        if not magic.startswith(_MAGIC):
            raise ValueError(f"{path}: not a TCC container")
        kind = magic.split(" ", 1)[1]
        if expect_kind is not None and kind != expect_kind:
            raise ValueError(f"{path}: expected kind '{expect_kind}', found '{kind}'")
        attrs = json.loads(f.readline().decode("ascii"))
        records = json.loads(f.readline().decode("ascii"))
        sep = f.readline().decode("ascii").strip()
        if sep != "---":
            raise ValueError(f"{path}: malformed header")
        arrays = {}
        for name, dtype, shape in records:
            n = int(np.prod(shape)) if shape else 1
            buf = f.read(n * np.dtype(dtype).itemsize)
            arrays[name] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    return kind, attrs, arrays


# ---------------------------------------------------------------------------
# typed wrappers


def save_scalar_field(path, fld: ScalarField3D, attrs: dict | None = None):
    a = dict(attrs or {})
    save_container(path, "scalar_field", a,
                   {"values": fld.values, "xs": fld.xs, "ys": fld.ys, "zs": fld.zs})


def load_scalar_field(path):
    _, attrs, arr = load_container(path, "scalar_field")
    return ScalarField3D(arr["values"], arr["xs"], arr["ys"], arr["zs"]), attrs


def save_coeff_field(path, fld: CoeffField, attrs: dict | None = None):
    a = dict(attrs or {})
    a.update(fld.grid.attrs())
    a["boundary_zero"] = bool(fld.boundary_zero)
    save_container(path, "coeff_field", a, {"values": fld.values})


def load_coeff_field(path):
    _, attrs, arr = load_container(path, "coeff_field")
    grid = Grid(B=attrs["B"], Mz=attrs["Mz"], A=attrs["A"], sigma=attrs["sigma"], h0=attrs["h0"])
    return CoeffField(arr["values"], grid, boundary_zero=attrs["boundary_zero"]), attrs


def save_boundary_data(path, data: BoundaryData, attrs: dict | None = None):
    a = dict(attrs or {})
    a.update(data.grid.attrs())
    a["requested_noise"] = data.requested_noise
    arrays = {"alphas": data.alphas}
    for key in BoundaryData.LATERAL:
        arrays[f"face_{key}"] = data.faces[key]
        arrays[f"fz_{key}"] = data.fz[key]
    arrays["face_top"] = data.faces["top"]
    arrays["fx_top"] = data.fx_top
    arrays["fy_top"] = data.fy_top
    save_container(path, "boundary_data", a, arrays)


def load_boundary_data(path):
    _, attrs, arr = load_container(path, "boundary_data")
    grid = Grid(B=attrs["B"], Mz=attrs["Mz"], A=attrs["A"], sigma=attrs["sigma"], h0=attrs["h0"])
    faces = {key: arr[f"face_{key}"] for key in BoundaryData.LATERAL}
    faces["top"] = arr["face_top"]
    fz = {key: arr[f"fz_{key}"] for key in BoundaryData.LATERAL}
    data = BoundaryData(arr["alphas"], faces, fz, arr["fx_top"], arr["fy_top"], grid,
                        requested_noise=attrs.get("requested_noise", 0.0))
    return data, attrs
