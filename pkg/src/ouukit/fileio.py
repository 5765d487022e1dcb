"""Binary container for datasets, models, and bases.

Layout: magic bytes "MRDINO1\\0", a little-endian uint64 byte length,
a UTF-8 JSON header, then float64 little-endian payload arrays in the
order given by the header's shape table. Headers are canonical (sorted
keys), and floats round-trip exactly through JSON repr, so rewriting
the same content yields byte-identical files.
"""

import json
import struct

import numpy as np

from .surrogate import NetworkSpec, SurrogateModel, TrainingDataset
from .util import atomic_write_bytes, canonical_json, sha256_hex

MAGIC = b"MRDINO1\x00"
VERSION = 1


class FileFormatError(Exception):
    pass


def _pack(header: dict, arrays: list) -> bytes:
    hdr = canonical_json(header).encode("utf-8")
    blob = [MAGIC, struct.pack("<Q", len(hdr)), hdr]
    for arr in arrays:
        blob.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(blob)


def _unpack(data: bytes):
    if data[: len(MAGIC)] != MAGIC:
        raise FileFormatError("bad magic bytes")
    off = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", data, off)
    off += 8
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen
    return header, data, off


def _take(data: bytes, off: int, shape) -> tuple:
    count = int(np.prod(shape)) if shape else 1
    nbytes = count * 8
    if off + nbytes > len(data):
        raise FileFormatError("payload shorter than header dimensions")
    arr = np.frombuffer(data[off:off + nbytes], dtype="<f8").reshape(shape).copy()
    return arr, off + nbytes


def _check_exhausted(data: bytes, off: int):
    if off != len(data):
        raise FileFormatError(
            f"payload byte count mismatch: {len(data) - off} trailing bytes"
        )


# ---------------------------------------------------------------------------
# dataset files


def save_dataset(path: str, ds: TrainingDataset, seeds: dict,
                 config_hash: str, basis_ids: dict = None) -> str:
    header = {
        "kind": "dataset",
        "version": VERSION,
        "n": int(ds.n),
        "r_M": int(ds.m_r.shape[1]),
        "d_Z": int(ds.z.shape[1]),
        "r_U": int(ds.u_r.shape[1]),
        "has_jacobian": bool(ds.has_jacobian),
        "seeds": seeds,
        "config_hash": config_hash,
        "basis_ids": basis_ids or {},
        "aux": {
            "state_norm_sq": None if ds.state_norm_sq is None else ds.state_norm_sq.tolist(),
            "trunc_norm_sq": None if ds.trunc_norm_sq is None else ds.trunc_norm_sq.tolist(),
        },
    }
    arrays = [ds.m_r, ds.z, ds.u_r]
    if ds.has_jacobian:
        arrays.append(ds.j_r)
    data = _pack(header, arrays)
    atomic_write_bytes(path, data)
    return sha256_hex(data)


def load_dataset(path: str) -> TrainingDataset:
    with open(path, "rb") as fh:
        data = fh.read()
    header, data, off = _unpack(data)
    if header.get("kind") != "dataset":
        raise FileFormatError(f"not a dataset file: kind={header.get('kind')!r}")
    n, r_m, d_z, r_u = (header[k] for k in ("n", "r_M", "d_Z", "r_U"))
    m_r, off = _take(data, off, (n, r_m))
    z, off = _take(data, off, (n, d_z))
    u_r, off = _take(data, off, (n, r_u))
    j_r = None
    if header["has_jacobian"]:
        j_r, off = _take(data, off, (n, r_u, d_z))
    _check_exhausted(data, off)
    aux = header.get("aux", {})
    to_arr = lambda v: None if v is None else np.asarray(v, dtype=float)
    return TrainingDataset(
        m_r=m_r, z=z, u_r=u_r, j_r=j_r, metadata=header,
        state_norm_sq=to_arr(aux.get("state_norm_sq")),
        trunc_norm_sq=to_arr(aux.get("trunc_norm_sq")),
    )


def dataset_file_hash(path: str) -> str:
    with open(path, "rb") as fh:
        return sha256_hex(fh.read())


# ---------------------------------------------------------------------------
# model files


def save_model(path: str, model: SurrogateModel, train_config: dict,
               dataset_hash: str, method: str, n_train: int,
               basis_ids: dict = None) -> str:
    header = {
        "kind": "model",
        "version": VERSION,
        "spec": {
            "r_m": model.spec.r_m,
            "d_z": model.spec.d_z,
            "r_u": model.spec.r_u,
            "hidden": list(model.spec.hidden),
            "activation": model.spec.activation,
        },
        "scalings": {
            "input_scale": model.input_scale.tolist(),
            "output_mean": model.output_mean.tolist(),
            "output_std": model.output_std.tolist(),
        },
        "basis_ids": basis_ids or dict(model.basis_ids),
        "train_config": train_config,
        "dataset_hash": dataset_hash,
        "method": method,
        "n_train": int(n_train),
    }
    arrays = []
    for W, b in zip(model.weights, model.biases):
        arrays.append(W)
        arrays.append(b)
    data = _pack(header, arrays)
    atomic_write_bytes(path, data)
    return sha256_hex(data)


def load_model(path: str):
    with open(path, "rb") as fh:
        data = fh.read()
    header, data, off = _unpack(data)
    if header.get("kind") != "model":
        raise FileFormatError(f"not a model file: kind={header.get('kind')!r}")
    s = header["spec"]
    spec = NetworkSpec(r_m=s["r_m"], d_z=s["d_z"], r_u=s["r_u"],
                       hidden=tuple(s["hidden"]), activation=s["activation"])
    weights, biases = [], []
    widths = spec.layer_widths
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        W, off = _take(data, off, (n_out, n_in))
        b, off = _take(data, off, (n_out,))
        weights.append(W)
        biases.append(b)
    _check_exhausted(data, off)
    sc = header["scalings"]
    model = SurrogateModel(
        spec=spec, weights=weights, biases=biases,
        input_scale=np.asarray(sc["input_scale"], dtype=float),
        output_mean=np.asarray(sc["output_mean"], dtype=float),
        output_std=np.asarray(sc["output_std"], dtype=float),
        basis_ids=header.get("basis_ids", {}),
    )
    return model, header


# ---------------------------------------------------------------------------
# basis files


def save_basis(path: str, kind: str, rank: int, eigvals: np.ndarray,
               modes: np.ndarray, bias: np.ndarray = None,
               extra: dict = None) -> str:
    if kind not in ("pod", "kle"):
        raise ValueError("basis kind must be 'pod' or 'kle'")
    header = {
        "kind": kind,
        "version": VERSION,
        "rank": int(rank),
        "d": int(modes.shape[0]),
        "n_eigvals": int(np.asarray(eigvals).shape[0]),
        "has_bias": bias is not None,
        "projection": "m_weighted",
        "extra": extra or {},
    }
    arrays = [np.asarray(eigvals, float), np.asarray(modes, float)]
    if bias is not None:
        arrays.append(np.asarray(bias, float))
    data = _pack(header, arrays)
    atomic_write_bytes(path, data)
    return sha256_hex(data)


def load_basis(path: str):
    with open(path, "rb") as fh:
        data = fh.read()
    header, data, off = _unpack(data)
    if header.get("kind") not in ("pod", "kle"):
        raise FileFormatError(f"not a basis file: kind={header.get('kind')!r}")
    eigvals, off = _take(data, off, (header["n_eigvals"],))
    modes, off = _take(data, off, (header["d"], header["rank"]))
    bias = None
    if header.get("has_bias"):
        bias, off = _take(data, off, (header["d"],))
    _check_exhausted(data, off)
    return {"header": header, "eigvals": eigvals, "modes": modes, "bias": bias}
