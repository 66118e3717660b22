"""Descriptor bank: embed, build, exact cosine kNN, and the ACMB file format.

Bank file layout (little-endian)::

    b"ACMB" | u16 version | u32 D | u32 M | M*D float32 row-major
    | u32 manifest byte length | UTF-8 JSON {"rows": [...], "fingerprint": str}
"""

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from acmnet import model as M
from acmnet.errors import FormatError, MismatchError, ParameterError

BANK_MAGIC = b"ACMB"
BANK_VERSION = 1
UNIT_NORM_TOL = 1e-5


@dataclass
class DescriptorBank:
    matrix: np.ndarray  # (M, D) float32, unit rows
    manifest: list  # per row: {"frame_index", "sequence_id", "condition_id"}
    fingerprint: str

    @property
    def size(self):
        return self.matrix.shape[0]

    @property
    def dim(self):
        return self.matrix.shape[1]

    def frame_indices(self):
        return np.array([r["frame_index"] for r in self.manifest], dtype=np.int64)

    def __eq__(self, other):
        return (
            isinstance(other, DescriptorBank)
            and self.matrix.dtype == other.matrix.dtype
            and np.array_equal(self.matrix, other.matrix)
            and self.manifest == other.manifest
            and self.fingerprint == other.fingerprint
        )


def fingerprint(params):
    h = hashlib.sha256()
    for name, arr in sorted(params.tensors().items()):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()[:16]


def embed(params, images, batch_size=128):
    """Encoder, projector (evaluation mode), L2 normalization.

    An all-zero projector output stays zero instead of being normalized.
    """
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    out = []
    for i in range(0, len(images), batch_size):
        f = M.encoder_forward(params, images[i : i + batch_size])
        out.append(M.projector_forward(params, f, training=False))
    z = np.concatenate(out).astype(np.float64) if out else np.zeros((0, params.config.descriptor_dim))
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    return z / np.maximum(norms, 1e-12)


def build_bank(params, frames):
    if not frames:
        raise ParameterError("cannot build a bank from an empty reference split")
    z = embed(params, np.stack([f.image for f in frames]))
    manifest = [
        {"frame_index": int(f.frame_index), "sequence_id": f.sequence_id,
         "condition_id": f.condition_id}
        for f in frames
    ]
    return DescriptorBank(z.astype(np.float32), manifest, fingerprint(params))


def _rank(sims, k):
    # descending similarity, ties by ascending row id
    order = np.argsort(-sims, kind="stable")
    return order[:k]


def knn_query(bank, query, k):
    """Exact top-``k`` rows by dot product: list of ``(row_id, similarity)``."""
    if not 1 <= k <= bank.size:
        raise ParameterError(f"k must lie in [1, {bank.size}], got {k}")
    q = np.asarray(query, dtype=np.float64).ravel()
    if q.shape[0] != bank.dim:
        raise MismatchError(f"query has dimension {q.shape[0]}, bank has {bank.dim}")
    sims = bank.matrix.astype(np.float64) @ q
    return [(int(r), float(sims[r])) for r in _rank(sims, k)]


def knn_batch(bank, queries, k):
    """Row ids ``(Q, k)`` and similarities ``(Q, k)`` for many queries."""
    if not 1 <= k <= bank.size:
        raise ParameterError(f"k must lie in [1, {bank.size}], got {k}")
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != bank.dim:
        raise MismatchError(f"queries have shape {queries.shape}, bank dimension is {bank.dim}")
    sims = queries @ bank.matrix.astype(np.float64).T
    rows = np.stack([_rank(s, k) for s in sims]) if len(sims) else np.zeros((0, k), np.int64)
    return rows, np.take_along_axis(sims, rows, axis=1)


def save_bank(bank, path):
    m, d = bank.matrix.shape if bank.matrix.ndim == 2 else (0, 0)
    if m == 0:
        raise ParameterError("refusing to save an empty bank")
    if len(bank.manifest) != m:
        raise ParameterError(f"manifest has {len(bank.manifest)} rows, matrix has {m}")
    norms = np.linalg.norm(bank.matrix.astype(np.float64), axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
        raise ParameterError("bank rows must be unit-norm")
    trailer = json.dumps({"rows": bank.manifest, "fingerprint": bank.fingerprint},
                         sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(BANK_MAGIC + struct.pack("<HII", BANK_VERSION, d, m))
        fh.write(np.ascontiguousarray(bank.matrix, dtype="<f4").tobytes())
        fh.write(struct.pack("<I", len(trailer)) + trailer)


def load_bank(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 14 or data[:4] != BANK_MAGIC:
        raise FormatError(f"{path}: bad magic, not an ACMB bank")
    version, d, m = struct.unpack_from("<HII", data, 4)
    if version != BANK_VERSION:
        raise FormatError(f"{path}: unsupported bank version {version}")
    off = 14
    nbytes = 4 * d * m
    if len(data) < off + nbytes + 4:
        raise FormatError(f"{path}: truncated matrix")
    matrix = np.frombuffer(data, dtype="<f4", count=d * m, offset=off).reshape(m, d)
    off += nbytes
    (tlen,) = struct.unpack_from("<I", data, off)
    off += 4
    if len(data) != off + tlen:
        raise FormatError(f"{path}: manifest length mismatch")
    try:
        trailer = json.loads(data[off:].decode("utf-8"))
        rows, fp = trailer["rows"], trailer["fingerprint"]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: unreadable manifest ({exc})") from exc
    if len(rows) != m:
        raise FormatError(f"{path}: manifest has {len(rows)} rows, header says {m}")
    return DescriptorBank(matrix.astype(np.float32), rows, fp)
