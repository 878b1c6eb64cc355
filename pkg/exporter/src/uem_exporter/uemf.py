"""Writer/reader for the engine's binary feature-matrix format.

Kept self-contained on purpose: the exporter talks to the engine only
through files, so it carries its own copy of the 17-byte header layout
(magic ``UEMF``, u32 version=1, u32 rows, u32 cols, u8 dtype tag 1 for
float32) followed by the row-major little-endian float32 payload.
"""

import numpy as np

_MAGIC = b"UEMF"
_VERSION = 1
_DTYPE_F32 = 1


class FeatureFormatError(ValueError):
    """A feature matrix or file violates the on-disk contract."""


def write_uemf(path, matrix: np.ndarray) -> None:
    """Write one 2-D matrix as float32; refuses non-finite values."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise FeatureFormatError(f"feature matrices are 2-D, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise FeatureFormatError("refusing to write non-finite values")
    rows, cols = matrix.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(_VERSION.to_bytes(4, "little"))
        fh.write(int(rows).to_bytes(4, "little"))
        fh.write(int(cols).to_bytes(4, "little"))
        fh.write(_DTYPE_F32.to_bytes(1, "little"))
        fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def read_uemf(path) -> np.ndarray:
    """Load one matrix back as float32 (enough for sanity checks here)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise FeatureFormatError(f"bad magic {blob[:4]!r}")
    version = int.from_bytes(blob[4:8], "little")
    if version != _VERSION:
        raise FeatureFormatError(f"unsupported version {version}")
    rows = int.from_bytes(blob[8:12], "little")
    cols = int.from_bytes(blob[12:16], "little")
    if blob[16] != _DTYPE_F32:
        raise FeatureFormatError(f"unsupported dtype tag {blob[16]}")
    payload = blob[17:]
    if len(payload) != rows * cols * 4:
        raise FeatureFormatError(
            f"payload holds {len(payload)} bytes, header promises {rows * cols * 4}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy()
