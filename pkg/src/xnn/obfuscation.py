"""Keyed feature-map obfuscation: patch permutation followed by a channel mixing matrix.

Convention (normative, also recorded in the key file): for a feature map ``fm`` of
shape ``(P, D)`` and a key ``(perm, M)``::

    out[i] = fm[perm[i]] @ M

i.e. rows are permuted first, then every row is multiplied by the same ``D x D``
matrix. Batched inputs of shape ``(..., P, D)`` are accepted everywhere.

Key file layout (little-endian)::

    b"XNNK" | version u16 | matrix_kind u8 | rng_id u8 | seed u64 | P u32 | D u32
    | perm u32[P] | matrix f64[D*D] (row-major) | crc32 u32 over all preceding bytes
"""
from __future__ import annotations

import hashlib
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    InvalidArgumentError,
    KeyInvariantError,
    NumericError,
    ShapeError,
    TruncatedFileError,
    VersionMismatchError,
)

MAGIC = b"XNNK"
KEY_FILE_VERSION = 1
# rng_id 1: numpy PCG64 bit generator, standard_normal (ziggurat) + permutation
RNG_PCG64 = 1
MATRIX_KINDS = ("orthogonal", "gaussian")
ORTHO_TOL = 1e-6
MAX_CONDITION = 1e6

_HEADER = struct.Struct("<4sHBBQII")


@dataclass(frozen=True, eq=False)
class ObfuscationKey:
    seed: int
    patches: int
    dim: int
    perm: np.ndarray
    matrix: np.ndarray
    matrix_kind: str = "orthogonal"
    rng_id: int = RNG_PCG64

    def __post_init__(self):
        perm = np.asarray(self.perm, dtype=np.int64).copy()
        matrix = np.asarray(self.matrix, dtype=np.float64).copy()
        perm.setflags(write=False)
        matrix.setflags(write=False)
        object.__setattr__(self, "perm", perm)
        object.__setattr__(self, "matrix", matrix)

    def __eq__(self, other):
        if not isinstance(other, ObfuscationKey):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    def __hash__(self):
        return hash(self.to_bytes())

    def __repr__(self):
        return (f"ObfuscationKey(seed={self.seed}, patches={self.patches}, dim={self.dim}, "
                f"matrix_kind={self.matrix_kind!r}, fingerprint={self.fingerprint()})")

    def to_bytes(self) -> bytes:
        body = _HEADER.pack(MAGIC, KEY_FILE_VERSION, MATRIX_KINDS.index(self.matrix_kind),
                            self.rng_id, self.seed, self.patches, self.dim)
        body += self.perm.astype("<u4").tobytes()
        body += self.matrix.astype("<f8").tobytes(order="C")
        return body + struct.pack("<I", zlib.crc32(body))

    def fingerprint(self) -> str:
        """Short hash of the key bytes; safe to publish, reveals nothing about the key."""
        return hashlib.sha256(self.to_bytes()).hexdigest()[:16]

    @property
    def is_identity(self) -> bool:
        return bool(np.array_equal(self.perm, np.arange(self.patches))
                    and np.array_equal(self.matrix, np.eye(self.dim)))

    def validate(self) -> None:
        """Raise KeyInvariantError if any key invariant fails."""
        if self.matrix_kind not in MATRIX_KINDS:
            raise KeyInvariantError(f"unknown matrix kind {self.matrix_kind!r}")
        if self.perm.shape != (self.patches,):
            raise KeyInvariantError(f"perm has shape {self.perm.shape}, expected ({self.patches},)")
        if not np.array_equal(np.sort(self.perm), np.arange(self.patches)):
            raise KeyInvariantError("perm is not a bijection on 0..P-1")
        if self.matrix.shape != (self.dim, self.dim):
            raise KeyInvariantError(f"matrix has shape {self.matrix.shape}, expected ({self.dim}, {self.dim})")
        if not np.all(np.isfinite(self.matrix)):
            raise KeyInvariantError("matrix has non-finite entries")
        if self.matrix_kind == "orthogonal":
            err = np.max(np.abs(self.matrix.T @ self.matrix - np.eye(self.dim)))
            if err > ORTHO_TOL:
                raise KeyInvariantError(f"matrix is not orthogonal (max deviation {err:.3g})")
        elif np.linalg.cond(self.matrix) > MAX_CONDITION:
            raise KeyInvariantError("gaussian matrix condition number exceeds 1e6")


def _check_dims(patches, dim):
    for name, v in (("patches", patches), ("dim", dim)):
        if int(v) != v or v < 1:
            raise InvalidArgumentError(f"{name} must be a positive integer, got {v!r}")


def _orthogonal(rng: np.random.Generator, dim: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def keygen(seed: int, patches: int, dim: int, matrix_kind: str = "orthogonal") -> ObfuscationKey:
    """Generate an obfuscation key; a pure function of its arguments."""
    _check_dims(patches, dim)
    if matrix_kind not in MATRIX_KINDS:
        raise InvalidArgumentError(f"matrix_kind must be one of {MATRIX_KINDS}, got {matrix_kind!r}")
    if not 0 <= seed < 2 ** 64:
        raise InvalidArgumentError("seed must fit in an unsigned 64-bit integer")
    rng = np.random.Generator(np.random.PCG64(seed))
    perm = rng.permutation(patches)
    if matrix_kind == "orthogonal":
        matrix = _orthogonal(rng, dim)
    else:
        while True:
            matrix = rng.standard_normal((dim, dim))
            if np.linalg.cond(matrix) <= MAX_CONDITION:
                break
    return ObfuscationKey(int(seed), int(patches), int(dim), perm, matrix, matrix_kind)


def identity_key(patches: int, dim: int) -> ObfuscationKey:
    """The no-op key (identity permutation, identity matrix)."""
    _check_dims(patches, dim)
    return ObfuscationKey(0, patches, dim, np.arange(patches), np.eye(dim), "orthogonal")


def _check_fm(fm, key):
    fm = np.asarray(fm)
    if fm.ndim < 2 or fm.shape[-2:] != (key.patches, key.dim):
        raise ShapeError(f"feature map shape {fm.shape} does not match key (P={key.patches}, D={key.dim})")
    if not np.all(np.isfinite(fm)):
        raise NumericError("feature map contains non-finite values")
    return fm


def obfuscate(fm, key: ObfuscationKey) -> np.ndarray:
    """Apply ``out[i] = fm[perm[i]] @ M``; the input dtype is preserved."""
    fm = _check_fm(fm, key)
    dtype = fm.dtype if np.issubdtype(fm.dtype, np.floating) else np.float64
    out = fm[..., key.perm, :].astype(np.float64) @ key.matrix
    return out.astype(dtype, copy=False)


def invert_obfuscation(fm_obf, key: ObfuscationKey) -> np.ndarray:
    """Undo :func:`obfuscate`. Test oracle only; owners never need it."""
    fm_obf = _check_fm(fm_obf, key)
    dtype = fm_obf.dtype if np.issubdtype(fm_obf.dtype, np.floating) else np.float64
    y = fm_obf.astype(np.float64)
    if key.matrix_kind == "orthogonal":
        rows = y @ key.matrix.T
    else:
        if np.linalg.cond(key.matrix) > MAX_CONDITION:
            raise NumericError("mixing matrix is too ill-conditioned to invert")
        # rows @ M = y  <=>  M^T rows^T = y^T
        flat = y.reshape(-1, key.dim)
        rows = np.linalg.solve(key.matrix.T, flat.T).T.reshape(y.shape)
    out = np.empty_like(rows)
    out[..., key.perm, :] = rows
    return out.astype(dtype, copy=False)


def key_from_bytes(data: bytes) -> ObfuscationKey:
    if len(data) < 4 or data[:4] != MAGIC:
        if len(data) < 4 and MAGIC.startswith(data):
            raise TruncatedFileError("key file truncated inside the magic")
        raise BadMagicError("not an XNN key file (bad magic)")
    if len(data) < _HEADER.size:
        raise TruncatedFileError("key file truncated inside the header")
    magic, version, kind, rng_id, seed, patches, dim = _HEADER.unpack_from(data)
    if version != KEY_FILE_VERSION:
        raise VersionMismatchError(f"key file version {version}, this build reads {KEY_FILE_VERSION}")
    expected = _HEADER.size + 4 * patches + 8 * dim * dim + 4
    if len(data) < expected:
        raise TruncatedFileError(f"key file has {len(data)} bytes, expected {expected}")
    if len(data) > expected:
        raise ChecksumError("trailing bytes after key checksum")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("key file CRC32 mismatch")
    if kind >= len(MATRIX_KINDS):
        raise KeyInvariantError(f"unknown matrix kind code {kind}")
    off = _HEADER.size
    perm = np.frombuffer(data, dtype="<u4", count=patches, offset=off)
    matrix = np.frombuffer(data, dtype="<f8", count=dim * dim, offset=off + 4 * patches)
    key = ObfuscationKey(seed, patches, dim, perm, matrix.reshape(dim, dim), MATRIX_KINDS[kind], rng_id)
    key.validate()
    return key


def key_save(key: ObfuscationKey, path) -> None:
    key.validate()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(key.to_bytes())
    os.replace(tmp, path)


def key_load(path) -> ObfuscationKey:
    return key_from_bytes(Path(path).read_bytes())


class KeySampler:
    """Stream of fresh keys from one (P, D, matrix_kind) family.

    ``frozen`` pins the stream to a single key (e.g. the identity key) for the
    degenerate no-obfuscation adversary.
    """

    def __init__(self, seed: int, patches: int, dim: int, matrix_kind: str = "orthogonal",
                 frozen: ObfuscationKey | None = None):
        self.patches, self.dim, self.matrix_kind = patches, dim, matrix_kind
        self.frozen = frozen
        self._seeds = np.random.Generator(np.random.PCG64(seed))

    def __call__(self) -> ObfuscationKey:
        if self.frozen is not None:
            return self.frozen
        seed = int(self._seeds.integers(0, 2 ** 63))
        return keygen(seed, self.patches, self.dim, self.matrix_kind)
