"""Low-dimensional training targets for annotation patches.

Two encodings are provided: PCA of the raw flattened annotation patch, and
PCA of the pairwise same-segment indicator vector computed over all
unordered pixel pairs of the patch.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import ndimage

from . import _binio
from .errors import ConfigError, FormatError, ShapeError

CODEC_MAGIC = b"N4PC"
EDGE_SENTINEL = -1


@dataclass(frozen=True)
class PcaCodec:
    mean: np.ndarray                # (input_dim,)
    basis: np.ndarray               # (code_dim, input_dim), orthonormal rows
    explained_variance: np.ndarray  # (code_dim,), non-increasing

    @property
    def input_dim(self) -> int:
        return self.basis.shape[1]

    @property
    def code_dim(self) -> int:
        return self.basis.shape[0]


def _flatten_patches(arr: np.ndarray, input_dim: int):
    """Return ``(flat (K, d), leading shape)`` for flat or ``N x N`` input."""
    if arr.ndim >= 1 and arr.shape[-1] == input_dim:
        lead = arr.shape[:-1]
    elif arr.ndim >= 2 and arr.shape[-1] * arr.shape[-2] == input_dim:
        lead = arr.shape[:-2]
    else:
        raise ShapeError(f"patch shape {arr.shape} does not match input dim {input_dim}")
    return arr.reshape(-1, input_dim), lead


def _canonical_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each row so its largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(vectors), axis=1)
    signs = np.sign(vectors[np.arange(len(vectors)), idx])
    signs[signs == 0] = 1.0
    return vectors * signs[:, None]


def fit_pca(samples, code_dim: int, chunk: int = 512) -> PcaCodec:
    """Fit a PCA codec.

    ``samples`` is ``(n, d)`` (boolean/uint8 input is fine).  With ``n >= d``
    the covariance matrix is diagonalised directly; otherwise the ``n x n``
    Gram matrix is, and the principal directions are recovered from the
    samples.  Both give the same subspace.
    """
    x = np.asarray(samples)
    if x.ndim != 2:
        raise ShapeError(f"expected (n, d) samples, got {x.shape}")
    n, d = x.shape
    if code_dim < 1 or code_dim > d:
        raise ConfigError(f"code_dim {code_dim} must lie in [1, {d}]")
    if n < code_dim:
        raise ConfigError(f"need at least {code_dim} samples, got {n}")

    mean = np.zeros(d)
    for s in range(0, n, chunk):
        mean += x[s:s + chunk].astype(np.float64).sum(axis=0)
    mean /= n
    denom = max(n - 1, 1)
    # eigenvalues below this are numerical noise; scaled by raw data energy
    energy = sum(float(np.square(x[s:s + chunk].astype(np.float64)).sum())
                 for s in range(0, n, chunk))
    tol = 1e-12 * max(energy, 1.0)

    if n >= d:
        cov = np.zeros((d, d))
        for s in range(0, n, chunk):
            c = x[s:s + chunk].astype(np.float64) - mean
            cov += c.T @ c
        cov /= denom
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(evals)[::-1][:code_dim]
        variance = evals[order] * denom
        variance = np.where(variance > tol, evals[order], 0.0)
        basis = evecs[:, order].T
    else:
        gram = np.zeros((n, n))
        for s in range(0, n, chunk):
            a = x[s:s + chunk].astype(np.float64) - mean
            for t in range(s, n, chunk):
                b = x[t:t + chunk].astype(np.float64) - mean
                block = a @ b.T
                gram[s:s + chunk, t:t + chunk] = block
                gram[t:t + chunk, s:s + chunk] = block.T
        evals, evecs = np.linalg.eigh(gram)
        order = np.argsort(evals)[::-1]
        evals, evecs = evals[order], evecs[:, order]
        keep = min(code_dim, int(np.sum(evals > tol)))
        basis = np.zeros((code_dim, d))
        for s in range(0, n, chunk):
            c = x[s:s + chunk].astype(np.float64) - mean
            basis[:keep] += evecs[s:s + chunk, :keep].T @ c
        if keep:
            basis[:keep] /= np.sqrt(evals[:keep])[:, None]
        if keep < code_dim:
            basis = _complete_basis(basis, keep)
        variance = np.zeros(code_dim)
        variance[:keep] = evals[:keep] / denom
    return PcaCodec(mean, _canonical_signs(basis), variance)


def as_stored(codec: PcaCodec) -> PcaCodec:
    """The codec exactly as :func:`save_codec` persists it (float32)."""
    return PcaCodec(codec.mean.astype(np.float32), codec.basis.astype(np.float32),
                    codec.explained_variance.astype(np.float32))


def _complete_basis(basis: np.ndarray, keep: int) -> np.ndarray:
    """Fill rows ``keep:`` with unit vectors orthogonal to the first rows."""
    code_dim, d = basis.shape
    rows = [basis[k] for k in range(keep)]
    for e in range(d):
        if len(rows) == code_dim:
            break
        v = np.zeros(d)
        v[e] = 1.0
        for r in rows:
            v -= (r @ v) * r
        norm = np.linalg.norm(v)
        if norm > 1e-6:
            rows.append(v / norm)
    return np.array(rows)


def encode(codec: PcaCodec, patches) -> np.ndarray:
    """Project annotation patch(es) onto the codec basis.

    Accepts a single patch (flat or ``N x N``) or a batch; returns codes
    with matching leading shape.
    """
    flat, lead = _flatten_patches(np.asarray(patches), codec.input_dim)
    codes = (flat.astype(np.float64) - codec.mean) @ codec.basis.astype(np.float64).T
    return codes.reshape(lead + (codec.code_dim,))


def decode(codec: PcaCodec, codes, clamp: bool = True) -> np.ndarray:
    """Map codes back to flat annotation patches (clamped to [0, 1])."""
    c = np.asarray(codes, dtype=np.float64)
    if c.shape[-1] != codec.code_dim:
        raise ShapeError(f"code length {c.shape[-1]} != {codec.code_dim}")
    out = c @ codec.basis.astype(np.float64) + codec.mean
    return np.clip(out, 0.0, 1.0) if clamp else out


def save_codec(codec: PcaCodec, path) -> None:
    with open(path, "wb") as fh:
        _binio.write_magic(fh, CODEC_MAGIC)
        _binio.write_u32(fh, codec.input_dim, codec.code_dim)
        _binio.write_f32(fh, codec.mean)
        _binio.write_f32(fh, codec.basis)
        _binio.write_f32(fh, codec.explained_variance)


def load_codec(path) -> PcaCodec:
    with open(path, "rb") as fh:
        _binio.read_magic(fh, CODEC_MAGIC)
        d, k = _binio.read_u32(fh, 2)
        mean = _binio.read_f32(fh, d)
        basis = _binio.read_f32(fh, k * d).reshape(k, d)
        var = _binio.read_f32(fh, k)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after codec payload")
    return PcaCodec(mean, basis, var)


# -- pairwise ("alternative") encoding --------------------------------------

@dataclass(frozen=True)
class PairwiseEncoding:
    n: int

    @property
    def length(self) -> int:
        p = self.n * self.n
        return p * (p - 1) // 2

    @cached_property
    def pair_index(self) -> tuple[np.ndarray, np.ndarray]:
        """Flat pixel indices ``(l, m)`` with ``l < m`` in lexicographic order."""
        return np.triu_indices(self.n * self.n, k=1)


def pairwise_vector(segmentation, enc: PairwiseEncoding) -> np.ndarray:
    """Binary same-segment indicator for every pixel pair.

    ``segmentation`` is one ``N x N`` label array or a ``(B, N, N)`` batch.
    Returns ``uint8`` of length ``L`` (or ``(B, L)``).
    """
    seg = np.asarray(segmentation)
    if seg.shape[-2:] != (enc.n, enc.n):
        raise ShapeError(f"segmentation shape {seg.shape} != N={enc.n}")
    single = seg.ndim == 2
    flat = seg.reshape(-1, enc.n * enc.n)
    l, m = enc.pair_index
    out = (flat[:, l] == flat[:, m]).astype(np.uint8)
    return out[0] if single else out


def segments_from_edges(annotation) -> np.ndarray:
    """Derive segment labels for a binary edge patch (or batch of them).

    Non-edge pixels get the id of their 4-connected component; edge pixels
    share ``EDGE_SENTINEL``.
    """
    ann = np.asarray(annotation)
    single = ann.ndim == 2
    batch = ann.reshape((-1,) + ann.shape[-2:]) >= 0.5
    out = np.empty(batch.shape, dtype=np.int32)
    for k, edge in enumerate(batch):
        labels, _ = ndimage.label(~edge)
        labels[edge] = EDGE_SENTINEL
        out[k] = labels
    return out[0] if single else out


def fit_alternative_codec(segmentations, enc: PairwiseEncoding, code_dim: int) -> PcaCodec:
    """PCA over pairwise indicator vectors of the given segmentations."""
    vectors = pairwise_vector(np.asarray(segmentations).reshape(-1, enc.n, enc.n), enc)
    return fit_pca(vectors, code_dim)


def encode_pairwise(codec: PcaCodec, segmentations, enc: PairwiseEncoding) -> np.ndarray:
    return encode(codec, pairwise_vector(segmentations, enc).astype(np.float64))
