"""Enhanced Biometric Leakage space: twin projection heads.

Two MLPs with identical architecture and independent weights re-encode
latents (``h1``, live stream side) and embedded references (``h2``,
handshake side) into a compact unit-norm space where cosine similarity
is meant to reflect identity rather than pose.

Each head is six linear layers. Hidden blocks run linear -> ReLU ->
layer norm -> (inverted dropout in train mode); the final linear feeds an
L2 normalization, so outputs always sit on the unit hypersphere. All
gradients are computed analytically and validated against central finite
differences in the test suite.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadArchitectureError,
    BadCrcError,
    BadMagicError,
    NonFiniteError,
    StaleCacheError,
    TruncatedError,
)
from .numerics import Rng
from .world import LatentFrame, ReferencePortrait

LN_EPS = 1e-5
DEFAULT_HIDDEN = (257, 256, 256, 192, 160)
DEFAULT_IN = 257
DEFAULT_OUT = 128
HEAD_MAGIC = b"EBLH"
HEAD_VERSION = 1


@dataclass
class EblHead:
    """Parameters of one projection MLP."""

    weights: list[np.ndarray]      # 6 matrices, shape (fan_in, fan_out)
    biases: list[np.ndarray]       # 6 vectors
    ln_gain: list[np.ndarray]      # 5 vectors (hidden layers only)
    ln_bias: list[np.ndarray]      # 5 vectors
    dropout_rate: float = 0.2

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def parameters(self):
        """Flat iteration order used by Adam and the checkpoint codec."""
        for i in range(self.num_layers):
            yield f"W{i}", self.weights[i]
            yield f"b{i}", self.biases[i]
            if i < self.num_layers - 1:
                yield f"g{i}", self.ln_gain[i]
                yield f"beta{i}", self.ln_bias[i]

    def copy(self) -> "EblHead":
        return EblHead(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            [g.copy() for g in self.ln_gain],
            [b.copy() for b in self.ln_bias],
            self.dropout_rate,
        )


@dataclass
class EblPair:
    h1: EblHead
    h2: EblHead

    def copy(self) -> "EblPair":
        return EblPair(self.h1.copy(), self.h2.copy())


def _init_head(rng: Rng, dims: list[int], dropout_rate: float) -> EblHead:
    weights, biases, gains, lbias = [], [], [], []
    n = len(dims) - 1
    for i in range(n):
        fi, fo = dims[i], dims[i + 1]
        bound = np.sqrt(6.0 / (fi + fo))
        weights.append(rng.uniform(-bound, bound, size=(fi, fo)))
        biases.append(np.zeros(fo))
        if i < n - 1:
            gains.append(np.ones(fo))
            lbias.append(np.zeros(fo))
    return EblHead(weights, biases, gains, lbias, dropout_rate)


def init_heads(
    rng: Rng,
    hidden_widths=DEFAULT_HIDDEN,
    in_dim: int = DEFAULT_IN,
    out_dim: int = DEFAULT_OUT,
    dropout_rate: float = 0.2,
) -> EblPair:
    """Build h1/h2 with independent parameter draws from split streams."""
    widths = list(hidden_widths)
    if len(widths) != 5:
        raise BadArchitectureError(f"expected 5 hidden widths, got {len(widths)}")
    if any(w < 8 for w in widths):
        raise BadArchitectureError("hidden widths must all be >= 8")
    if in_dim < 1 or out_dim < 1:
        raise BadArchitectureError("in/out dims must be positive")
    dims = [in_dim] + widths + [out_dim]
    h1 = _init_head(rng.split(11), dims, dropout_rate)
    h2 = _init_head(rng.split(12), dims, dropout_rate)
    return EblPair(h1, h2)


class ForwardCache:
    """Activations saved by a train-mode forward, consumed once by backward."""

    __slots__ = ("inputs", "pre_acts", "xhats", "variances", "masks", "prenorm", "out", "used")

    def __init__(self, inputs, pre_acts, xhats, variances, masks, prenorm, out):
        self.inputs = inputs
        self.pre_acts = pre_acts
        self.xhats = xhats
        self.variances = variances
        self.masks = masks
        self.prenorm = prenorm
        self.out = out
        self.used = False


def forward_batch(
    head: EblHead,
    X: np.ndarray,
    mode: str = "eval",
    rng: Rng | None = None,
) -> tuple[np.ndarray, ForwardCache | None]:
    """Run a batch of rows through the head.

    Returns unit-norm embeddings, plus the activation cache in train mode.
    Train mode applies inverted dropout to hidden activations so eval
    needs no rescaling.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    train = mode == "train"
    if train and head.dropout_rate > 0 and rng is None:
        raise ValueError("train-mode forward with dropout needs an rng")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = head.num_layers
    inputs, pre_acts, xhats, variances, masks = [], [], [], [], []
    h = X
    for i in range(n):
        inputs.append(h)
        a = h @ head.weights[i] + head.biases[i]
        if i < n - 1:
            relu = np.maximum(a, 0.0)
            mean = relu.mean(axis=1, keepdims=True)
            var = relu.var(axis=1, keepdims=True)
            xhat = (relu - mean) / np.sqrt(var + LN_EPS)
            h = head.ln_gain[i] * xhat + head.ln_bias[i]
            if train and head.dropout_rate > 0:
                mask = (rng.random(h.shape) >= head.dropout_rate) / (1.0 - head.dropout_rate)
                h = h * mask
            else:
                mask = None
            pre_acts.append(a)
            xhats.append(xhat)
            variances.append(var)
            masks.append(mask)
        else:
            h = a
    prenorm = np.linalg.norm(h, axis=1, keepdims=True)
    if not np.all(np.isfinite(h)) or np.any(prenorm < 1e-300):
        raise NonFiniteError("non-finite activation in head forward")
    out = h / prenorm
    cache = ForwardCache(inputs, pre_acts, xhats, variances, masks, prenorm, out) if train else None
    return out, cache


def forward(head: EblHead, x: np.ndarray, mode: str = "eval", rng: Rng | None = None):
    """Single-vector forward; see forward_batch."""
    out, cache = forward_batch(head, np.asarray(x, dtype=np.float64)[None, :], mode, rng)
    return out[0], cache


class HeadGrads:
    """Per-parameter gradients in the same order as EblHead.parameters()."""

    def __init__(self, head: EblHead):
        self.weights = [np.zeros_like(w) for w in head.weights]
        self.biases = [np.zeros_like(b) for b in head.biases]
        self.ln_gain = [np.zeros_like(g) for g in head.ln_gain]
        self.ln_bias = [np.zeros_like(b) for b in head.ln_bias]

    def add(self, other: "HeadGrads") -> "HeadGrads":
        for mine, theirs in (
            (self.weights, other.weights),
            (self.biases, other.biases),
            (self.ln_gain, other.ln_gain),
            (self.ln_bias, other.ln_bias),
        ):
            for i in range(len(mine)):
                mine[i] += theirs[i]
        return self

    def parameters(self):
        n = len(self.weights)
        for i in range(n):
            yield f"W{i}", self.weights[i]
            yield f"b{i}", self.biases[i]
            if i < n - 1:
                yield f"g{i}", self.ln_gain[i]
                yield f"beta{i}", self.ln_bias[i]


def backward_batch(head: EblHead, cache: ForwardCache, dout: np.ndarray) -> tuple[HeadGrads, np.ndarray]:
    """Exact gradients through normalize, linear, ReLU, layer norm, dropout.

    The cache is single-use; reusing it would silently pair gradients with
    stale activations, so a second call raises.
    """
    if cache is None or cache.used:
        raise StaleCacheError("backward needs a fresh train-mode forward cache")
    cache.used = True
    grads = HeadGrads(head)
    out, prenorm = cache.out, cache.prenorm
    dout = np.atleast_2d(np.asarray(dout, dtype=np.float64))
    # through y = x / |x|
    dh = (dout - (dout * out).sum(axis=1, keepdims=True) * out) / prenorm
    n = head.num_layers
    for i in range(n - 1, -1, -1):
        if i < n - 1:
            mask = cache.masks[i]
            if mask is not None:
                dh = dh * mask
            xhat = cache.xhats[i]
            var = cache.variances[i]
            grads.ln_gain[i] = (dh * xhat).sum(axis=0)
            grads.ln_bias[i] = dh.sum(axis=0)
            dxhat = dh * head.ln_gain[i]
            inv_std = 1.0 / np.sqrt(var + LN_EPS)
            drelu = inv_std * (
                dxhat
                - dxhat.mean(axis=1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
            )
            da = drelu * (cache.pre_acts[i] > 0)
        else:
            da = dh
        grads.weights[i] = cache.inputs[i].T @ da
        grads.biases[i] = da.sum(axis=0)
        dh = da @ head.weights[i].T
    return grads, dh


def biometric_similarity(pair: EblPair, frame: LatentFrame, ref: ReferencePortrait) -> float:
    """b(z, R): cosine of the two head embeddings, eval mode."""
    u, _ = forward(pair.h1, frame.z)
    v, _ = forward(pair.h2, ref.embedded)
    return float(np.clip(u @ v, -1.0, 1.0))


def score_frames(pair: EblPair, latents: np.ndarray, ref_embedded: np.ndarray) -> np.ndarray:
    """Vector of b(z_t, R) for a whole session, batched eval forward."""
    u, _ = forward_batch(pair.h1, latents)
    v, _ = forward_batch(pair.h2, ref_embedded[None, :])
    return np.clip(u @ v[0], -1.0, 1.0)


# ---------------------------------------------------------------------------
# Checkpoint codec: EBLH, version, architecture block, params, CRC32 trailer.

def _pack_head(head: EblHead) -> bytes:
    parts = [struct.pack("<Hd", head.num_layers, head.dropout_rate)]
    dims = head.dims
    parts.append(struct.pack(f"<{len(dims)}I", *dims))
    for _, arr in head.parameters():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save_pair(pair: EblPair, path: str) -> None:
    body = HEAD_MAGIC + struct.pack("<H", HEAD_VERSION) + _pack_head(pair.h1) + _pack_head(pair.h2)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", crc))


def _unpack_head(data: bytes, off: int) -> tuple[EblHead, int]:
    if len(data) < off + 10:
        raise TruncatedError("head header truncated")
    n_layers, dropout = struct.unpack_from("<Hd", data, off)
    off += 10
    dim_count = n_layers + 1
    if len(data) < off + 4 * dim_count:
        raise TruncatedError("head dims truncated")
    dims = list(struct.unpack_from(f"<{dim_count}I", data, off))
    off += 4 * dim_count
    weights, biases, gains, lbias = [], [], [], []
    for i in range(n_layers):
        fi, fo = dims[i], dims[i + 1]
        for shape, target in ((fi * fo, "W"), (fo, "b")):
            if len(data) < off + 8 * shape:
                raise TruncatedError("head parameters truncated")
        w = np.frombuffer(data, dtype="<f8", count=fi * fo, offset=off).copy().reshape(fi, fo)
        off += 8 * fi * fo
        b = np.frombuffer(data, dtype="<f8", count=fo, offset=off).copy()
        off += 8 * fo
        weights.append(w)
        biases.append(b)
        if i < n_layers - 1:
            if len(data) < off + 16 * fo:
                raise TruncatedError("head layer-norm parameters truncated")
            g = np.frombuffer(data, dtype="<f8", count=fo, offset=off).copy()
            off += 8 * fo
            be = np.frombuffer(data, dtype="<f8", count=fo, offset=off).copy()
            off += 8 * fo
            gains.append(g)
            lbias.append(be)
    return EblHead(weights, biases, gains, lbias, dropout), off


def load_pair(path: str) -> EblPair:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 10 or data[:4] != HEAD_MAGIC:
        raise BadMagicError("not an EBL head checkpoint")
    body, trailer = data[:-4], data[-4:]
    (crc_stored,) = struct.unpack("<I", trailer)
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise BadCrcError("checkpoint CRC mismatch")
    (version,) = struct.unpack_from("<H", body, 4)
    if version != HEAD_VERSION:
        raise BadMagicError(f"unsupported checkpoint version {version}")
    h1, off = _unpack_head(body, 6)
    h2, off = _unpack_head(body, off)
    if off != len(body):
        raise TruncatedError("trailing bytes after head parameters")
    return EblPair(h1, h2)
