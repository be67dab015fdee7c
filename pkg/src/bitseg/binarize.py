"""Sign quantization, per-filter scaling, and the straight-through estimator.

A real-valued filterbank W of shape (C_out, fan_in) is approximated per
output channel by alpha_c * B_c with B_c = sign(W_c) and
alpha_c = mean|W_c|, the closed-form minimizer of ||W_c - a * B_c||^2.
The sign function has zero gradient almost everywhere, so training passes
gradients through it unchanged inside a clipping window and zeroes them
outside (the clipped straight-through estimator).

The multi-base decomposition generalizes the single pair to a linear
combination sum_i alpha_i * sign(W - u_i) with shifts u_i placed at
mean(W) + s_i * std(W); the alphas come from a per-channel least-squares
fit. The s_i come from a fixed nested sequence (0, -1, +1, -1/2, +1/2,
...), so each base count extends the previous basis set and the fit
residual can only shrink as bases are added.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import bitcore
from .bitcore import BitTensor
from .errors import DimensionError, NumericError

STE_WINDOW = 1.0


def sign(x):
    """+1 where x >= 0, else -1. Ties at zero go to +1."""
    arr = np.asarray(x)
    if not np.all(np.isfinite(arr)):
        raise NumericError("sign requires finite input")
    out = np.where(arr >= 0, 1.0, -1.0).astype(
        arr.dtype if arr.dtype.kind == "f" else np.float32
    )
    if np.isscalar(x) or arr.ndim == 0:
        return float(out)
    return out


def channel_scale(w_c) -> float:
    """Best per-channel scale for sign(w_c): the mean absolute value."""
    arr = np.asarray(w_c)
    if arr.size == 0:
        raise DimensionError("channel_scale of an empty filter")
    if not np.all(np.isfinite(arr)):
        raise NumericError("channel_scale requires finite weights")
    return float(np.mean(np.abs(arr)))


@dataclass(frozen=True)
class ScaledBinaryFilter:
    """Per-output-channel scale vector plus packed sign bits (W ~ alpha * B)."""

    alpha: np.ndarray  # (C_out,) float32, >= 0
    bits: BitTensor  # (C_out, fan_in)
    fan_in: int

    def __post_init__(self):
        self.alpha.setflags(write=False)

    @property
    def out_channels(self) -> int:
        return self.alpha.shape[0]

    def dense_signs(self, dtype=np.float32) -> np.ndarray:
        """The +-1 matrix B, shape (C_out, fan_in)."""
        return bitcore.unpack_signs(self.bits, dtype=dtype)

    def reconstruct(self, dtype=np.float32) -> np.ndarray:
        """alpha_c * B_c, the rank-style approximation of the filterbank."""
        return self.alpha[:, None].astype(dtype) * self.dense_signs(dtype)


def binarize_filterbank(w) -> ScaledBinaryFilter:
    """Binarize a filterbank of shape (C_out, ...) channel by channel."""
    arr = np.asarray(w)
    if arr.ndim < 2 or arr.size == 0:
        raise DimensionError("filterbank must have shape (C_out, fan_in...)")
    if not np.all(np.isfinite(arr)):
        raise NumericError("binarize_filterbank requires finite weights")
    flat = arr.reshape(arr.shape[0], -1)
    alpha = np.mean(np.abs(flat), axis=1, dtype=np.float64).astype(np.float32)
    bits = bitcore.pack_sign_bits(flat >= 0)
    return ScaledBinaryFilter(alpha=alpha, bits=bits, fan_in=flat.shape[1])


def ste_passthrough_mask(latent, window: float = STE_WINDOW):
    """1.0 where |latent| <= window, else 0.0 (boundary inclusive)."""
    arr = np.asarray(latent)
    return (np.abs(arr) <= window).astype(arr.dtype if arr.dtype.kind == "f" else np.float32)


def ste_grad(upstream, latent, window: float = STE_WINDOW):
    """Straight-through gradient of sign: upstream inside the window, 0 outside."""
    up = np.asarray(upstream)
    out = up * ste_passthrough_mask(latent, window)
    if np.isscalar(upstream) or up.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class BinaryBase:
    alpha: np.ndarray  # (C_out,) float32
    shift: float
    bits: BitTensor  # (C_out, fan_in)


@dataclass(frozen=True)
class MultiBaseFilter:
    """Linear combination of shifted sign bases: W ~ sum_i alpha_i * B_i."""

    bases: tuple[BinaryBase, ...]
    fan_in: int

    @property
    def count(self) -> int:
        return len(self.bases)

    @property
    def out_channels(self) -> int:
        return self.bases[0].alpha.shape[0]

    def reconstruct(self, dtype=np.float32) -> np.ndarray:
        acc = np.zeros((self.out_channels, self.fan_in), dtype=dtype)
        for base in self.bases:
            acc += base.alpha[:, None].astype(dtype) * bitcore.unpack_signs(base.bits, dtype)
        return acc


def _spread_sequence(count: int) -> np.ndarray:
    """First `count` entries of the dyadic offset sequence 0, -1, 1, -1/2, 1/2,
    -3/4, -1/4, 1/4, 3/4, ... sorted ascending.

    Consecutive counts give nested sets, which is what makes the
    least-squares residual non-increasing in the base count: fitting over a
    superset of basis vectors can never do worse.
    """
    seq = [0.0, -1.0, 1.0]
    denom = 2
    while len(seq) < count:
        seq.extend(k / denom for k in range(-(denom - 1), denom, 2))
        denom *= 2
    return np.array(sorted(seq[:count]))


def base_shifts(w_flat: np.ndarray, count: int) -> np.ndarray:
    """Shift locations mean + s_i * std, s_i from the nested spread sequence."""
    mu = float(np.mean(w_flat, dtype=np.float64))
    sd = float(np.std(w_flat, dtype=np.float64))
    return mu + _spread_sequence(count) * sd


def multi_base_decompose(w, count: int) -> MultiBaseFilter:
    """Fit count shifted sign bases to a filterbank by per-channel least squares.

    Solved with an SVD-backed least-squares fit so a degenerate basis (two
    shifts quantizing to the same sign pattern) yields the stable minimum-norm
    scales instead of an exploding normal-equations solution.
    """
    if count < 1:
        raise ValueError(f"base count must be >= 1, got {count}")
    arr = np.asarray(w)
    if arr.ndim < 2 or arr.size == 0:
        raise DimensionError("filterbank must have shape (C_out, fan_in...)")
    if not np.all(np.isfinite(arr)):
        raise NumericError("multi_base_decompose requires finite weights")
    flat = arr.reshape(arr.shape[0], -1).astype(np.float64)
    cout, fan_in = flat.shape
    shifts = base_shifts(flat, count)
    signs = np.stack([np.where(flat - u >= 0, 1.0, -1.0) for u in shifts])  # (M, C, n)
    alphas = np.empty((cout, count))
    for c in range(cout):
        alphas[c], *_ = np.linalg.lstsq(signs[:, c].T, flat[c], rcond=None)
    bases = tuple(
        BinaryBase(
            alpha=alphas[:, i].astype(np.float32),
            shift=float(shifts[i]),
            bits=bitcore.pack_sign_bits(flat - shifts[i] >= 0),
        )
        for i in range(count)
    )
    return MultiBaseFilter(bases=bases, fan_in=fan_in)


def multi_base_residual(w, filt: MultiBaseFilter) -> float:
    flat = np.asarray(w).reshape(filt.out_channels, -1).astype(np.float64)
    return float(np.sum((flat - filt.reconstruct(np.float64)) ** 2))
