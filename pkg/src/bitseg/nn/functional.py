"""Differentiable layers: float and binary convolution, batch norm, PReLU,
pooling, bilinear upsampling, concatenation, and the 2-class loss.

Every op takes Tensors, computes a plain numpy forward, and records a tape
node whose closure holds exactly the arrays the backward needs. Ops are
dtype-polymorphic: the model path runs float32, gradient checking runs the
same graph in float64.

The binary convolution has two engines that produce bit-identical outputs:

  "gemm"    im2col the sign map into a +-1/0 patch matrix and multiply with
            dense sign weights via BLAS. Integer-exact because every partial
            sum is a small integer (fan_in is far below 2**24).
  "packed"  pack the same patches into bit rows and use the XNOR/popcount
            kernels from bitcore, with a cached ValidMask making zero
            padding exact.

Both reduce to the same integers, which are then combined with the scaling
factors base by base in the same order, so engine choice is purely a speed
knob.

Binary backward (the STE rule used everywhere, documented here once):
with bases B_i = sign(W - u_i), scales a_i, and G = the ordinary convolution
weight-gradient evaluated at inputs sign(x),

    dL/dW = sum_i 1[|W - u_i| <= 1] * a_i[c] * G
    dL/dx = 1[|x| <= 1] * conv_input_grad(upstream, sum_i a_i[c] * B_i)

For the single-base case (u = 0) this is exactly
dL/dW = a_c * ste_grad(conv weight grad, W). The scales a_i are recomputed
from the latents each forward and treated as constants (detached) in
backward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import binarize, bitcore
from ..errors import DimensionError, NumericError
from .tensor import TapeNode, Tensor, grad_enabled

# fan_in ceiling below which float32 accumulation of +-1 products is exact
_EXACT_FANIN_LIMIT = 1 << 24

_MASK_CACHE: dict = {}
_MASK_CACHE_CAP = 128
_UPSAMPLE_CACHE: dict = {}


@dataclass(frozen=True)
class ConvSpec:
    """Static description of one convolution layer."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, int]
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    binary: bool = False

    def __post_init__(self):
        kh, kw = self.kernel
        if self.in_channels < 1 or self.out_channels < 1:
            raise DimensionError("channel counts must be >= 1")
        if kh < 1 or kw < 1:
            raise DimensionError("kernel sides must be >= 1")
        if self.stride < 1:
            raise DimensionError(f"stride must be >= 1, got {self.stride}")
        if self.dilation < 1:
            raise DimensionError(f"dilation must be >= 1, got {self.dilation}")
        if self.padding < 0:
            raise DimensionError(f"padding must be >= 0, got {self.padding}")

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel[0] * self.kernel[1]

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        eh = self.dilation * (kh - 1) + 1
        ew = self.dilation * (kw - 1) + 1
        ho = (h + 2 * self.padding - eh) // self.stride + 1
        wo = (w + 2 * self.padding - ew) // self.stride + 1
        if ho < 1 or wo < 1:
            raise DimensionError(
                f"kernel extent ({eh}x{ew}) exceeds padded input ({h}x{w}, p={self.padding})"
            )
        return ho, wo


def _needs(t: Tensor) -> bool:
    return t.requires_grad or t.node is not None


def _make(op, data, parents, backward):
    if grad_enabled() and any(_needs(p) for p in parents):
        return Tensor(data, node=TapeNode(op, tuple(parents), backward))
    return Tensor(data)


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _unpad2d(g: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return g
    return g[:, :, p:-p, p:-p]


def _im2col(xp: np.ndarray, kh, kw, stride, dilation, ho, wo) -> np.ndarray:
    """Patch matrix of shape (N*ho*wo, C*kh*kw); lane order is (C, kh, kw)."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, ho, wo, c, kh, kw),
        strides=(sn, sh * stride, sw * stride, sc, sh * dilation, sw * dilation),
    )
    return win.reshape(n * ho * wo, c * kh * kw)


def _col2im(dcols, n, c, hp, wp, kh, kw, stride, dilation, ho, wo, dtype):
    """Adjoint of _im2col: scatter-add patch grads back onto the padded map."""
    dxp = np.zeros((n, c, hp, wp), dtype=dtype)
    d6 = dcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for ki in range(kh):
        for kj in range(kw):
            hs = slice(ki * dilation, ki * dilation + (ho - 1) * stride + 1, stride)
            ws = slice(kj * dilation, kj * dilation + (wo - 1) * stride + 1, stride)
            dxp[:, :, hs, ws] += d6[:, :, ki, kj]
    return dxp


def _check_conv_args(x: Tensor, w: Tensor, spec: ConvSpec):
    if x.data.ndim != 4:
        raise DimensionError(f"conv input must be NCHW, got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise DimensionError(
            f"input has {x.shape[1]} channels, spec expects {spec.in_channels}"
        )
    expect = (spec.out_channels, spec.in_channels) + tuple(spec.kernel)
    if tuple(w.shape) != expect:
        raise DimensionError(f"weight shape {tuple(w.shape)} does not match spec {expect}")


def _rows_to_nchw(cols: np.ndarray, n, ho, wo, co) -> np.ndarray:
    return np.ascontiguousarray(cols.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))


def _nchw_to_rows(g: np.ndarray, co: int) -> np.ndarray:
    return np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, co)


def conv2d_float(x: Tensor, w: Tensor, spec: ConvSpec) -> Tensor:
    """Cross-correlation with zero padding, stride, and dilation."""
    _check_conv_args(x, w, spec)
    n, c, h, wd = x.shape
    kh, kw = spec.kernel
    co = spec.out_channels
    ho, wo = spec.out_size(h, wd)
    xp = _pad2d(x.data, spec.padding)
    hp, wp = xp.shape[2], xp.shape[3]
    cols = _im2col(xp, kh, kw, spec.stride, spec.dilation, ho, wo)
    wf = w.data.reshape(co, -1)
    out = _rows_to_nchw(cols @ wf.T, n, ho, wo, co)

    x_needs, w_needs = _needs(x), _needs(w)
    saved_cols = cols if w_needs else None

    def backward(g):
        gm = _nchw_to_rows(g, co)
        dw = dx = None
        if w_needs:
            dw = (gm.T @ saved_cols).reshape(w.shape)
        if x_needs:
            dxp = _col2im(
                gm @ wf, n, c, hp, wp, kh, kw, spec.stride, spec.dilation, ho, wo, g.dtype
            )
            dx = _unpad2d(dxp, spec.padding)
        return (dx, dw)

    return _make("conv2d_float", out, (x, w), backward)


def _filter_bases(filt):
    """Normalize either filter kind into [(alpha, shift, bits)] tuples."""
    if isinstance(filt, binarize.ScaledBinaryFilter):
        return [(filt.alpha, 0.0, filt.bits)]
    return [(b.alpha, b.shift, b.bits) for b in filt.bases]


def _padding_mask(h, w, c, spec: ConvSpec, ho, wo) -> bitcore.ValidMask:
    """Per-output-position validity rows for one image, cached by geometry."""
    key = (h, w, c, spec.kernel, spec.stride, spec.dilation, spec.padding)
    hit = _MASK_CACHE.get(key)
    if hit is not None:
        return hit
    ones = np.ones((1, 1, h, w), dtype=np.float32)
    op = _pad2d(ones, spec.padding)
    kh, kw = spec.kernel
    spatial = _im2col(op, kh, kw, spec.stride, spec.dilation, ho, wo) > 0
    rows = spatial.shape[0]
    lanes = np.tile(spatial[:, None, :], (1, c, 1)).reshape(rows, c * kh * kw)
    mask = bitcore.make_mask(lanes)
    if len(_MASK_CACHE) >= _MASK_CACHE_CAP:
        _MASK_CACHE.clear()
    _MASK_CACHE[key] = mask
    return mask


def _tile_mask(mask: bitcore.ValidMask, n: int) -> bitcore.ValidMask:
    if n == 1:
        return mask
    return bitcore.ValidMask(
        words=np.tile(mask.words, (n, 1)),
        row_len=mask.row_len,
        ones_count=np.tile(mask.ones_count, n),
    )


def make_filter(latent: np.ndarray, bases: int = 1):
    """Binarize a latent filterbank: single sign/scale pair or multi-base."""
    if bases == 1:
        return binarize.binarize_filterbank(latent)
    return binarize.multi_base_decompose(latent, bases)


def _activation_scale_map(x: np.ndarray, spec: ConvSpec, ho, wo) -> np.ndarray:
    """Mean |x| over channels, box-filtered to output geometry: the K map."""
    n = x.shape[0]
    a = np.mean(np.abs(x), axis=1, keepdims=True)
    ap = _pad2d(a, spec.padding)
    kh, kw = spec.kernel
    cols = _im2col(ap, kh, kw, spec.stride, spec.dilation, ho, wo)
    k = cols.mean(axis=1)
    return k.reshape(n, 1, ho, wo)


def conv2d_binary(
    x: Tensor,
    w: Tensor,
    spec: ConvSpec,
    *,
    bases: int = 1,
    filt=None,
    engine: str = "gemm",
    activation_scale: bool = False,
) -> Tensor:
    """Binary convolution: sign both operands, XNOR-accumulate, scale by alpha.

    `filt` may supply a prebuilt (multi-)base filter, e.g. the cached bits of
    a deserialized layer; otherwise it is derived from the latent weights w.
    The output equals alpha_c * conv2d_float(sign(x), sign(W)) with an
    integer-exact core; see the module docstring for both engines and the
    backward formulas. With activation_scale, outputs are multiplied by the
    box-filtered mean |x| map (treated as a constant in backward).
    """
    if not spec.binary:
        raise ValueError("conv2d_binary requires a spec with binary=True")
    if engine not in ("gemm", "packed"):
        raise ValueError(f"unknown engine {engine!r}")
    _check_conv_args(x, w, spec)
    if spec.fan_in >= _EXACT_FANIN_LIMIT:
        raise NumericError("fan_in too large for exact float32 accumulation")
    n, c, h, wd = x.shape
    kh, kw = spec.kernel
    co = spec.out_channels
    ho, wo = spec.out_size(h, wd)
    if filt is None:
        filt = make_filter(w.data, bases)
    base_list = _filter_bases(filt)

    sx = binarize.sign(x.data)
    xp = _pad2d(sx, spec.padding)
    hp, wp = xp.shape[2], xp.shape[3]
    cols = _im2col(xp, kh, kw, spec.stride, spec.dilation, ho, wo)

    if engine == "packed":
        bits_x = bitcore.pack_sign_bits(cols >= 0)
        mask = None
        if spec.padding > 0:
            mask = _tile_mask(_padding_mask(h, wd, c, spec, ho, wo), n)
        ints = [
            bitcore.xnor_gemm(bits_x, bits, mask=mask).astype(x.dtype)
            for _, _, bits in base_list
        ]
    else:
        ints = [cols @ bitcore.unpack_signs(bits, x.dtype).T for _, _, bits in base_list]

    out_cols = None
    for (alpha, _, _), term_ints in zip(base_list, ints):
        term = term_ints * alpha[None, :].astype(x.dtype)
        out_cols = term if out_cols is None else out_cols + term
    out = _rows_to_nchw(out_cols, n, ho, wo, co)

    kmap = None
    if activation_scale:
        kmap = _activation_scale_map(x.data, spec, ho, wo).astype(x.dtype)
        out = out * kmap

    x_needs, w_needs = _needs(x), _needs(w)
    saved_cols = cols if w_needs else None
    w_flat = w.data.reshape(co, -1)

    def backward(g):
        if kmap is not None:
            g = g * kmap
        gm = _nchw_to_rows(g, co)
        dw = dx = None
        if w_needs:
            gw = gm.T @ saved_cols
            acc = np.zeros_like(w_flat)
            for alpha, shift, _ in base_list:
                window = binarize.ste_passthrough_mask(w_flat - shift)
                acc += window * (alpha[:, None].astype(w_flat.dtype) * gw)
            dw = acc.reshape(w.shape)
        if x_needs:
            weff = filt.reconstruct(x.dtype)
            dxp = _col2im(
                gm @ weff, n, c, hp, wp, kh, kw, spec.stride, spec.dilation, ho, wo, g.dtype
            )
            dx = _unpad2d(dxp, spec.padding) * binarize.ste_passthrough_mask(x.data)
        return (dx, dw)

    return _make("conv2d_binary", out, (x, w), backward)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    *,
    eps: float = 1e-5,
    momentum: float = 0.1,
    training: bool = True,
) -> Tensor:
    """Per-channel batch norm. Train mode normalizes by batch statistics and
    folds them into the running buffers (in place); inference mode reads the
    running buffers and never writes them.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"batchnorm input must be NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError("gamma/beta must be per-channel vectors")
    count = n * h * w
    if count == 0:
        raise DimensionError("batchnorm over an empty batch")

    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean[:] = (1 - momentum) * running_mean + momentum * mu.astype(running_mean.dtype)
        running_var[:] = (1 - momentum) * running_var + momentum * var.astype(running_var.dtype)
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)

    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * ivar[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    x_needs, g_needs, b_needs = _needs(x), _needs(gamma), _needs(beta)

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)) if g_needs else None
        dbeta = g.sum(axis=(0, 2, 3)) if b_needs else None
        dx = None
        if x_needs:
            dxhat = g * gamma.data[None, :, None, None]
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3))
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))
                dx = (
                    ivar[None, :, None, None]
                    / count
                    * (count * dxhat - s1[None, :, None, None] - xhat * s2[None, :, None, None])
                )
            else:
                dx = dxhat * ivar[None, :, None, None]
        return (dx, dgamma, dbeta)

    return _make("batchnorm2d", out, (x, gamma, beta), backward)


def prelu(x: Tensor, a: Tensor) -> Tensor:
    """x where x >= 0, a_c * x below; the slope a is trainable per channel."""
    if x.data.ndim != 4:
        raise DimensionError(f"prelu input must be NCHW, got shape {x.shape}")
    c = x.shape[1]
    if a.shape != (c,):
        raise DimensionError("prelu slope must be a per-channel vector")
    if not np.all(np.isfinite(a.data)):
        raise NumericError("prelu slope must be finite")
    neg = x.data < 0
    ab = a.data[None, :, None, None]
    out = np.where(neg, ab * x.data, x.data)

    x_needs, a_needs = _needs(x), _needs(a)

    def backward(g):
        dx = da = None
        if x_needs:
            dx = np.where(neg, ab * g, g)
        if a_needs:
            da = np.where(neg, g * x.data, 0).sum(axis=(0, 2, 3))
        return (dx, da)

    return _make("prelu", out, (x, a), backward)


def maxpool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """Max pooling; gradient routes to the first occurrence of the max."""
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool input must be NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    if k < 1 or stride < 1:
        raise DimensionError("pool size and stride must be >= 1")
    if h < k or w < k or (h - k) % stride or (w - k) % stride:
        raise DimensionError(f"pool {k}/{stride} does not tile input {h}x{w}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    xc = np.ascontiguousarray(x.data)
    sn, sc, sh, sw = xc.strides
    win = np.lib.stride_tricks.as_strided(
        xc,
        shape=(n, c, ho, wo, k, k),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
    ).reshape(n, c, ho, wo, k * k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    x_needs = _needs(x)

    def backward(g):
        if not x_needs:
            return (None,)
        dx = np.zeros_like(x.data)
        oh, ow = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
        hi = oh[None, None] * stride + idx // k
        wi = ow[None, None] * stride + idx % k
        nn, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
        np.add.at(dx, (nn[..., None, None], cc[..., None, None], hi, wi), g)
        return (dx,)

    return _make("maxpool2d", out, (x,), backward)


def _interp_matrix(size: int, factor: int) -> np.ndarray:
    """Rows of bilinear weights mapping size source samples to size*factor."""
    key = (size, factor)
    hit = _UPSAMPLE_CACHE.get(key)
    if hit is None:
        m = np.zeros((size * factor, size), dtype=np.float64)
        for o in range(size * factor):
            s = (o + 0.5) / factor - 0.5
            s = min(max(s, 0.0), size - 1.0)
            i0 = int(np.floor(s))
            i1 = min(i0 + 1, size - 1)
            t = s - i0
            m[o, i0] += 1.0 - t
            m[o, i1] += t
        _UPSAMPLE_CACHE[key] = m
        hit = m
    return hit


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Bilinear interpolation by an integer factor, align-corners false."""
    if x.data.ndim != 4:
        raise DimensionError(f"upsample input must be NCHW, got shape {x.shape}")
    if factor < 1:
        raise DimensionError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        x_needs = _needs(x)
        return _make("bilinear_upsample", x.data.copy(), (x,), lambda g: (g if x_needs else None,))
    n, c, h, w = x.shape
    mh = _interp_matrix(h, factor).astype(x.dtype)
    mw = _interp_matrix(w, factor).astype(x.dtype)
    out = np.matmul(mh, np.matmul(x.data, mw.T))

    x_needs = _needs(x)

    def backward(g):
        if not x_needs:
            return (None,)
        return (np.matmul(mh.T, np.matmul(g, mw)),)

    return _make("bilinear_upsample", out, (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise DimensionError("concat inputs must be NCHW")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(f"concat shapes {a.shape} and {b.shape} do not align")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    a_needs, b_needs = _needs(a), _needs(b)

    def backward(g):
        return (
            g[:, :ca] if a_needs else None,
            g[:, ca:] if b_needs else None,
        )

    return _make("concat_channels", out, (a, b), backward)


def affine(x: Tensor, scale: float, shift: float) -> Tensor:
    """Elementwise x * scale + shift with constant coefficients."""
    out = x.data * scale + shift
    x_needs = _needs(x)

    def backward(g):
        return (g * scale if x_needs else None,)

    return _make("affine", out, (x,), backward)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar projection sum(x * weights); the test harness's loss stub."""
    wts = np.asarray(weights, dtype=x.dtype)
    if wts.shape != tuple(x.shape):
        raise DimensionError("weights must match the tensor shape")
    out = np.asarray((x.data * wts).sum(), dtype=x.dtype)
    x_needs = _needs(x)

    def backward(g):
        return (g * wts if x_needs else None,)

    return _make("weighted_sum", out, (x,), backward)


def softmax_ce_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy after softmax over the class axis.

    target holds integer class ids of shape (N, H, W); for the 2-class head
    these are 0 (background) and 1 (road).
    """
    if logits.data.ndim != 4:
        raise DimensionError(f"logits must be NCHW, got shape {logits.shape}")
    n, c, h, w = logits.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise DimensionError(
            f"target shape {target.shape} does not match logits {tuple(logits.shape)}"
        )
    tgt = target.astype(np.int64)
    if tgt.min() < 0 or tgt.max() >= c:
        raise ValueError(f"target classes must lie in [0, {c})")
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("non-finite logits in loss")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(denom)
    picked = np.take_along_axis(logp, tgt[:, None], axis=1)[:, 0]
    count = n * h * w
    out = np.asarray(-picked.sum() / count, dtype=logits.dtype)

    l_needs = _needs(logits)

    def backward(g):
        if not l_needs:
            return (None,)
        p = ez / denom
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, tgt[:, None], 1.0, axis=1)
        return ((p - onehot) * (g / count),)

    return _make("softmax_ce_loss", out, (logits,), backward)
