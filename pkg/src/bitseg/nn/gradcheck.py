"""Gradient verification: central finite differences for the differentiable
ops, and an analytic oracle for the straight-through paths of the binary
convolution (sign has no true derivative, so finite differences do not apply
there).

Checks run in float64; central differences in float32 drown in rounding
noise long before the 1e-3 tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import binarize
from . import functional as F
from .tensor import Tensor

# below this magnitude the relative error degenerates, compare absolutely
_ABS_FLOOR = 1e-6


@dataclass
class GradReport:
    op: str
    max_err: float
    tolerance: float
    passed: bool
    detail: str = field(default="")

    def __str__(self):
        state = "ok" if self.passed else "FAIL"
        msg = f"[{state}] {self.op}: max err {self.max_err:.3e} (tol {self.tolerance:.1e})"
        return msg + (f" {self.detail}" if self.detail else "")


def _pair_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(a), np.abs(n))
    abs_err = np.abs(a - n)
    rel = np.where(scale > _ABS_FLOOR, abs_err / np.maximum(scale, _ABS_FLOOR), abs_err)
    return float(rel.max()) if rel.size else 0.0


def finite_difference_check(
    fn,
    inputs: list[Tensor],
    *,
    tol: float = 1e-3,
    step: float = 1e-6,
    op_name: str | None = None,
) -> GradReport:
    """Compare analytic gradients of a scalar-valued fn against central
    differences over every element of every input.

    fn maps the given Tensors to a scalar Tensor and must be deterministic.
    Inputs must be float64 (see module docstring).
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("finite_difference_check requires float64 inputs")
        t.requires_grad = True
        t.zero_grad()
    out = fn(*inputs)
    name = op_name or (out.node.op if out.node else "constant")
    out.backward()
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs
    ]

    worst = 0.0
    detail = ""
    for which, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            hi = float(fn(*inputs).data)
            flat[i] = keep - step
            lo = float(fn(*inputs).data)
            flat[i] = keep
            numeric[i] = (hi - lo) / (2 * step)
        err = _pair_error(analytic[which].reshape(-1), numeric)
        if err > worst:
            worst = err
            detail = f"(input {which})"
    return GradReport(op=name, max_err=worst, tolerance=tol, passed=worst <= tol, detail=detail)


def check_binary_conv_grads(
    x: np.ndarray,
    w: np.ndarray,
    spec: F.ConvSpec,
    *,
    bases: int = 1,
    engine: str = "gemm",
    tol: float = 1e-6,
    seed: int = 0,
) -> GradReport:
    """Verify the binary convolution backward against its documented formula.

    The oracle runs the float convolution on sign(x) with each dense base
    and applies the STE windows by hand:

        dW = sum_i 1[|W - u_i| <= 1] * a_i[c] * weight_grad(sign(x), r)
        dx = 1[|x| <= 1] * input_grad(r, sum_i a_i[c] * B_i)

    for a fixed random upstream r. Elementwise agreement within tol.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    rng = np.random.default_rng(seed)

    xt = Tensor(x.copy(), requires_grad=True)
    wt = Tensor(w.copy(), requires_grad=True)
    y = F.conv2d_binary(xt, wt, spec, bases=bases, engine=engine)
    upstream = rng.standard_normal(y.shape)
    y.backward(seed=upstream)

    filt = F.make_filter(w, bases)
    sx = binarize.sign(x)
    base_list = (
        [(filt.alpha, 0.0, None)]
        if isinstance(filt, binarize.ScaledBinaryFilter)
        else [(b.alpha, b.shift, None) for b in filt.bases]
    )
    dense = (
        [filt.dense_signs(np.float64)]
        if isinstance(filt, binarize.ScaledBinaryFilter)
        else [
            np.where(w.reshape(w.shape[0], -1) - b.shift >= 0, 1.0, -1.0) for b in filt.bases
        ]
    )

    # weight grad oracle: one float conv backward gives G for all bases
    sxt = Tensor(sx.copy(), requires_grad=True)
    bt = Tensor(dense[0].reshape(w.shape).copy(), requires_grad=True)
    yf = F.conv2d_float(sxt, bt, spec)
    yf.backward(seed=upstream)
    g_weight = bt.grad.reshape(w.shape[0], -1)

    w_flat = w.reshape(w.shape[0], -1)
    want_dw = np.zeros_like(w_flat)
    for (alpha, shift, _), _b in zip(base_list, dense):
        window = binarize.ste_passthrough_mask(w_flat - shift)
        want_dw += window * (alpha[:, None].astype(np.float64) * g_weight)
    want_dw = want_dw.reshape(w.shape)

    # input grad oracle: float conv with the reconstructed effective weights
    sxt2 = Tensor(sx.copy(), requires_grad=True)
    weff = filt.reconstruct(np.float64).reshape(w.shape)
    yf2 = F.conv2d_float(sxt2, Tensor(weff), spec)
    yf2.backward(seed=upstream)
    want_dx = sxt2.grad * binarize.ste_passthrough_mask(x)

    err = max(
        float(np.abs(wt.grad - want_dw).max()),
        float(np.abs(xt.grad - want_dx).max()),
    )
    return GradReport(
        op="conv2d_binary",
        max_err=err,
        tolerance=tol,
        passed=err <= tol,
        detail=f"(bases={bases}, engine={engine})",
    )
