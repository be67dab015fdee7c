"""In-process correctness suites for the `selftest` subcommand.

Each suite re-derives its expectations from first principles (brute-force
dot products, dense sign convolutions, finite differences) rather than
from the code under test, so a silent kernel regression shows up here
without needing the development test tree installed.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import bitcore
from .binarize import binarize_filterbank, multi_base_decompose, multi_base_residual
from .nn import (
    ConvSpec,
    Tensor,
    batchnorm2d,
    bilinear_upsample,
    conv2d_binary,
    conv2d_float,
    no_grad,
    prelu,
    softmax_ce_loss,
)
from .nn.functional import make_filter
from .nn.gradcheck import check_binary_conv_grads, finite_difference_check


def _suite_popcount(rng: np.random.Generator) -> str | None:
    # exhaustive over every row pair for short rows
    for n in range(1, 11):
        vals = np.arange(2**n, dtype=np.int64)
        bits = (vals[:, None] >> np.arange(n)) & 1
        signs = (2 * bits - 1).astype(np.int64)
        packed = bitcore.pack_sign_bits(bits)
        got = bitcore.xnor_gemm(packed, packed)
        want = signs @ signs.T
        if not np.array_equal(got, want):
            return f"exhaustive mismatch at row length {n}"
    # randomized long rows, plain and masked
    for _ in range(200):
        n = int(rng.integers(11, 301))
        a = rng.integers(0, 2, size=(3, n))
        b = rng.integers(0, 2, size=(3, n))
        valid = rng.integers(0, 2, size=(3, n))
        sa, sb = 2 * a - 1, 2 * b - 1
        pa, pb = bitcore.pack_sign_bits(a), bitcore.pack_sign_bits(b)
        if not np.array_equal(bitcore.xnor_dot(pa, pb), (sa * sb).sum(axis=1)):
            return f"plain dot mismatch at row length {n}"
        mask = bitcore.make_mask(valid.astype(bool))
        want = (sa * sb * valid).sum(axis=1)
        if not np.array_equal(bitcore.masked_xnor_dot(pa, pb, mask), want):
            return f"masked dot mismatch at row length {n}"
    return None


def _float_spec(spec: ConvSpec) -> ConvSpec:
    return ConvSpec(
        spec.in_channels,
        spec.out_channels,
        spec.kernel,
        stride=spec.stride,
        dilation=spec.dilation,
        padding=spec.padding,
        binary=False,
    )


def _random_conv_geometry(rng: np.random.Generator):
    while True:
        spec = ConvSpec(
            int(rng.integers(1, 5)),
            int(rng.integers(1, 5)),
            (int(rng.choice([1, 3, 5])), int(rng.choice([1, 3, 5]))),
            stride=int(rng.choice([1, 2])),
            dilation=int(rng.choice([1, 2, 4])),
            padding=int(rng.choice([0, 1, 2])),
            binary=True,
        )
        h = int(rng.integers(1, 17))
        w = int(rng.integers(1, 17))
        try:
            spec.out_size(h, w)
        except Exception:
            continue
        return spec, h, w


def _suite_kernel_equivalence(rng: np.random.Generator, cases: int = 200) -> str | None:
    for i in range(cases):
        spec, h, w = _random_conv_geometry(rng)
        x = rng.standard_normal((1, spec.in_channels, h, w)).astype(np.float32)
        wt = rng.standard_normal(
            (spec.out_channels, spec.in_channels) + tuple(spec.kernel)
        ).astype(np.float32)
        filt = make_filter(wt, 1)
        sx = np.where(x >= 0, 1.0, -1.0).astype(np.float32)
        sw = filt.dense_signs(np.float32).reshape(wt.shape)
        with no_grad():
            ints = conv2d_float(Tensor(sx), Tensor(sw), _float_spec(spec)).data
            want = ints * filt.alpha[None, :, None, None]
            for engine in ("gemm", "packed"):
                got = conv2d_binary(Tensor(x), Tensor(wt), spec, engine=engine).data
                if not np.array_equal(got, want):
                    return f"case {i}: {engine} engine disagrees with sign-conv oracle"
    return None


def _suite_float_gradients(rng: np.random.Generator) -> str | None:
    spec = ConvSpec(2, 3, (3, 3), stride=1, padding=1)
    x = Tensor(rng.standard_normal((1, 2, 6, 6)))
    wt = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5)
    gamma = Tensor(rng.uniform(0.5, 1.5, 3))
    beta = Tensor(rng.standard_normal(3) * 0.1)
    slope = Tensor(np.full(3, 0.25, dtype=np.float64))
    target = rng.integers(0, 3, size=(1, 12, 12))

    def network(xi, wi, gi, bi, si):
        y = conv2d_float(xi, wi, spec)
        y = batchnorm2d(y, gi, bi, np.zeros(3), np.ones(3), training=True)
        y = prelu(y, si)
        y = bilinear_upsample(y, 2)
        return softmax_ce_loss(y, target)

    report = finite_difference_check(
        network, [x, wt, gamma, beta, slope], tol=1e-3, op_name="float chain"
    )
    if not report.passed:
        return str(report)
    return None


def _suite_binary_gradients(rng: np.random.Generator) -> str | None:
    for bases in (1, 2):
        for engine in ("gemm", "packed"):
            spec = ConvSpec(2, 3, (3, 3), stride=1, padding=1, binary=True)
            x = rng.standard_normal((1, 2, 6, 6)) * 1.4
            wt = rng.standard_normal((3, 2, 3, 3)) * 1.4
            report = check_binary_conv_grads(
                x, wt, spec, bases=bases, engine=engine, tol=1e-6, seed=7
            )
            if not report.passed:
                return f"bases={bases} engine={engine}: {report}"
    return None


def _suite_scale_optimality(rng: np.random.Generator) -> str | None:
    for i in range(20):
        wt = rng.standard_normal((3, 40)).astype(np.float32)
        filt = binarize_filterbank(wt)
        signs = filt.dense_signs(np.float64)
        w64 = wt.astype(np.float64)
        for c in range(3):
            best = np.sum((w64[c] - filt.alpha[c] * signs[c]) ** 2)
            for delta in (1e-3, -1e-3):
                worse = np.sum((w64[c] - (filt.alpha[c] + delta) * signs[c]) ** 2)
                if worse <= best:
                    return f"filter {i} channel {c}: scale not a strict minimum"
        residuals = [
            multi_base_residual(wt, multi_base_decompose(wt, m)) for m in (1, 2, 3)
        ]
        if not all(residuals[j + 1] <= residuals[j] + 1e-9 for j in range(2)):
            return f"filter {i}: residual grew with more bases {residuals}"
    return None


SUITES: list[tuple[str, Callable[[np.random.Generator], str | None]]] = [
    ("popcount identity", _suite_popcount),
    ("kernel equivalence", _suite_kernel_equivalence),
    ("float gradients", _suite_float_gradients),
    ("binary gradients", _suite_binary_gradients),
    ("scaling factors", _suite_scale_optimality),
]


def run_selftest(emit: Callable[[str], None] = print) -> bool:
    """Run every suite; returns True when all pass."""
    ok = True
    for name, fn in SUITES:
        start = time.perf_counter()
        detail = fn(np.random.default_rng(20240601))
        took = time.perf_counter() - start
        if detail is None:
            emit(f"ok   {name} ({took:.2f}s)")
        else:
            ok = False
            emit(f"FAIL {name}: {detail}")
    return ok
