"""Static cost accounting: MACs, bit-operations, parameter bits, file bytes.

Counting conventions. One float MAC is one multiply-accumulate lane
position of a convolution, C_out * H' * W' * C_in * kH * kW per layer; a
binary layer spends the same product as XNOR+popcount lane positions (per
base, when multi-base decomposition is on). Parameter bits charge binary
weights one bit each plus 32 per-channel scale bits (and, for multi-base
filters, 32 bits per base shift); float weights charge 32 each. A layer's
batchnorm adds 32*4*C bits and a PReLU 32*C bits to the layer that owns
them. Pooling, upsampling, activations, and batchnorm application are not
MACs and stay out of the op totals; they are reported as one elementwise
count on the side.

size_bytes is not a formula: it is the exact length of the layer's record
as the model serializer writes it, so per-layer sizes plus the file header
reconcile with the on-disk artifact byte for byte.

Ratios compare against the same architecture with every binarization flag
off: compression = baseline file bytes / this file bytes, and speedup =
baseline MACs / effective MACs, where effective MACs converts binary ops
at the cost model's exchange rate (1/64 of a MAC by default, mirroring
64-lane word parallelism; 1/8 is the conventional energy-cost setting).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .network import ConvUnit, Model, ModelConfig, build_model, header_bytes, unit_record_bytes
from .nn import ConvSpec, Tensor

CSV_HEADER = "layer,kind,float_macs,binary_ops,param_bits,size_bytes"


@dataclass(frozen=True)
class CostModel:
    """Exchange rate between a binary op and a float MAC."""

    bitop_per_mac: float = 1.0 / 64.0

    def __post_init__(self):
        if not (0.0 < self.bitop_per_mac <= 1.0):
            raise ConfigError(
                f"bitop_per_mac must lie in (0, 1], got {self.bitop_per_mac}"
            )


@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str  # "float" | "binary"
    float_macs: int
    binary_ops: int
    param_bits: int
    size_bytes: int


@dataclass(frozen=True)
class ComplexityReport:
    layers: tuple[LayerCost, ...]
    total_float_macs: int
    total_binary_ops: int
    total_param_bits: int
    total_size_bytes: int  # full file: header + all records
    float_baseline_macs: int
    float_baseline_bytes: int
    elementwise_ops: int
    bitop_per_mac: float
    effective_macs: float
    compression: float
    speedup: float


def _cost_of(u: ConvUnit, out_hw: tuple[int, int]) -> LayerCost:
    s = u.spec
    ho, wo = out_hw
    product = s.out_channels * ho * wo * s.fan_in
    if s.binary:
        float_macs = 0
        binary_ops = u.bases * product
        param_bits = u.bases * (s.fan_in * s.out_channels + 32 * s.out_channels)
        if u.bases >= 2:
            param_bits += 32 * u.bases  # data-dependent base shifts
    else:
        float_macs = product
        binary_ops = 0
        param_bits = 32 * s.fan_in * s.out_channels
    if u.has_bn:
        param_bits += 32 * 4 * s.out_channels
    if u.has_act:
        param_bits += 32 * s.out_channels
    return LayerCost(
        name=u.name,
        kind="binary" if s.binary else "float",
        float_macs=float_macs,
        binary_ops=binary_ops,
        param_bits=param_bits,
        size_bytes=unit_record_bytes(u),
    )


def count_layer(
    spec: ConvSpec,
    out_hw: tuple[int, int],
    *,
    bases: int = 1,
    has_bn: bool = False,
    has_act: bool = False,
    name: str = "layer",
) -> LayerCost:
    """Cost entry for a standalone layer description (weights all zero)."""
    shape = (spec.out_channels, spec.in_channels) + tuple(spec.kernel)
    unit = ConvUnit(
        name=name, spec=spec, bases=bases, weight=Tensor(np.zeros(shape, dtype=np.float32))
    )
    if has_bn:
        c = spec.out_channels
        unit.gamma = Tensor(np.ones(c, dtype=np.float32))
        unit.beta = Tensor(np.zeros(c, dtype=np.float32))
        unit.run_mean = np.zeros(c, dtype=np.float32)
        unit.run_var = np.ones(c, dtype=np.float32)
    if has_act:
        unit.slope = Tensor(np.full(spec.out_channels, 0.25, dtype=np.float32))
    return _cost_of(unit, out_hw)


def count_units(pairs: list[tuple[ConvUnit, tuple[int, int]]]) -> list[LayerCost]:
    """Cost entries for explicit (unit, output size) pairs, in order."""
    return [_cost_of(u, hw) for u, hw in pairs]


def unit_output_sizes(m: Model) -> list[tuple[str, tuple[int, int]]]:
    """Output H,W of every conv unit, following the forward wiring."""
    h, w = m.config.input_size
    out = []
    cur = (h, w)
    skip = None
    enc_out = None
    for u in m.units:
        if u.name.startswith("bott_"):
            size = u.spec.out_size(*enc_out)
        elif u.name == "dec_conv":
            size = u.spec.out_size(*skip)  # runs after x4 upsampling, at skip scale
        elif u.name == "head":
            size = u.spec.out_size(h, w)  # runs after the final x2 upsampling
        else:
            size = u.spec.out_size(*cur)
            cur = size
            if u.name == "enc1_down":
                skip = size
            elif u.name == "enc3_down":
                enc_out = size
        out.append((u.name, size))
    return out


def _elementwise_ops(m: Model, sizes: dict[str, tuple[int, int]]) -> int:
    """Per-image non-MAC work: BN and PReLU applications plus upsampling."""
    total = 0
    for u in m.units:
        ho, wo = sizes[u.name]
        if u.has_bn:
            total += u.spec.out_channels * ho * wo
        if u.has_act:
            total += u.spec.out_channels * ho * wo
    c1, c2, c3 = m.config.stage_widths()
    h, w = m.config.input_size
    total += c3 * (h // 2) * (w // 2)  # bottleneck output upsampled x4
    total += c2 * h * w  # decoder output upsampled x2
    return total


def count_model(m: Model, cm: CostModel = CostModel()) -> ComplexityReport:
    sizes = unit_output_sizes(m)
    layers = tuple(_cost_of(u, hw) for u, (_, hw) in zip(m.units, sizes))
    total_fm = sum(c.float_macs for c in layers)
    total_ops = sum(c.binary_ops for c in layers)
    total_bits = sum(c.param_bits for c in layers)
    total_bytes = header_bytes(m.config) + sum(c.size_bytes for c in layers)

    base_cfg = replace(
        m.config,
        binarize_encoder=False,
        binarize_bottleneck=False,
        binarize_decoder=False,
    )
    baseline = build_model(base_cfg)
    base_layers = tuple(
        _cost_of(u, hw) for u, (_, hw) in zip(baseline.units, unit_output_sizes(baseline))
    )
    base_macs = sum(c.float_macs for c in base_layers)
    base_bytes = header_bytes(base_cfg) + sum(c.size_bytes for c in base_layers)

    effective = total_fm + total_ops * cm.bitop_per_mac
    return ComplexityReport(
        layers=layers,
        total_float_macs=total_fm,
        total_binary_ops=total_ops,
        total_param_bits=total_bits,
        total_size_bytes=total_bytes,
        float_baseline_macs=base_macs,
        float_baseline_bytes=base_bytes,
        elementwise_ops=_elementwise_ops(m, dict(sizes)),
        bitop_per_mac=cm.bitop_per_mac,
        effective_macs=effective,
        compression=base_bytes / total_bytes,
        speedup=base_macs / effective,
    )


def cost_model_apply(report: ComplexityReport, cm: CostModel) -> float:
    """Speedup of the counted model under a different op exchange rate."""
    effective = report.total_float_macs + report.total_binary_ops * cm.bitop_per_mac
    return report.float_baseline_macs / effective


def csv_lines(report: ComplexityReport) -> list[str]:
    lines = [CSV_HEADER]
    for c in report.layers:
        lines.append(
            f"{c.name},{c.kind},{c.float_macs},{c.binary_ops},{c.param_bits},{c.size_bytes}"
        )
    return lines


def text_table(report: ComplexityReport) -> str:
    headers = ("layer", "kind", "float_macs", "binary_ops", "param_bits", "size_bytes")
    rows = [
        (c.name, c.kind, str(c.float_macs), str(c.binary_ops), str(c.param_bits), str(c.size_bytes))
        for c in report.layers
    ]
    rows.append(
        (
            "total",
            "-",
            str(report.total_float_macs),
            str(report.total_binary_ops),
            str(report.total_param_bits),
            str(report.total_size_bytes - header_bytes_of(report)),
        )
    )
    widths = [max(len(h), max(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
    out = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(headers))]
    for r in rows:
        out.append("  ".join(v.rjust(widths[i]) if i >= 2 else v.ljust(widths[i]) for i, v in enumerate(r)))
    out.append("")
    out.append(f"file bytes (with header): {report.total_size_bytes}")
    out.append(f"float baseline bytes:     {report.float_baseline_bytes}")
    out.append(f"compression:              {report.compression:.2f}x")
    out.append(f"effective MACs:           {report.effective_macs:.1f}")
    out.append(f"float baseline MACs:      {report.float_baseline_macs}")
    out.append(f"speedup (at {report.bitop_per_mac:.4f} MAC/bitop): {report.speedup:.2f}x")
    out.append(f"elementwise ops (not in totals): {report.elementwise_ops}")
    return "\n".join(out)


def header_bytes_of(report: ComplexityReport) -> int:
    """File bytes not attributed to any layer record."""
    return report.total_size_bytes - sum(c.size_bytes for c in report.layers)
