"""The drivable-area network: encoder, dilated bottleneck, skip decoder.

The graph runs at output stride 8. Input images in [0, 1] are mapped to
[-1, 1] by a fixed affine so the first binarized convolution sees signs
rather than a constant-positive field. The encoder is a stem conv plus
three stages, each two 3x3 conv units followed by a stride-2 downsample
conv; the output of the first downsample (half resolution) is kept as the
skip feature. The bottleneck applies parallel dilated 3x3 convolutions at
the configured rates to the stride-8 map, concatenates the branches, and
fuses them with a 1x1 conv. The decoder upsamples x4 (bilinear),
concatenates the skip feature, applies one 3x3 conv unit, upsamples x2,
and ends in a bare 1x1 conv producing two class planes. Every unit except
that head is conv + batchnorm + PReLU, with no biases anywhere.

Which convolutions are binarized is controlled per section
(encoder/bottleneck/decoder) with separate first/last-layer switches: the
stem binarizes only if both the encoder flag and the first-layer flag are
set, the head only if both the decoder flag and the last-layer flag are
set. All flags default on: the default network is fully binarized.

Model files ("BDAD") hold a 6-byte prologue (magic, format version, file
kind), a length-prefixed key=value config block, and one record per conv
unit in graph order; all integers are 8-byte little-endian. A binary
layer's record stores packed sign bits plus per-base scale/shift, not the
latent float weights, which is what makes the file an order of magnitude
smaller than the float twin. Inference files drop latents entirely
(loading reconstructs an equivalent latent from the bases); checkpoint
files append them so training can resume.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .binarize import BinaryBase, MultiBaseFilter, ScaledBinaryFilter
from .bitcore import deserialize_bits, serialize_bits
from .errors import ConfigError, DimensionError, FormatError
from .nn import (
    ConvSpec,
    Tensor,
    affine,
    batchnorm2d,
    bilinear_upsample,
    concat_channels,
    conv2d_binary,
    conv2d_float,
    make_filter,
    no_grad,
    prelu,
)

MAGIC = b"BDAD"
FORMAT_VERSION = 1
KIND_INFERENCE = 0
KIND_CHECKPOINT = 1

_NUM_CLASSES = 2


def _as_int_tuple(v, name: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in v)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a sequence of integers, got {v!r}") from None


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs; the defaults are the standard 64x64 network."""

    input_size: tuple[int, int] = (64, 64)
    width_multiplier: float = 1.0
    channels: tuple[int, int, int] = (16, 32, 64)
    rates: tuple[int, ...] = (1, 2, 4)
    binarize_encoder: bool = True
    binarize_bottleneck: bool = True
    binarize_decoder: bool = True
    binarize_first_layer: bool = True
    binarize_last_layer: bool = True
    multi_base: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_size", _as_int_tuple(self.input_size, "input_size"))
        object.__setattr__(self, "channels", _as_int_tuple(self.channels, "channels"))
        object.__setattr__(self, "rates", _as_int_tuple(self.rates, "rates"))
        h, w = self.input_size if len(self.input_size) == 2 else (0, 0)
        if h < 8 or w < 8 or h % 8 or w % 8:
            raise ConfigError(
                f"input size must be multiples of 8, at least 8x8, got {self.input_size}"
            )
        if not (self.width_multiplier > 0):
            raise ConfigError(f"width multiplier must be > 0, got {self.width_multiplier}")
        if len(self.channels) != 3 or min(self.channels) < 1:
            raise ConfigError(
                f"need exactly 3 positive stage widths (one per downsample), got {self.channels}"
            )
        if not self.rates:
            raise ConfigError("need at least one bottleneck dilation rate")
        if any(r < 1 or r > 4 for r in self.rates):
            raise ConfigError(f"dilation rates must lie in 1..4, got {self.rates}")
        if list(self.rates) != sorted(set(self.rates)):
            raise ConfigError(f"dilation rates must be strictly increasing, got {self.rates}")
        if self.multi_base < 1:
            raise ConfigError(f"multi_base must be >= 1, got {self.multi_base}")

    def stage_widths(self) -> tuple[int, int, int]:
        return tuple(max(2, int(round(c * self.width_multiplier))) for c in self.channels)


@dataclass
class ConvUnit:
    """One conv layer plus its optional batchnorm and PReLU."""

    name: str
    spec: ConvSpec
    bases: int
    weight: Tensor
    gamma: Tensor | None = None
    beta: Tensor | None = None
    run_mean: np.ndarray | None = None
    run_var: np.ndarray | None = None
    slope: Tensor | None = None
    cached_filter: object | None = field(default=None, repr=False)

    @property
    def has_bn(self) -> bool:
        return self.gamma is not None

    @property
    def has_act(self) -> bool:
        return self.slope is not None

    def filter(self):
        """The current binarization of the latent weights, cached."""
        if not self.spec.binary:
            return None
        if self.cached_filter is None:
            self.cached_filter = make_filter(self.weight.data, self.bases)
        return self.cached_filter

    def invalidate(self) -> None:
        self.cached_filter = None

    def forward(self, x: Tensor, *, training: bool, engine: str) -> Tensor:
        if self.spec.binary:
            y = conv2d_binary(
                x, self.weight, self.spec, bases=self.bases, filt=self.filter(), engine=engine
            )
        else:
            y = conv2d_float(x, self.weight, self.spec)
        if self.has_bn:
            y = batchnorm2d(
                y, self.gamma, self.beta, self.run_mean, self.run_var, training=training
            )
        if self.has_act:
            y = prelu(y, self.slope)
        return y


def _unit_param_count(u: ConvUnit) -> int:
    return int(np.prod(u.weight.data.shape))


class Model:
    """Built network: ordered conv units plus the fixed wiring in forward()."""

    def __init__(self, config: ModelConfig, units: list[ConvUnit]):
        self.config = config
        self.units = units
        self.by_name = {u.name: u for u in units}

    def unit(self, name: str) -> ConvUnit:
        return self.by_name[name]

    def parameters(self) -> list[tuple[str, Tensor, str]]:
        """(name, tensor, group) triples; group picks the update policy."""
        out = []
        for u in self.units:
            wgroup = "latent" if u.spec.binary else "conv_float"
            out.append((f"{u.name}.weight", u.weight, wgroup))
            if u.has_bn:
                out.append((f"{u.name}.gamma", u.gamma, "bn"))
                out.append((f"{u.name}.beta", u.beta, "bn"))
            if u.has_act:
                out.append((f"{u.name}.slope", u.slope, "act"))
        return out

    def invalidate_filters(self) -> None:
        for u in self.units:
            u.invalidate()

    def forward(self, x, *, training: bool = False, engine: str = "gemm") -> Tensor:
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        h, w = self.config.input_size
        if t.data.ndim != 4 or t.data.shape[1:] != (3, h, w):
            raise DimensionError(
                f"expected input (N, 3, {h}, {w}), got {tuple(t.data.shape)}"
            )
        u = self.by_name

        def run(name, val):
            return u[name].forward(val, training=training, engine=engine)

        out = affine(t, 2.0, -1.0)  # [0,1] -> [-1,1]
        out = run("stem", out)
        out = run("enc1_conv1", out)
        out = run("enc1_conv2", out)
        skip = run("enc1_down", out)
        out = run("enc2_conv1", skip)
        out = run("enc2_conv2", out)
        out = run("enc2_down", out)
        out = run("enc3_conv1", out)
        out = run("enc3_conv2", out)
        out = run("enc3_down", out)
        branches = [run(f"bott_r{r}", out) for r in self.config.rates]
        merged = branches[0]
        for b in branches[1:]:
            merged = concat_channels(merged, b)
        out = run("bott_fuse", merged)
        out = bilinear_upsample(out, 4)
        out = concat_channels(out, skip)
        out = run("dec_conv", out)
        out = bilinear_upsample(out, 2)
        return run("head", out)

    def predict(self, x, *, engine: str = "gemm") -> np.ndarray:
        """Inference-mode masks (N, H, W) in {0, 1} for a batch of images."""
        with no_grad():
            logits = self.forward(x, training=False, engine=engine)
        return predict_mask(logits.data)


def predict_mask(logits) -> np.ndarray:
    """Per-pixel argmax over the two class planes; ties go to background."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if arr.ndim != 4 or arr.shape[1] != _NUM_CLASSES:
        raise DimensionError(f"expected logits (N, 2, H, W), got {arr.shape}")
    return (arr[:, 1] > arr[:, 0]).astype(np.uint8)


def _unit_plan(cfg: ModelConfig) -> list[tuple[str, ConvSpec, bool]]:
    """(name, spec, has_bn_act) for every conv unit, in graph order."""
    c1, c2, c3 = cfg.stage_widths()
    enc = cfg.binarize_encoder
    bott = cfg.binarize_bottleneck
    dec = cfg.binarize_decoder

    def conv(cin, cout, k, *, s=1, d=1, p=0, binary=False):
        return ConvSpec(cin, cout, (k, k), stride=s, dilation=d, padding=p, binary=binary)

    plan = [
        ("stem", conv(3, c1, 3, p=1, binary=enc and cfg.binarize_first_layer), True),
        ("enc1_conv1", conv(c1, c1, 3, p=1, binary=enc), True),
        ("enc1_conv2", conv(c1, c1, 3, p=1, binary=enc), True),
        ("enc1_down", conv(c1, c2, 3, s=2, p=1, binary=enc), True),
        ("enc2_conv1", conv(c2, c2, 3, p=1, binary=enc), True),
        ("enc2_conv2", conv(c2, c2, 3, p=1, binary=enc), True),
        ("enc2_down", conv(c2, c3, 3, s=2, p=1, binary=enc), True),
        ("enc3_conv1", conv(c3, c3, 3, p=1, binary=enc), True),
        ("enc3_conv2", conv(c3, c3, 3, p=1, binary=enc), True),
        ("enc3_down", conv(c3, c3, 3, s=2, p=1, binary=enc), True),
    ]
    for r in cfg.rates:
        plan.append((f"bott_r{r}", conv(c3, c3, 3, d=r, p=r, binary=bott), True))
    plan.append(("bott_fuse", conv(len(cfg.rates) * c3, c3, 1, binary=bott), True))
    plan.append(("dec_conv", conv(c3 + c2, c2, 3, p=1, binary=dec), True))
    plan.append(("head", conv(c2, _NUM_CLASSES, 1, binary=dec and cfg.binarize_last_layer), False))
    return plan


def build_model(cfg: ModelConfig) -> Model:
    """Fresh network with Kaiming-uniform weights drawn from cfg.seed."""
    rng = np.random.default_rng(cfg.seed)
    units = []
    for name, spec, with_bn_act in _unit_plan(cfg):
        bound = float(np.sqrt(6.0 / spec.fan_in))
        shape = (spec.out_channels, spec.in_channels) + tuple(spec.kernel)
        w = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        unit = ConvUnit(
            name=name,
            spec=spec,
            bases=cfg.multi_base if spec.binary else 1,
            weight=Tensor(w, requires_grad=True),
        )
        if with_bn_act:
            c = spec.out_channels
            unit.gamma = Tensor(np.ones(c, dtype=np.float32), requires_grad=True)
            unit.beta = Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)
            unit.run_mean = np.zeros(c, dtype=np.float32)
            unit.run_var = np.ones(c, dtype=np.float32)
            unit.slope = Tensor(np.full(c, 0.25, dtype=np.float32), requires_grad=True)
        units.append(unit)
    return Model(cfg, units)


# ---------------------------------------------------------------------------
# serialization

_CONFIG_KEYS = (
    "height",
    "width",
    "width_multiplier",
    "channels",
    "rates",
    "binarize_encoder",
    "binarize_bottleneck",
    "binarize_decoder",
    "binarize_first_layer",
    "binarize_last_layer",
    "multi_base",
    "seed",
)


def _config_text(cfg: ModelConfig) -> bytes:
    h, w = cfg.input_size
    pairs = {
        "height": h,
        "width": w,
        "width_multiplier": repr(float(cfg.width_multiplier)),
        "channels": ",".join(str(c) for c in cfg.channels),
        "rates": ",".join(str(r) for r in cfg.rates),
        "binarize_encoder": int(cfg.binarize_encoder),
        "binarize_bottleneck": int(cfg.binarize_bottleneck),
        "binarize_decoder": int(cfg.binarize_decoder),
        "binarize_first_layer": int(cfg.binarize_first_layer),
        "binarize_last_layer": int(cfg.binarize_last_layer),
        "multi_base": cfg.multi_base,
        "seed": cfg.seed,
    }
    return "".join(f"{k}={pairs[k]}\n" for k in _CONFIG_KEYS).encode("ascii")


def _parse_config_text(text: bytes, offset: int) -> ModelConfig:
    got = {}
    for line in text.decode("ascii", errors="replace").splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise FormatError(f"malformed config line {line!r}", offset=offset)
        k, v = line.split("=", 1)
        if k not in _CONFIG_KEYS:
            raise FormatError(f"unknown config key {k!r} in model file", offset=offset)
        got[k] = v
    missing = [k for k in _CONFIG_KEYS if k not in got]
    if missing:
        raise FormatError(f"model config is missing keys {missing}", offset=offset)
    try:
        return ModelConfig(
            input_size=(int(got["height"]), int(got["width"])),
            width_multiplier=float(got["width_multiplier"]),
            channels=tuple(int(c) for c in got["channels"].split(",")),
            rates=tuple(int(r) for r in got["rates"].split(",")),
            binarize_encoder=bool(int(got["binarize_encoder"])),
            binarize_bottleneck=bool(int(got["binarize_bottleneck"])),
            binarize_decoder=bool(int(got["binarize_decoder"])),
            binarize_first_layer=bool(int(got["binarize_first_layer"])),
            binarize_last_layer=bool(int(got["binarize_last_layer"])),
            multi_base=int(got["multi_base"]),
            seed=int(got["seed"]),
        )
    except (ValueError, ConfigError) as exc:
        raise FormatError(f"bad model config block: {exc}", offset=offset) from None


def _filter_base_list(filt) -> list[tuple[np.ndarray, float, object]]:
    if isinstance(filt, ScaledBinaryFilter):
        return [(filt.alpha, 0.0, filt.bits)]
    if isinstance(filt, MultiBaseFilter):
        return [(b.alpha, b.shift, b.bits) for b in filt.bases]
    raise TypeError(f"not a binary filter: {type(filt).__name__}")


def _f32_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def unit_record(u: ConvUnit, kind: int = KIND_INFERENCE) -> bytes:
    """The serialized form of one conv unit (exact on-disk bytes)."""
    s = u.spec
    name = u.name.encode("utf-8")
    out = [struct.pack("<Q", len(name)), name]
    out.append(struct.pack("<Q", 1 if s.binary else 0))
    out.append(
        struct.pack(
            "<7Q",
            s.in_channels,
            s.out_channels,
            s.kernel[0],
            s.kernel[1],
            s.stride,
            s.dilation,
            s.padding,
        )
    )
    out.append(struct.pack("<QQ", int(u.has_bn), int(u.has_act)))
    if s.binary:
        bases = _filter_base_list(u.filter())
        out.append(struct.pack("<Q", len(bases)))
        for alpha, shift, bits in bases:
            out.append(struct.pack("<f", shift))
            out.append(struct.pack("<Q", alpha.size))
            out.append(_f32_bytes(alpha))
            out.append(serialize_bits(bits))
    else:
        w = u.weight.data
        out.append(struct.pack("<Q", w.size))
        out.append(_f32_bytes(w))
    if u.has_bn:
        c = u.run_mean.size
        out.append(struct.pack("<Q", c))
        for a in (u.gamma.data, u.beta.data, u.run_mean, u.run_var):
            out.append(_f32_bytes(a))
    if u.has_act:
        out.append(struct.pack("<Q", u.slope.data.size))
        out.append(_f32_bytes(u.slope.data))
    if kind == KIND_CHECKPOINT and s.binary:
        w = u.weight.data
        out.append(struct.pack("<Q", w.size))
        out.append(_f32_bytes(w))
    return b"".join(out)


def unit_record_bytes(u: ConvUnit, kind: int = KIND_INFERENCE) -> int:
    return len(unit_record(u, kind))


def header_bytes(cfg: ModelConfig) -> int:
    """File bytes before the first layer record."""
    return len(MAGIC) + 2 + 8 + len(_config_text(cfg)) + 8


def save_model(m: Model, path: str | os.PathLike, *, kind: int = KIND_INFERENCE) -> None:
    if kind not in (KIND_INFERENCE, KIND_CHECKPOINT):
        raise ValueError(f"unknown file kind {kind}")
    cfg_text = _config_text(m.config)
    blob = [
        MAGIC,
        bytes([FORMAT_VERSION, kind]),
        struct.pack("<Q", len(cfg_text)),
        cfg_text,
        struct.pack("<Q", len(m.units)),
    ]
    blob.extend(unit_record(u, kind) for u in m.units)
    with open(path, "wb") as fh:
        fh.write(b"".join(blob))


class _Reader:
    """Byte cursor that raises FormatError with the failing offset."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if len(self.buf) < self.pos + n:
            raise FormatError(
                f"truncated model file reading {what}: "
                f"need {n} bytes, have {len(self.buf) - self.pos}",
                offset=self.pos,
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def f32s(self, count: int, what: str) -> np.ndarray:
        raw = self.take(4 * count, what)
        return np.frombuffer(raw, dtype="<f4").astype(np.float32)


def _load_unit_payload(r: _Reader, u: ConvUnit, binary: int, kind: int) -> None:
    s = u.spec
    if binary:
        count = r.u64("base count")
        if count != u.bases:
            raise FormatError(
                f"layer {u.name}: file has {count} bases, config says {u.bases}",
                offset=r.pos - 8,
            )
        bases = []
        for i in range(count):
            shift = struct.unpack("<f", r.take(4, f"{u.name} base {i} shift"))[0]
            asize = r.u64(f"{u.name} base {i} alpha count")
            if asize != s.out_channels:
                raise FormatError(
                    f"layer {u.name}: alpha count {asize} != {s.out_channels}",
                    offset=r.pos - 8,
                )
            alpha = r.f32s(asize, f"{u.name} base {i} alpha")
            bits, nxt = deserialize_bits(r.buf, r.pos)
            r.pos = nxt
            if bits.shape != (s.out_channels, s.fan_in):
                raise FormatError(
                    f"layer {u.name}: bit rows {bits.shape} != "
                    f"{(s.out_channels, s.fan_in)}",
                    offset=r.pos,
                )
            bases.append(BinaryBase(alpha=alpha, shift=float(shift), bits=bits))
        if count == 1 and bases[0].shift == 0.0:
            filt = ScaledBinaryFilter(alpha=bases[0].alpha, bits=bases[0].bits, fan_in=s.fan_in)
        else:
            filt = MultiBaseFilter(bases=tuple(bases), fan_in=s.fan_in)
        u.cached_filter = filt
        shape = (s.out_channels, s.in_channels) + tuple(s.kernel)
        u.weight.data = filt.reconstruct(np.float32).reshape(shape)
    else:
        wsize = r.u64(f"{u.name} weight count")
        shape = (s.out_channels, s.in_channels) + tuple(s.kernel)
        if wsize != int(np.prod(shape)):
            raise FormatError(
                f"layer {u.name}: weight count {wsize} != {int(np.prod(shape))}",
                offset=r.pos - 8,
            )
        u.weight.data = r.f32s(wsize, f"{u.name} weights").reshape(shape)
    if u.has_bn:
        c = r.u64(f"{u.name} bn width")
        if c != s.out_channels:
            raise FormatError(
                f"layer {u.name}: bn width {c} != {s.out_channels}", offset=r.pos - 8
            )
        u.gamma.data = r.f32s(c, f"{u.name} gamma")
        u.beta.data = r.f32s(c, f"{u.name} beta")
        u.run_mean = r.f32s(c, f"{u.name} running mean")
        u.run_var = r.f32s(c, f"{u.name} running var")
    if u.has_act:
        c = r.u64(f"{u.name} act width")
        if c != s.out_channels:
            raise FormatError(
                f"layer {u.name}: act width {c} != {s.out_channels}", offset=r.pos - 8
            )
        u.slope.data = r.f32s(c, f"{u.name} slopes")
    if kind == KIND_CHECKPOINT and binary:
        wsize = r.u64(f"{u.name} latent count")
        shape = (s.out_channels, s.in_channels) + tuple(s.kernel)
        if wsize != int(np.prod(shape)):
            raise FormatError(
                f"layer {u.name}: latent count {wsize} != {int(np.prod(shape))}",
                offset=r.pos - 8,
            )
        u.weight.data = r.f32s(wsize, f"{u.name} latents").reshape(shape)
        u.invalidate()  # rebuild from the restored latents on first use


def load_model(path: str | os.PathLike) -> Model:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    version = r.take(1, "format version")[0]
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", offset=4)
    kind = r.take(1, "file kind")[0]
    if kind not in (KIND_INFERENCE, KIND_CHECKPOINT):
        raise FormatError(f"unknown file kind {kind}", offset=5)
    cfg_len = r.u64("config length")
    cfg_off = r.pos
    cfg = _parse_config_text(r.take(cfg_len, "config block"), cfg_off)
    m = build_model(cfg)
    layer_count = r.u64("layer count")
    if layer_count != len(m.units):
        raise FormatError(
            f"file lists {layer_count} layers, architecture has {len(m.units)}",
            offset=r.pos - 8,
        )
    for u in m.units:
        name_off = r.pos
        name_len = r.u64("layer name length")
        name = r.take(name_len, "layer name").decode("utf-8", errors="replace")
        if name != u.name:
            raise FormatError(
                f"layer order mismatch: file has {name!r}, expected {u.name!r}",
                offset=name_off,
            )
        binary = r.u64(f"{name} kind")
        if binary != (1 if u.spec.binary else 0):
            raise FormatError(
                f"layer {name}: binary flag {binary} contradicts config", offset=r.pos - 8
            )
        geo = struct.unpack("<7Q", r.take(56, f"{name} geometry"))
        s = u.spec
        want = (s.in_channels, s.out_channels, s.kernel[0], s.kernel[1], s.stride, s.dilation, s.padding)
        if geo != want:
            raise FormatError(
                f"layer {name}: geometry {geo} != {want}", offset=r.pos - 56
            )
        flags = struct.unpack("<QQ", r.take(16, f"{name} bn/act flags"))
        if flags != (int(u.has_bn), int(u.has_act)):
            raise FormatError(
                f"layer {name}: bn/act flags {flags} contradict architecture",
                offset=r.pos - 16,
            )
        _load_unit_payload(r, u, binary, kind)
    if r.pos != len(r.buf):
        raise FormatError(
            f"{len(r.buf) - r.pos} trailing bytes after last layer record", offset=r.pos
        )
    return m
