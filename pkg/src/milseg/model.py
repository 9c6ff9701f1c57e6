"""U-net-like MIL classifier and its checkpoint format.

The encoder is a stack of 4x4 stride-2 convolutions (batch norm, leaky ReLU),
each halving the spatial size. The decoder mirrors it with transposed
convolutions (batch norm, ReLU, dropout on the first few layers) and
concatenates the matching encoder output before every deconvolution except
the first. A final transposed convolution restores the input resolution; its
ReLU output is the activation stack used for weak segmentation and is fed to
the classification head.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import functional as F
from ._crc import crc64
from .errors import (
    CheckpointError,
    ChecksumError,
    ConfigurationError,
    DimensionError,
    MagicError,
    ShapeMismatchError,
    TruncatedError,
    VersionError,
)
from .tensor import Tensor

logger = logging.getLogger(__name__)

KERNEL = 4
STRIDE = 2
PADDING = 1

HEADS = ("avg_pool_fc", "fc_baseline")


@dataclass
class ModelConfig:
    input_size: int = 64
    input_channels: int = 1
    base_channels: int = 8
    max_channels: int = 32
    depth: int = 6
    head: str = "avg_pool_fc"
    fc_baseline_widths: tuple[int, ...] = (5000, 1000, 2)
    dropout_layers: int = 3
    dropout_rate: float = 0.5
    leaky_slope: float = F.LEAKY_SLOPE
    num_classes: int = 2
    init_std: float = 0.02
    seed: int = 0

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        """250x250 input, 64..512 channels, eight encoder layers."""
        base = dict(input_size=250, base_channels=64, max_channels=512, depth=8)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    def validate(self) -> None:
        if self.input_size < 1 or self.input_channels < 1 or self.base_channels < 1:
            raise ConfigurationError("input_size, input_channels and base_channels must be positive")
        if self.max_channels < self.base_channels:
            raise ConfigurationError("max_channels must be at least base_channels")
        if self.depth < 1:
            raise ConfigurationError("depth must be at least 1")
        if self.head not in HEADS:
            raise ConfigurationError(f"head must be one of {HEADS}, got {self.head!r}")
        if not 0 <= self.dropout_layers <= self.depth - 1:
            raise ConfigurationError(f"dropout_layers must lie in [0, {self.depth - 1}]")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigurationError("dropout_rate must lie in [0, 1)")
        if self.head == "fc_baseline" and (
            not self.fc_baseline_widths or self.fc_baseline_widths[-1] != self.num_classes
        ):
            raise ConfigurationError("fc_baseline_widths must end with num_classes")
        sizes = self.spatial_sizes()
        if min(sizes[:-1]) < 1 or 1 in sizes[:-2]:
            raise ConfigurationError(
                f"input_size {self.input_size} cannot be halved {self.depth} times: sizes {sizes}"
            )

    def channels(self) -> list[int]:
        """Encoder output channels: start at base_channels, double per layer, capped."""
        return [min(self.base_channels * 2**k, self.max_channels) for k in range(self.depth)]

    def paddings(self) -> list[int]:
        """Per encoder layer padding.

        A 1x1 map (the bottleneck of odd inputs such as 250) gets padding 2,
        which keeps it 1x1 instead of collapsing to nothing.
        """
        pads, size = [], self.input_size
        for _ in range(self.depth):
            pad = PADDING if size + 2 * PADDING >= KERNEL else 2
            pads.append(pad)
            size = F.conv_output_size(size, KERNEL, STRIDE, pad) if size > 0 else 0
        return pads

    def spatial_sizes(self) -> list[int]:
        """Input size followed by the output size of every encoder layer."""
        sizes = [self.input_size]
        for pad in self.paddings():
            sizes.append(F.conv_output_size(sizes[-1], KERNEL, STRIDE, pad) if sizes[-1] > 0 else 0)
        return sizes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fc_baseline_widths"] = list(self.fc_baseline_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "fc_baseline_widths" in d:
            d["fc_baseline_widths"] = tuple(d["fc_baseline_widths"])
        return cls(**d)


@dataclass
class DecoderLayer:
    conv: F.ConvParams
    bn: Optional[F.BatchNormState]
    dropout: bool


@dataclass
class MilNet:
    config: ModelConfig
    encoder: list[tuple[F.ConvParams, F.BatchNormState]]
    decoder: list[DecoderLayer]
    reconstruction: F.ConvParams
    head: list[tuple[Tensor, Tensor]]
    sizes: list[int] = field(default_factory=list)

    def parameters(self) -> dict[str, Tensor]:
        """Learnable tensors in a fixed order (also the checkpoint order)."""
        out: dict[str, Tensor] = {}
        for i, (conv, bn) in enumerate(self.encoder):
            out[f"enc{i}.weight"] = conv.weights
            out[f"enc{i}.bias"] = conv.bias
            out[f"enc{i}.bn.scale"] = bn.scale
            out[f"enc{i}.bn.shift"] = bn.shift
        for i, layer in enumerate(self.decoder):
            out[f"dec{i}.weight"] = layer.conv.weights
            out[f"dec{i}.bias"] = layer.conv.bias
            if layer.bn is not None:
                out[f"dec{i}.bn.scale"] = layer.bn.scale
                out[f"dec{i}.bn.shift"] = layer.bn.shift
        out["recon.weight"] = self.reconstruction.weights
        out["recon.bias"] = self.reconstruction.bias
        for i, (w, b) in enumerate(self.head):
            out[f"head{i}.weight"] = w
            out[f"head{i}.bias"] = b
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        """Batch-norm running statistics (persisted, not learned)."""
        out: dict[str, np.ndarray] = {}
        for i, (_, bn) in enumerate(self.encoder):
            out[f"enc{i}.bn.running_mean"] = bn.running_mean
            out[f"enc{i}.bn.running_var"] = bn.running_var
        for i, layer in enumerate(self.decoder):
            if layer.bn is not None:
                out[f"dec{i}.bn.running_mean"] = layer.bn.running_mean
                out[f"dec{i}.bn.running_var"] = layer.bn.running_var
        return out

    def batch_norms(self) -> list[F.BatchNormState]:
        return [bn for _, bn in self.encoder] + [l.bn for l in self.decoder if l.bn is not None]

    @property
    def dtype(self):
        return self.reconstruction.weights.dtype

    def forward(
        self, batch, training: bool = False, rng: Optional[np.random.Generator] = None
    ) -> tuple[Tensor, Tensor]:
        """Return ``(logits, last_activation)`` for a batch x C x H x W input."""
        return forward(self, batch, training, rng)


def _conv_params(rng, out_ch, in_ch, std, dtype, name, padding=PADDING, output_padding=0) -> F.ConvParams:
    w = (rng.standard_normal((out_ch, in_ch, KERNEL, KERNEL), dtype=np.float64) * std).astype(dtype)
    return F.ConvParams(
        weights=Tensor(w, requires_grad=True, name=f"{name}.weight"),
        bias=Tensor(np.zeros(out_ch, dtype), requires_grad=True, name=f"{name}.bias"),
        stride=STRIDE,
        padding=padding,
        output_padding=output_padding,
    )


def _linear_params(rng, out_f, in_f, std, dtype, name) -> tuple[Tensor, Tensor]:
    w = (rng.standard_normal((out_f, in_f), dtype=np.float64) * std).astype(dtype)
    return (
        Tensor(w, requires_grad=True, name=f"{name}.weight"),
        Tensor(np.zeros(out_f, dtype), requires_grad=True, name=f"{name}.bias"),
    )


def build(config: ModelConfig, dtype=np.float32) -> MilNet:
    """Instantiate a network with N(0, init_std) kernels, zero biases and unit batch-norm scales."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    ch = config.channels()
    sizes = config.spatial_sizes()
    pads = config.paddings()
    depth = config.depth
    std = config.init_std

    encoder = []
    in_ch = config.input_channels
    for k in range(depth):
        conv = _conv_params(rng, ch[k], in_ch, std, dtype, f"enc{k}", pads[k])
        encoder.append((conv, F.BatchNormState.create(ch[k], dtype, f"enc{k}.bn")))
        in_ch = ch[k]

    # decoder layer i undoes encoder layer depth-1-i; the reconstruction undoes layer 0
    def output_padding(layer: int) -> int:
        in_size, target, pad = sizes[layer + 1], sizes[layer], pads[layer]
        extra = target - F.deconv_output_size(in_size, KERNEL, STRIDE, pad)
        if not 0 <= extra <= pad:
            raise ConfigurationError(f"cannot upsample {in_size} to {target} with a 4x4 stride-2 deconvolution")
        return extra

    decoder = []
    in_ch = ch[depth - 1]
    for i in range(depth - 1):
        if i > 0:
            in_ch += ch[depth - 1 - i]
        out_ch = ch[depth - 2 - i]
        layer = depth - 1 - i
        conv = _conv_params(rng, out_ch, in_ch, std, dtype, f"dec{i}", pads[layer], output_padding(layer))
        decoder.append(
            DecoderLayer(conv, F.BatchNormState.create(out_ch, dtype, f"dec{i}.bn"), i < config.dropout_layers)
        )
        in_ch = out_ch
    if depth > 1:
        in_ch += ch[0]
    recon = _conv_params(rng, config.base_channels, in_ch, std, dtype, "recon", pads[0], output_padding(0))

    head = []
    if config.head == "avg_pool_fc":
        head.append(_linear_params(rng, config.num_classes, config.base_channels, std, dtype, "head0"))
    else:
        in_f = config.base_channels * config.input_size * config.input_size
        for i, width in enumerate(config.fc_baseline_widths):
            head.append(_linear_params(rng, width, in_f, std, dtype, f"head{i}"))
            in_f = width

    net = MilNet(config, encoder, decoder, recon, head, sizes)
    logger.debug("built MilNet sizes=%s channels=%s params=%d", sizes, ch, parameter_count(net))
    return net


def forward(
    net: MilNet, batch, training: bool = False, rng: Optional[np.random.Generator] = None
) -> tuple[Tensor, Tensor]:
    cfg = net.config
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch), dtype=net.dtype)
    if x.ndim != 4:
        raise DimensionError(f"expected batch x channels x height x width input, got shape {x.shape}")
    expected = (cfg.input_channels, cfg.input_size, cfg.input_size)
    for axis, (got, want) in enumerate(zip(x.shape[1:], expected), start=1):
        if got != want:
            raise DimensionError(f"input axis {axis} has size {got}, model expects {want}")
    if training and rng is None:
        rng = np.random.default_rng(cfg.seed)
    for bn in net.batch_norms():
        bn.training = training

    skips = []
    h = x
    for conv, bn in net.encoder:
        h = F.leaky_relu(F.batch_norm(F.conv2d(h, conv), bn), cfg.leaky_slope)
        skips.append(h)

    depth = cfg.depth
    for i, layer in enumerate(net.decoder):
        if i > 0:
            h = F.concat_channels(h, skips[depth - 1 - i])
        h = F.relu(F.batch_norm(F.deconv2d(h, layer.conv), layer.bn))
        if layer.dropout:
            h = F.dropout(h, cfg.dropout_rate, training, rng)
    if depth > 1:
        h = F.concat_channels(h, skips[0])
    last = F.relu(F.deconv2d(h, net.reconstruction))

    if cfg.head == "avg_pool_fc":
        w, b = net.head[0]
        logits = F.linear(F.global_average_pool(last), w, b)
    else:
        z = F.flatten(last)
        for i, (w, b) in enumerate(net.head):
            z = F.linear(z, w, b)
            if i < len(net.head) - 1:
                z = F.relu(z)
        logits = z
    return logits, last


def parameter_count(net: MilNet) -> int:
    return int(sum(t.size for t in net.parameters().values()))


def describe(net: MilNet) -> str:
    """Multi-line summary of layer shapes, spatial sizes and the parameter total."""
    cfg = net.config
    lines = [f"config: {json.dumps(cfg.to_dict(), sort_keys=True)}"]
    lines.append(f"spatial sizes: {net.sizes}")
    lines.append(f"encoder channels: {cfg.channels()}")
    lines.append(f"encoder paddings: {cfg.paddings()}")
    lines.append(
        f"assumptions: {KERNEL}x{KERNEL} kernels, stride {STRIDE}; batch norm (scale+shift) after every encoder "
        f"and decoder layer; decoder input = previous output + mirrored encoder skip; reconstruction layer "
        f"back to {cfg.base_channels} channels without batch norm; dropout {cfg.dropout_rate} on the first "
        f"{cfg.dropout_layers} decoder layers; head {cfg.head}"
    )
    for name, t in net.parameters().items():
        lines.append(f"{name}: {list(t.shape)}")
    lines.append(f"parameter_count: {parameter_count(net)}")
    return "\n".join(lines)


# -- checkpoint -------------------------------------------------------------

MAGIC = b"MILSEG01"
_MAGIC_PREFIX = b"MILSEG"
_LEN = struct.Struct("<Q")


def _manifest(net: MilNet) -> list[tuple[str, np.ndarray]]:
    items = [(name, t.data) for name, t in net.parameters().items()]
    items += list(net.buffers().items())
    return items


def save_checkpoint(net: MilNet, path) -> None:
    """Write magic, length-prefixed JSON header, float32 LE tensors, CRC-64 of everything after the magic."""
    items = _manifest(net)
    header = {
        "config": net.config.to_dict(),
        "manifest": [{"name": name, "shape": list(arr.shape)} for name, arr in items],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = bytearray(_LEN.pack(len(header_bytes)))
    payload += header_bytes
    for _, arr in items:
        payload += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(payload)
        fh.write(_LEN.pack(crc64(bytes(payload))))


def load_checkpoint(path, dtype=np.float32) -> MilNet:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC):
        raise TruncatedError(f"{path}: file shorter than the magic")
    magic = raw[: len(MAGIC)]
    if magic != MAGIC:
        if magic.startswith(_MAGIC_PREFIX):
            raise VersionError(f"{path}: unsupported checkpoint version {magic[len(_MAGIC_PREFIX):]!r}")
        raise MagicError(f"{path}: not a checkpoint (magic {magic!r})")
    pos = len(MAGIC)
    if len(raw) < pos + _LEN.size:
        raise TruncatedError(f"{path}: missing header length")
    (header_len,) = _LEN.unpack_from(raw, pos)
    pos += _LEN.size
    if len(raw) < pos + header_len:
        raise TruncatedError(f"{path}: header truncated")
    try:
        header = json.loads(raw[pos : pos + header_len].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        manifest = [(m["name"], tuple(m["shape"])) for m in header["manifest"]]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    pos += header_len

    data_len = 4 * sum(int(np.prod(shape, dtype=np.int64)) for _, shape in manifest)
    if len(raw) < pos + data_len + _LEN.size:
        raise TruncatedError(f"{path}: expected {pos + data_len + _LEN.size} bytes, found {len(raw)}")
    if len(raw) > pos + data_len + _LEN.size:
        raise ChecksumError(f"{path}: trailing bytes after checksum")
    (stored_crc,) = _LEN.unpack_from(raw, pos + data_len)
    if crc64(raw[len(MAGIC) : pos + data_len]) != stored_crc:
        raise ChecksumError(f"{path}: CRC mismatch")

    net = build(config, dtype=dtype)
    expected = [(name, arr.shape) for name, arr in _manifest(net)]
    if [n for n, _ in expected] != [n for n, _ in manifest]:
        raise ShapeMismatchError(f"{path}: layer manifest does not match the configuration")
    targets = {**{n: t.data for n, t in net.parameters().items()}, **net.buffers()}
    for (name, shape), (_, want) in zip(manifest, expected):
        if tuple(shape) != tuple(want):
            raise ShapeMismatchError(f"{path}: {name} has shape {list(shape)}, configuration needs {list(want)}")
        n = int(np.prod(shape, dtype=np.int64))
        targets[name][...] = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
    return net
