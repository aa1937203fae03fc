"""UNetConv: a 1-D U-Net that scores every index of a curve as a knee.

The network takes a ``B x 2 x L`` batch (normalised x row and y row) and
returns ``B x 1 x L`` independent knee probabilities.  Layers come from
:mod:`kneebench.autograd`; this module only wires them, initialises weights
and reads/writes checkpoints.
"""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from . import autograd as ag
from .errors import ChecksumError, ConfigError, FormatError, ShapeMismatch, VersionError

MAGIC = b"KNEE"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture constants.

    ``width_scale`` multiplies the encoder, decoder and bottleneck channel
    counts so small models can be trained on a laptop.  The tail is already
    narrow and keeps its channels; scaling it would leave one-channel ReLU
    layers that are often dead at initialisation.
    """

    input_channels: int = 2
    length: int = 512
    encoder_channels: Tuple[int, ...] = (32, 64, 128, 256)
    bottleneck_channels: int = 256
    kernel: int = 11
    tail_channels: Tuple[int, ...] = (16, 8, 4, 1)
    tail_kernel: int = 2
    width_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        object.__setattr__(self, "tail_channels", tuple(int(c) for c in self.tail_channels))
        self.validate()

    def validate(self):
        if self.input_channels < 1:
            raise ConfigError("input_channels must be positive")
        if not self.encoder_channels:
            raise ConfigError("encoder_channels must not be empty")
        if any(c < 1 for c in self.encoder_channels + self.tail_channels) or self.bottleneck_channels < 1:
            raise ConfigError("channel counts must be positive")
        depth = 2 ** len(self.encoder_channels)
        if self.length < depth or self.length % depth:
            raise ConfigError(f"length {self.length} is not divisible by 2^{len(self.encoder_channels)}")
        if not self.tail_channels or self.tail_channels[-1] != 1:
            raise ConfigError("the last tail layer must have exactly one channel")
        if self.kernel < 1 or self.tail_kernel < 1:
            raise ConfigError("kernel sizes must be positive")
        if not self.width_scale > 0:
            raise ConfigError("width_scale must be positive")

    def scaled(self, c: int) -> int:
        return max(1, int(round(c * self.width_scale)))

    @property
    def enc(self) -> List[int]:
        return [self.scaled(c) for c in self.encoder_channels]

    @property
    def bottleneck(self) -> int:
        return self.scaled(self.bottleneck_channels)

    @property
    def tail(self) -> List[int]:
        return list(self.tail_channels)


@dataclass
class Model:
    config: ModelConfig
    params: Dict[str, ag.Tensor] = field(default_factory=dict)
    bn: Dict[str, ag.BatchNormState] = field(default_factory=dict)

    def parameters(self) -> List[ag.Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def _layer_plan(cfg: ModelConfig):
    """Yield ``(name, kind, c_in, c_out, k)`` for every weight layer in order."""
    plan = []
    c = cfg.input_channels
    for lvl, ce in enumerate(cfg.enc):
        plan.append((f"enc{lvl}", "conv", c, ce, cfg.kernel))
        c = ce
    plan.append(("bott", "conv", c, cfg.bottleneck, cfg.kernel))
    c = cfg.bottleneck
    for lvl in reversed(range(len(cfg.enc))):
        skip = cfg.enc[lvl]
        plan.append((f"up{lvl}", "upconv", c, skip, 2))
        plan.append((f"dec{lvl}", "conv", 2 * skip, skip, cfg.kernel))
        c = skip
    for t, ct in enumerate(cfg.tail):
        plan.append((f"tail{t}", "conv", c, ct, cfg.tail_kernel))
        c = ct
    return plan


# layers followed by batch norm
def _has_bn(name: str) -> bool:
    return name.startswith(("enc", "bott", "up"))


def build(config: ModelConfig, seed: int = 0) -> Model:
    """Initialise a model.

    Conv weights are uniform on ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` and
    biases start at zero, so no ReLU begins fully switched off; batch-norm
    scale is one and shift zero.
    """
    if not isinstance(config, ModelConfig):
        raise ConfigError("build expects a ModelConfig")
    rng = np.random.Generator(np.random.Philox(seed))
    model = Model(config)
    for name, kind, cin, cout, k in _layer_plan(config):
        bound = 1.0 / np.sqrt(cin * k)
        shape = (cout, cin, k) if kind == "conv" else (cin, cout, k)
        model.params[f"{name}.w"] = ag.Tensor(rng.uniform(-bound, bound, shape), True, f"{name}.w")
        model.params[f"{name}.b"] = ag.Tensor(np.zeros(cout), True, f"{name}.b")
        if _has_bn(name):
            model.params[f"{name}.gamma"] = ag.Tensor(np.ones(cout), True, f"{name}.gamma")
            model.params[f"{name}.beta"] = ag.Tensor(np.zeros(cout), True, f"{name}.beta")
            model.bn[name] = ag.BatchNormState.fresh(cout)
    return model


def _block(model: Model, name: str, x: ag.Tensor, train: bool, up: bool = False) -> ag.Tensor:
    p = model.params
    op = ag.transposed_conv1d if up else ag.conv1d
    h = op(x, p[f"{name}.w"], p[f"{name}.b"])
    h = ag.batchnorm1d(h, p[f"{name}.gamma"], p[f"{name}.beta"], model.bn[name], train)
    return ag.relu(h)


def forward(model: Model, batch, train: bool = False, trace: list | None = None) -> ag.Tensor:
    """Run the network on a ``B x C x L`` batch and return probabilities.

    When ``trace`` is a list, the shape after every block is appended to it.
    """
    cfg = model.config
    x = ag.as_tensor(batch)
    if x.data.ndim != 3 or x.shape[1] != cfg.input_channels or x.shape[2] != cfg.length:
        raise ShapeMismatch(f"expected B x {cfg.input_channels} x {cfg.length}, got {x.shape}")
    note = trace.append if trace is not None else (lambda s: None)
    skips = []
    h = x
    for lvl in range(len(cfg.enc)):
        h = _block(model, f"enc{lvl}", h, train)
        skips.append(h)
        h = ag.maxpool1d(h)
        note(("enc", lvl, h.shape))
    h = _block(model, "bott", h, train)
    note(("bott", h.shape))
    p = model.params
    for lvl in reversed(range(len(cfg.enc))):
        h = _block(model, f"up{lvl}", h, train, up=True)
        h = ag.concat_channels(h, skips[lvl])
        h = ag.conv1d(h, p[f"dec{lvl}.w"], p[f"dec{lvl}.b"])
        note(("dec", lvl, h.shape))
    n_tail = len(cfg.tail)
    for t in range(n_tail):
        h = ag.conv1d(h, p[f"tail{t}.w"], p[f"tail{t}.b"])
        if t < n_tail - 1:
            h = ag.relu(h)
    return ag.sigmoid(h)


def predict(model: Model, batch) -> np.ndarray:
    """Eval-mode probabilities as a ``B x L`` array."""
    return forward(model, batch, train=False).data[:, 0, :]


def sync_bn_stats(model: Model, batch) -> None:
    """Set every running statistic to the statistics of ``batch``.

    Afterwards an eval-mode forward on ``batch`` reproduces the train-mode
    forward, which is a cheap end-to-end check of the normalisation wiring.
    """
    forward(model, batch, train=True)
    for s in model.bn.values():
        s.running_mean, s.running_var = s.batch_mean.copy(), s.batch_var.copy()


def _unit(v: np.ndarray) -> np.ndarray:
    lo, hi = v.min(), v.max()
    return (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)


def encode(x, y, length: int | None = None) -> np.ndarray:
    """Two-row network input from a curve.

    Both rows are min-max scaled to [0, 1].  If ``length`` differs from the
    curve length, y is linearly resampled onto an even grid of that many
    points.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ShapeMismatch(f"encode expects two equal 1-D arrays, got {x.shape} and {y.shape}")
    xs, ys = _unit(x), _unit(y)
    if length is not None and length != x.size:
        grid = np.linspace(0.0, 1.0, length)
        ys = np.interp(grid, xs, ys)
        xs = grid
    return np.stack([xs, ys])


def encode_samples(samples, length: int | None = None) -> np.ndarray:
    """``B x 2 x L`` batch built from the noisy curves of ``samples``."""
    return np.stack([encode(s.x, s.y_noisy, length) for s in samples])


# ---------------------------------------------------------------------------
# checkpoints


def _pack_config(cfg: ModelConfig) -> bytes:
    out = struct.pack("<III", cfg.input_channels, cfg.length, len(cfg.encoder_channels))
    out += struct.pack(f"<{len(cfg.encoder_channels)}I", *cfg.encoder_channels)
    out += struct.pack("<III", cfg.bottleneck_channels, cfg.kernel, len(cfg.tail_channels))
    out += struct.pack(f"<{len(cfg.tail_channels)}I", *cfg.tail_channels)
    out += struct.pack("<Id", cfg.tail_kernel, cfg.width_scale)
    return out


def _read(buf: io.BytesIO, fmt: str):
    size = struct.calcsize(fmt)
    raw = buf.read(size)
    if len(raw) != size:
        raise FormatError("checkpoint truncated")
    return struct.unpack(fmt, raw)


def _unpack_config(buf: io.BytesIO) -> ModelConfig:
    cin, length, n_enc = _read(buf, "<III")
    enc = _read(buf, f"<{n_enc}I")
    bott, kernel, n_tail = _read(buf, "<III")
    tail = _read(buf, f"<{n_tail}I")
    tail_kernel, width = _read(buf, "<Id")
    return ModelConfig(cin, length, enc, bott, kernel, tail, tail_kernel, width)


def _records(model: Model):
    for name, t in model.params.items():
        yield name, t.data
    for name, s in model.bn.items():
        yield f"{name}.running_mean", s.running_mean
        yield f"{name}.running_var", s.running_var


def dumps_checkpoint(model: Model) -> bytes:
    body = bytearray(MAGIC)
    body += struct.pack("<H", FORMAT_VERSION)
    body += _pack_config(model.config)
    recs = list(_records(model))
    body += struct.pack("<I", len(recs))
    for name, arr in recs:
        raw = name.encode("utf-8")
        body += struct.pack("<H", len(raw)) + raw
        body += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    return bytes(body)


def loads_checkpoint(blob: bytes) -> Model:
    if len(blob) < 10 or blob[:4] != MAGIC:
        raise FormatError("not a kneebench checkpoint (bad magic)")
    (version,) = struct.unpack("<H", blob[4:6])
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version} is not supported "
                           f"(this build reads version {FORMAT_VERSION})")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise ChecksumError("checkpoint CRC-32 mismatch")
    buf = io.BytesIO(blob[6:-4])
    try:
        cfg = _unpack_config(buf)
    except ConfigError as exc:
        raise FormatError(f"invalid config block: {exc}") from exc
    model = build(cfg, seed=0)
    (n,) = _read(buf, "<I")
    seen = {}
    for _ in range(n):
        (nlen,) = _read(buf, "<H")
        name = buf.read(nlen).decode("utf-8")
        (rank,) = _read(buf, "<B")
        dims = _read(buf, f"<{rank}I")
        count = int(np.prod(dims)) if rank else 1
        raw = buf.read(8 * count)
        if len(raw) != 8 * count:
            raise FormatError("checkpoint truncated")
        seen[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
    expected = dict(_records(model))
    if set(seen) != set(expected):
        raise FormatError("checkpoint records do not match the configured architecture")
    for name, arr in seen.items():
        if arr.shape != expected[name].shape:
            raise FormatError(f"record {name}: shape {arr.shape}, expected {expected[name].shape}")
    for name, t in model.params.items():
        t.data = seen[name]
    for name, s in model.bn.items():
        s.running_mean = seen[f"{name}.running_mean"]
        s.running_var = seen[f"{name}.running_var"]
    return model


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(dumps_checkpoint(model))


def load_checkpoint(path) -> Model:
    return loads_checkpoint(Path(path).read_bytes())


def config_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["encoder_channels"] = list(d["encoder_channels"])
    d["tail_channels"] = list(d["tail_channels"])
    return d
