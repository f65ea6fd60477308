"""The five-module network topology plus two domain discriminators.

Two domain encoders (hazy / clear, identical architecture, independent
weights), two image decoders with a first-block skip concatenation, a ReID
decoder (conv stack -> GAP -> BN embedding head -> FC classifier), and two
small discriminators. Built entirely on :mod:`rvsl.autograd`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag

CHECKPOINT_MAGIC = b"RVSL"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    image_size: int = 64
    base_channels: int = 16
    encoder_blocks: int = 2
    embedding_dim: int = 64
    num_classes: int | None = None
    discriminator_channels: int = 16

    def __post_init__(self):
        if not 1 <= self.encoder_blocks <= 4:
            raise ValueError(f"encoder_blocks must be in 1..4, got {self.encoder_blocks}")
        if self.embedding_dim < 8:
            raise ValueError(f"embedding_dim must be >= 8, got {self.embedding_dim}")
        down = 2 ** self.encoder_blocks
        if self.image_size % (down * 2) != 0:
            raise ValueError(f"image_size {self.image_size} not divisible by "
                             f"2^(encoder_blocks+1) = {down * 2}")


def _kaiming(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv:
    def __init__(self, rng, cin, cout, k, stride=1, padding=0):
        self.stride, self.padding = stride, padding
        self.weight = ag.parameter(_kaiming(rng, (cout, cin, k, k), cin * k * k))
        self.bias = ag.parameter(np.zeros(cout))

    def __call__(self, x):
        return ag.conv2d(x, self.weight, self.bias,
                         stride=self.stride, padding=self.padding)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def buffers(self):
        return {}


class ConvTranspose:
    def __init__(self, rng, cin, cout, k, stride=1, padding=0):
        self.stride, self.padding = stride, padding
        self.weight = ag.parameter(_kaiming(rng, (cin, cout, k, k), cin * k * k))
        self.bias = ag.parameter(np.zeros(cout))

    def __call__(self, x):
        return ag.conv2d_transpose(x, self.weight, self.bias,
                                   stride=self.stride, padding=self.padding)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def buffers(self):
        return {}


class BatchNorm:
    def __init__(self, channels, eps=1e-5, momentum=0.9):
        self.eps, self.momentum = eps, momentum
        self.gamma = ag.parameter(np.ones(channels))
        self.beta = ag.parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def __call__(self, x, training=True):
        return ag.batch_norm(x, self.gamma, self.beta,
                             self.running_mean, self.running_var,
                             eps=self.eps, momentum=self.momentum,
                             training=training)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class Dense:
    def __init__(self, rng, din, dout, scale=1.0):
        self.weight = ag.parameter(scale * _kaiming(rng, (din, dout), din))
        self.bias = ag.parameter(np.zeros(dout))

    def __call__(self, x):
        return ag.dense(x, self.weight, self.bias)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def buffers(self):
        return {}


class Module:
    """Flat registry of named layers; supplies named parameter/buffer walks."""

    def __init__(self):
        self._layers = {}

    def _register(self, name, layer):
        self._layers[name] = layer
        return layer

    def named_parameters(self):
        out = {}
        for lname, layer in self._layers.items():
            for pname, p in layer.params().items():
                out[f"{lname}.{pname}"] = p
        return out

    def named_buffers(self):
        out = {}
        for lname, layer in self._layers.items():
            for bname, b in layer.buffers().items():
                out[f"{lname}.{bname}"] = b
        return out

    def parameters(self):
        return list(self.named_parameters().values())


@dataclass
class EncodeOutput:
    """deep: features after the final encoder block; skip: after the first."""
    deep: ag.Tensor
    skip: ag.Tensor


class Encoder(Module):
    """Stacked blocks of (conv s2, BN, relu, conv s1, BN, relu)."""

    def __init__(self, rng, cfg):
        super().__init__()
        self.cfg = cfg
        cin = 3
        for i in range(1, cfg.encoder_blocks + 1):
            cout = cfg.base_channels * 2 ** (i - 1)
            self._register(f"block{i}.conv1", Conv(rng, cin, cout, 3, stride=2, padding=1))
            self._register(f"block{i}.bn1", BatchNorm(cout))
            self._register(f"block{i}.conv2", Conv(rng, cout, cout, 3, stride=1, padding=1))
            self._register(f"block{i}.bn2", BatchNorm(cout))
            cin = cout
        self.out_channels = cin

    def __call__(self, x, training=True):
        if x.data.ndim != 4 or x.data.shape[2] != self.cfg.image_size:
            raise ag.ShapeError(f"encoder expects (N,3,{self.cfg.image_size},"
                                f"{self.cfg.image_size}), got {x.data.shape}")
        skip = None
        h = x
        for i in range(1, self.cfg.encoder_blocks + 1):
            h = ag.relu(self._layers[f"block{i}.bn1"](
                self._layers[f"block{i}.conv1"](h), training))
            h = ag.relu(self._layers[f"block{i}.bn2"](
                self._layers[f"block{i}.conv2"](h), training))
            if i == 1:
                skip = h
        return EncodeOutput(deep=h, skip=skip)


class ImageDecoder(Module):
    """Upsample deep features, concat the first-block skip, emit a sigmoid image."""

    def __init__(self, rng, cfg):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels * 2 ** (cfg.encoder_blocks - 1)
        # pre-skip upsampling: (encoder_blocks - 1) double-conv + deconv stages
        for i in range(cfg.encoder_blocks - 1):
            cn = c // 2
            self._register(f"up{i}.conv1", Conv(rng, c, c, 3, padding=1))
            self._register(f"up{i}.bn1", BatchNorm(c))
            self._register(f"up{i}.conv2", Conv(rng, c, c, 3, padding=1))
            self._register(f"up{i}.bn2", BatchNorm(c))
            self._register(f"up{i}.deconv", ConvTranspose(rng, c, cn, 2, stride=2))
            c = cn
        cat = c + cfg.base_channels
        self._register("out.conv1", Conv(rng, cat, cat, 3, padding=1))
        self._register("out.bn1", BatchNorm(cat))
        self._register("out.conv2", Conv(rng, cat, cfg.base_channels, 3, padding=1))
        self._register("out.bn2", BatchNorm(cfg.base_channels))
        self._register("out.deconv", ConvTranspose(rng, cfg.base_channels, 3, 2, stride=2))

    def __call__(self, feat, training=True):
        h = feat.deep
        for i in range(self.cfg.encoder_blocks - 1):
            h = ag.relu(self._layers[f"up{i}.bn1"](self._layers[f"up{i}.conv1"](h), training))
            h = ag.relu(self._layers[f"up{i}.bn2"](self._layers[f"up{i}.conv2"](h), training))
            h = self._layers[f"up{i}.deconv"](h)
        h = ag.concat_channels([h, feat.skip])
        h = ag.relu(self._layers["out.bn1"](self._layers["out.conv1"](h), training))
        h = ag.relu(self._layers["out.bn2"](self._layers["out.conv2"](h), training))
        return ag.sigmoid(self._layers["out.deconv"](h))


class ReidDecoder(Module):
    """Conv stack -> GAP -> BN embedding head -> FC classifier."""

    def __init__(self, rng, cfg):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels * 2 ** (cfg.encoder_blocks - 1)
        self._register("conv1", Conv(rng, c, 2 * c, 3, stride=2, padding=1))
        self._register("bn1", BatchNorm(2 * c))
        self._register("conv2", Conv(rng, 2 * c, cfg.embedding_dim, 3, padding=1))
        self._register("bn2", BatchNorm(cfg.embedding_dim))
        self._register("head_bn", BatchNorm(cfg.embedding_dim))
        if cfg.num_classes is not None:
            self._register("fc", Dense(rng, cfg.embedding_dim, cfg.num_classes))

    def __call__(self, feat, training=True, with_logits=False):
        h = ag.relu(self._layers["bn1"](self._layers["conv1"](feat.deep), training))
        h = ag.relu(self._layers["bn2"](self._layers["conv2"](h), training))
        emb = self._layers["head_bn"](ag.global_avg_pool(h), training)
        if not with_logits:
            return emb, None
        if "fc" not in self._layers:
            raise ValueError("classifier requested but num_classes was not configured")
        return emb, self._layers["fc"](emb)


class Discriminator(Module):
    """Stride-2 conv stack -> GAP -> dense -> sigmoid real-probability."""

    def __init__(self, rng, cfg):
        super().__init__()
        d = cfg.discriminator_channels
        self._register("conv1", Conv(rng, 3, d, 3, stride=2, padding=1))
        self._register("conv2", Conv(rng, d, 2 * d, 3, stride=2, padding=1))
        self._register("conv3", Conv(rng, 2 * d, 4 * d, 3, stride=2, padding=1))
        # small head init keeps the untrained probability near 0.5
        self._register("fc", Dense(rng, 4 * d, 1, scale=0.1))

    def __call__(self, x):
        h = ag.relu(self._layers["conv1"](x))
        h = ag.relu(self._layers["conv2"](h))
        h = ag.relu(self._layers["conv3"](h))
        return ag.sigmoid(self._layers["fc"](ag.global_avg_pool(h)))


BLOCK_NAMES = ("E_H", "E_C", "D_H", "D_C", "D_ReID", "Disc_H", "Disc_C")


@dataclass
class ModuleSet:
    cfg: NetConfig
    e_h: Encoder
    e_c: Encoder
    d_h: ImageDecoder
    d_c: ImageDecoder
    d_reid: ReidDecoder
    disc_h: Discriminator
    disc_c: Discriminator

    def blocks(self):
        return {"E_H": self.e_h, "E_C": self.e_c, "D_H": self.d_h,
                "D_C": self.d_c, "D_ReID": self.d_reid,
                "Disc_H": self.disc_h, "Disc_C": self.disc_c}

    def named_parameters(self):
        out = {}
        for bname, block in self.blocks().items():
            for pname, p in block.named_parameters().items():
                out[f"{bname}.{pname}"] = p
        return out

    def named_buffers(self):
        out = {}
        for bname, block in self.blocks().items():
            for bufname, b in block.named_buffers().items():
                out[f"{bname}.{bufname}"] = b
        return out

    def generator_parameters(self):
        names = ("E_H", "E_C", "D_H", "D_C", "D_ReID")
        return [p for n in names for p in self.blocks()[n].parameters()]


def build_models(cfg, seed):
    """Instantiate all blocks with Kaiming-normal init, deterministic per seed."""
    rng = np.random.default_rng(seed)
    return ModuleSet(
        cfg=cfg,
        e_h=Encoder(rng, cfg),
        e_c=Encoder(rng, cfg),
        d_h=ImageDecoder(rng, cfg),
        d_c=ImageDecoder(rng, cfg),
        d_reid=ReidDecoder(rng, cfg),
        disc_h=Discriminator(rng, cfg),
        disc_c=Discriminator(rng, cfg),
    )


# -- checkpoint format --------------------------------------------------------
# magic "RVSL", u32 version, u32 entry count; per entry: u16 name length,
# utf-8 name, u8 rank, rank x u32 dims, row-major float64; little-endian.

def save_checkpoint(models, path):
    entries = []
    for name, p in models.named_parameters().items():
        entries.append((name, p.data))
    for name, b in models.named_buffers().items():
        entries.append((name, b))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(entries)))
        for name, arr in entries:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(models, path, strict=True):
    """Restore parameters and buffers; ``strict=False`` skips entries the
    model does not have (e.g. the classifier head at inference time)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    params = models.named_parameters()
    buffers = models.named_buffers()
    off = 12
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(dims)
        off += 8 * n
        if name in params:
            if params[name].data.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: "
                                 f"{params[name].data.shape} vs {arr.shape}")
            params[name].data = arr.astype(np.float64).copy()
        elif name in buffers:
            buffers[name][...] = arr
        elif strict:
            raise ValueError(f"unknown checkpoint entry {name}")
    return models
