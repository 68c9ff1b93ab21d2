"""Encoder G, regression decoder D and domain critic C."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, ShapeError
from .nn import BatchNorm2d, Conv2d, Dropout, Linear, Module
from .tensor import Tensor

PATCH_PX = 80
ROAD_MODES = ("off", "scalar_concat", "fourth_channel")


@dataclass(frozen=True)
class Layout:
    stem_width: int
    stem_kernel: int
    stem_stride: int
    stem_padding: int
    pool_kernel: int
    pool_stride: int
    pool_padding: int
    widths: tuple
    blocks: tuple
    strides: tuple


LAYOUTS = {
    # 80 -> 20 (stride-4 stem) -> 10 (pool) -> 10 -> 5 -> 5 -> 5
    "tiny": Layout(16, 4, 4, 0, 2, 2, 0, (16, 32, 32, 64), (2, 2, 2, 2), (1, 2, 1, 1)),
    # standard 34-layer body: 80 -> 40 -> 20 -> 20 -> 10 -> 5 -> 3
    "resnet34": Layout(64, 7, 2, 3, 3, 2, 1, (64, 128, 256, 512), (3, 4, 6, 3), (1, 2, 2, 2)),
}


@dataclass
class ModelConfig:
    encoder_depth: str = "tiny"
    embedding_dim: int = 128
    dropout_p: float = 0.5
    weight_decay: float = 1e-4
    road_feature_mode: str = "scalar_concat"
    road_d_max_m: float = 2000.0
    head_hidden: int = 64

    def validate(self):
        if self.encoder_depth not in LAYOUTS:
            raise ConfigError(f"encoder_depth must be one of {sorted(LAYOUTS)}, got {self.encoder_depth!r}")
        if self.embedding_dim < 1 or self.head_hidden < 1:
            raise ConfigError("embedding_dim and head_hidden must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.road_feature_mode not in ROAD_MODES:
            raise ConfigError(f"road_feature_mode must be one of {ROAD_MODES}, got {self.road_feature_mode!r}")
        if not self.road_d_max_m > 0:
            raise ConfigError("road_d_max_m must be positive")
        return self

    @property
    def in_channels(self):
        return 4 if self.road_feature_mode == "fourth_channel" else 3

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names}).validate()


def road_norm(dist_m, d_max_m):
    """log(1+d)/log(1+d_max), the road feature fed to the network."""
    return np.log1p(np.asarray(dist_m, dtype=np.float64)) / math.log1p(d_max_m)


class BasicBlock(Module):
    def __init__(self, in_ch, out_ch, stride, rng):
        super().__init__()
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng, stride=stride, padding=1)
        self.bn1 = BatchNorm2d(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, padding=1)
        self.bn2 = BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.down_conv = Conv2d(in_ch, out_ch, 1, rng, stride=stride)
            self.down_bn = BatchNorm2d(out_ch)
        else:
            self.down_conv = None

    def forward(self, x, name, capture):
        a = self.conv1(x)
        _capture(capture, f"{name}.conv1", a)
        h = T.relu(self.bn1(a))
        b = self.conv2(h)
        _capture(capture, f"{name}.conv2", b)
        h = self.bn2(b)
        if self.down_conv is not None:
            s = self.down_conv(x)
            _capture(capture, f"{name}.down_conv", s)
            x = self.down_bn(s)
        out = T.relu(h + x)
        _capture(capture, name, out)
        return out

    def layer_names(self, name):
        names = [f"{name}.conv1", f"{name}.conv2"]
        if self.down_conv is not None:
            names.append(f"{name}.down_conv")
        return names + [name]


def _capture(capture, name, t):
    if capture is not None and name in capture:
        capture[name] = t.retain_grad()


class Encoder(Module):
    """Residual CNN: [B, C, 80, 80] -> [B, E] embedding."""

    def __init__(self, layout, in_channels, embedding_dim, dropout_p, rng):
        super().__init__()
        self.layout = layout
        self.in_channels = in_channels
        self.stem = Conv2d(in_channels, layout.stem_width, layout.stem_kernel, rng,
                           stride=layout.stem_stride, padding=layout.stem_padding)
        self.stem_bn = BatchNorm2d(layout.stem_width)
        blocks = []
        ch = layout.stem_width
        for width, count, stride in zip(layout.widths, layout.blocks, layout.strides):
            for i in range(count):
                blocks.append(BasicBlock(ch, width, stride if i == 0 else 1, rng))
                ch = width
        self.blocks = blocks
        self._block_names = []
        for s, count in enumerate(layout.blocks):
            self._block_names += [f"stage{s + 1}.{i}" for i in range(count)]
        self.fc = Linear(ch, embedding_dim, rng)
        self.dropout = Dropout(dropout_p)

    def layer_names(self):
        names = ["stem"]
        for block, name in zip(self.blocks, self._block_names):
            names += block.layer_names(name)
        return names

    def conv_layer_names(self):
        return [n for n in self.layer_names() if n == "stem" or n.rsplit(".", 1)[-1] in ("conv1", "conv2", "down_conv")]

    def last_conv_layer(self):
        return self.conv_layer_names()[-1]

    def forward(self, x, capture=None):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"encoder expects [B, {self.in_channels}, H, W], got {list(x.shape)}")
        if capture is not None:
            unknown = [n for n in capture if n not in self.layer_names()]
            if unknown:
                raise ConfigError(f"unknown layer(s) {unknown}; valid layers: {self.layer_names()}")
        a = self.stem(x)
        _capture(capture, "stem", a)
        h = T.relu(self.stem_bn(a))
        lay = self.layout
        h = T.maxpool2d(h, lay.pool_kernel, lay.pool_stride, lay.pool_padding)
        for block, name in zip(self.blocks, self._block_names):
            h = block(h, name, capture)
        h = T.mean(h, axis=(2, 3))
        emb = T.relu(self.fc(h))
        return self.dropout(emb)


class Decoder(Module):
    """Fully connected head: embedding (+ road scalar) -> NO2 in ug/m3.

    The last layer predicts a standardized value; ``out_shift``/``out_scale``
    map it back to concentration units and are set from the source labels.
    The road scalar is standardized the same way with ``road_shift``/``road_scale``."""

    def __init__(self, embedding_dim, hidden, use_road, rng, zero_init=False):
        super().__init__()
        self.use_road = use_road
        self.fc1 = Linear(embedding_dim + (1 if use_road else 0), hidden, rng, zero_init=zero_init)
        self.fc2 = Linear(hidden, 1, rng, zero_init=zero_init)
        self.register_buffer("out_shift", np.zeros(1, np.float32))
        self.register_buffer("out_scale", np.ones(1, np.float32))
        if use_road:
            self.register_buffer("road_shift", np.zeros(1, np.float32))
            self.register_buffer("road_scale", np.ones(1, np.float32))

    def forward(self, emb, road=None):
        z = self.standardized(emb, road)
        return z * self.out_scale.astype(z.dtype) + self.out_shift.astype(z.dtype)

    def standardized(self, emb, road=None):
        """Output before mapping back to ug/m3 (the value the training loss sees)."""
        if self.use_road:
            if road is None:
                raise DataError("road feature required in scalar_concat mode")
            road = np.asarray(road.data if isinstance(road, Tensor) else road, dtype=emb.dtype).reshape(-1, 1)
            if road.shape[0] != emb.shape[0]:
                raise ShapeError(f"road feature {list(road.shape)} vs embedding {list(emb.shape)}")
            road = (road - self.road_shift.astype(emb.dtype)) / self.road_scale.astype(emb.dtype)
            emb = T.concat([emb, Tensor(road)], axis=1)
        h = T.relu(self.fc1(emb))
        return self.fc2(h).reshape(-1)


class Critic(Module):
    """Two-layer MLP domain classifier; returns one logit per embedding."""

    def __init__(self, embedding_dim, hidden, rng):
        super().__init__()
        self.fc1 = Linear(embedding_dim, hidden, rng)
        self.fc2 = Linear(hidden, 1, rng)

    def forward(self, emb):
        return self.fc2(T.relu(self.fc1(emb))).reshape(-1)


class ModelBundle(Module):
    """G, D and (optionally) C with their configuration.

    A bundle without a critic is the no-adaptation baseline; G and D are
    initialized from their own seed streams, so with and without a critic
    they start from identical weights."""

    def __init__(self, config, encoder, decoder, critic=None):
        super().__init__()
        self.config = config
        self.encoder = encoder
        self.decoder = decoder
        self.critic = critic

    @classmethod
    def create(cls, config, seed=0, with_critic=True, layout=None):
        config.validate()
        streams = np.random.SeedSequence(seed).spawn(4)
        rng_g, rng_d, rng_c = (np.random.default_rng(s) for s in streams[:3])
        encoder = Encoder(layout or LAYOUTS[config.encoder_depth], config.in_channels,
                          config.embedding_dim, config.dropout_p, rng_g)
        encoder.dropout.rng = np.random.default_rng(streams[3])
        decoder = Decoder(config.embedding_dim, config.head_hidden,
                          config.road_feature_mode == "scalar_concat", rng_d)
        critic = Critic(config.embedding_dim, config.head_hidden, rng_c) if with_critic else None
        return cls(config, encoder, decoder, critic)

    def encoder_parameter_names(self):
        return [name for name, _ in self.named_parameters() if name.startswith("encoder.")]

    def prepare_input(self, patches, road_dist_m=None):
        """Float patches [B, 3, 80, 80] plus road distances -> encoder input."""
        x = np.asarray(patches.data if isinstance(patches, Tensor) else patches)
        if self.config.road_feature_mode == "fourth_channel":
            if road_dist_m is None:
                raise DataError("road distance required in fourth_channel mode")
            r = road_norm(road_dist_m, self.config.road_d_max_m).astype(x.dtype).reshape(-1, 1, 1, 1)
            x = np.concatenate([x, np.broadcast_to(r, (x.shape[0], 1) + x.shape[2:])], axis=1)
        return Tensor(x)

    def road_input(self, road_dist_m):
        if self.config.road_feature_mode != "scalar_concat":
            return None
        if road_dist_m is None:
            raise DataError("road distance required in scalar_concat mode")
        d = np.asarray(road_dist_m, dtype=np.float64)
        if np.isnan(d).any():
            raise DataError("road distance missing for some samples in scalar_concat mode")
        return road_norm(d, self.config.road_d_max_m)

    def encode(self, x, capture=None):
        return self.encoder(x, capture=capture)

    def predict_no2(self, emb, road=None):
        return self.decoder(emb, road)

    def critic_logit(self, emb, lam):
        if self.critic is None:
            raise ConfigError("baseline bundle has no domain critic")
        return self.critic(T.grad_reverse(emb, lam))

    def predict(self, patches, road_dist_m=None, batch_size=256):
        """Eval-mode NO2 predictions (ug/m3) for float patches [N, 3, 80, 80]."""
        was_training = self.training
        self.eval()
        out = []
        try:
            with T.no_grad():
                for i in range(0, len(patches), batch_size):
                    sl = slice(i, i + batch_size)
                    rd = None if road_dist_m is None else np.asarray(road_dist_m)[sl]
                    x = self.prepare_input(patches[sl], rd)
                    pred = self.predict_no2(self.encode(x), self.road_input(rd))
                    out.append(pred.data.astype(np.float64))
        finally:
            self.train(was_training)
        return np.concatenate(out) if out else np.zeros(0)
