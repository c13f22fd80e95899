"""Shared-encoder network for wafer map classification and segmentation.

One five-block encoder feeds three heads:

* a segmentation decoder (four stride-2 transpose-conv blocks with skip
  concatenations from the pre-pool encoder activations, then a 1x1 conv
  + sigmoid mask),
* a classifier (global average pool -> dense -> ReLU -> dense -> softmax),
* a projection head (global average pool -> dense -> L2 normalize) used
  by the contrastive pretraining stage.

Encoder blocks are conv3x3 -> BN -> ReLU -> dropout -> separable conv
-> BN -> ReLU, with a 2x2 max pool after the first four blocks. With the
default filter plan (8,16,16,32,64 / 32,16,16,8) and a 224 input the
encoder bottoms out at 14x14x64 and the whole net carries ~84k weights.
"""

from dataclasses import dataclass, asdict
from typing import NamedTuple

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .tensor import Tensor, active_tape


@dataclass(frozen=True)
class WscnConfig:
    input_size: int = 224
    num_classes: int = 38
    encoder_filters: tuple = (8, 16, 16, 32, 64)
    decoder_filters: tuple = (32, 16, 16, 8)
    dense_units: int = 64
    embedding_dim: int = 128
    dropout_rate: float = 0.2
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.input_size < 16 or self.input_size % 16:
            raise ConfigError(
                f"input_size must be a positive multiple of 16, got {self.input_size}"
            )
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        object.__setattr__(self, "encoder_filters", tuple(self.encoder_filters))
        object.__setattr__(self, "decoder_filters", tuple(self.decoder_filters))
        if len(self.encoder_filters) != 5 or min(self.encoder_filters) < 1:
            raise ConfigError(f"encoder_filters must be 5 positive ints, got {self.encoder_filters}")
        if len(self.decoder_filters) != 4 or min(self.decoder_filters) < 1:
            raise ConfigError(f"decoder_filters must be 4 positive ints, got {self.decoder_filters}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if not 0.0 < self.bn_momentum < 1.0:
            raise ConfigError(f"bn_momentum must be in (0, 1), got {self.bn_momentum}")
        if self.dense_units < 1 or self.embedding_dim < 1:
            raise ConfigError("dense_units and embedding_dim must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    def to_dict(self):
        d = asdict(self)
        d["encoder_filters"] = list(self.encoder_filters)
        d["decoder_filters"] = list(self.decoder_filters)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d,
                      "encoder_filters": tuple(d["encoder_filters"]),
                      "decoder_filters": tuple(d["decoder_filters"])})


class ForwardOutput(NamedTuple):
    class_probs: Tensor  # (N, num_classes), rows sum to 1
    mask: Tensor         # (N, 1, S, S) in (0, 1)
    embedding: Tensor    # (N, embedding_dim), unit rows


class WscnModel:
    """Parameter container plus the forward wiring below."""

    def __init__(self, config):
        self.config = config
        self.params = {}
        self.buffers = {}
        self.encoder_frozen = False
        ss = np.random.SeedSequence(config.seed)
        init_ss, drop_ss = ss.spawn(2)
        self._init_rng = np.random.default_rng(init_ss)
        self.dropout_rng = np.random.default_rng(drop_ss)

    @property
    def np_dtype(self):
        return np.float32 if self.config.dtype == "float32" else np.float64

    def param(self, name):
        return self.params[name]

    def is_trainable(self, name):
        if not self.encoder_frozen:
            return True
        return not (name.startswith("enc") or name.startswith("proj"))

    def trainable_params(self):
        return {n: p for n, p in self.params.items() if self.is_trainable(n)}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self):
        """All weights and buffers as one ordered name -> ndarray mapping."""
        out = {n: p.data for n, p in self.params.items()}
        out.update(self.buffers)
        return out

    def load_state_arrays(self, arrays):
        expected = set(self.params) | set(self.buffers)
        got = set(arrays)
        if expected != got:
            missing = sorted(expected - got)[:3]
            extra = sorted(got - expected)[:3]
            raise ShapeError(f"state mismatch: missing {missing}, unexpected {extra}")
        for n, p in self.params.items():
            arr = np.asarray(arrays[n], dtype=self.np_dtype)
            if arr.shape != p.data.shape:
                raise ShapeError(f"{n}: shape {arr.shape} != expected {p.data.shape}")
            p.data = arr
        for n in self.buffers:
            arr = np.asarray(arrays[n], dtype=self.np_dtype)
            if arr.shape != self.buffers[n].shape:
                raise ShapeError(f"{n}: shape {arr.shape} != expected {self.buffers[n].shape}")
            self.buffers[n] = arr

    def snapshot(self):
        return {n: a.copy() for n, a in self.state_arrays().items()}

    # --- construction -----------------------------------------------------

    def _he_uniform(self, shape, fan_in):
        limit = np.sqrt(6.0 / fan_in)
        return self._init_rng.uniform(-limit, limit, shape).astype(self.np_dtype)

    def _glorot_uniform(self, shape):
        limit = np.sqrt(6.0 / (shape[0] + shape[1]))
        return self._init_rng.uniform(-limit, limit, shape).astype(self.np_dtype)

    def _add_param(self, name, data):
        self.params[name] = Tensor(data, requires_grad=True, name=name)

    def _add_bn(self, prefix, channels):
        dt = self.np_dtype
        self._add_param(f"{prefix}.gamma", np.ones(channels, dtype=dt))
        self._add_param(f"{prefix}.beta", np.zeros(channels, dtype=dt))
        self.buffers[f"{prefix}.mean"] = np.zeros(channels, dtype=dt)
        self.buffers[f"{prefix}.var"] = np.ones(channels, dtype=dt)


def build_model(config=None):
    cfg = config or WscnConfig()
    m = WscnModel(cfg)
    dt = m.np_dtype
    enc = cfg.encoder_filters
    dec = cfg.decoder_filters

    c_in = 1
    for i, f in enumerate(enc, start=1):
        m._add_param(f"enc{i}.conv.w", m._he_uniform((f, c_in, 3, 3), c_in * 9))
        m._add_param(f"enc{i}.conv.b", np.zeros(f, dtype=dt))
        m._add_bn(f"enc{i}.bn1", f)
        m._add_param(f"enc{i}.sep.dw", m._he_uniform((f, 1, 3, 3), 9))
        m._add_param(f"enc{i}.sep.pw", m._he_uniform((f, f, 1, 1), f))
        m._add_param(f"enc{i}.sep.pb", np.zeros(f, dtype=dt))
        m._add_bn(f"enc{i}.bn2", f)
        c_in = f

    skips = (enc[3], enc[2], enc[1], enc[0])
    c_in = enc[4]
    for j, f in enumerate(dec, start=1):
        m._add_param(f"dec{j}.tconv.w", m._he_uniform((c_in, f, 3, 3), c_in * 9))
        m._add_bn(f"dec{j}.bn", f)
        c_in = f + skips[j - 1]

    m._add_param("seg.conv.w", m._he_uniform((1, c_in, 1, 1), c_in))
    m._add_param("seg.conv.b", np.zeros(1, dtype=dt))

    m._add_param("cls.fc1.w", m._glorot_uniform((enc[4], cfg.dense_units)))
    m._add_param("cls.fc1.b", np.zeros(cfg.dense_units, dtype=dt))
    m._add_param("cls.fc2.w", m._glorot_uniform((cfg.dense_units, cfg.num_classes)))
    m._add_param("cls.fc2.b", np.zeros(cfg.num_classes, dtype=dt))
    m._add_param("proj.fc.w", m._glorot_uniform((enc[4], cfg.embedding_dim)))
    m._add_param("proj.fc.b", np.zeros(cfg.embedding_dim, dtype=dt))
    return m


def freeze_encoder(model):
    """Mark encoder and projection weights non-trainable; the frozen
    encoder also runs in eval mode inside :func:`forward`."""
    model.encoder_frozen = True


def unfreeze_encoder(model):
    model.encoder_frozen = False


def _apply_hook(hook, name, t):
    if hook is None:
        return t
    if active_tape() is not None:
        raise ConfigError("site hooks are only valid on untaped forward passes")
    new = np.asarray(hook(name, t.data), dtype=t.dtype)
    if new is t.data:
        return t
    return Tensor(new)


def _check_input(model, x):
    # plain arrays are welcome at the public entry points; everything
    # past here assumes Tensor semantics (ndarray.data is a memoryview)
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=model.np_dtype))
    s = model.config.input_size
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != s or x.shape[3] != s:
        raise ShapeError(
            f"expected input (N,1,{s},{s}), got {tuple(x.shape)}"
        )
    return x


def encoder_forward(model, x, *, training=False, hook=None):
    """Run the encoder; returns (bottleneck, [pre-pool skip activations])."""
    x = _check_input(model, x)
    cfg = model.config
    if model.encoder_frozen:
        training = False
    P = model.params
    B = model.buffers
    h = _apply_hook(hook, "input", x)
    skips = []
    for i in range(1, 6):
        p = f"enc{i}"
        h = ops.conv2d(h, P[f"{p}.conv.w"], P[f"{p}.conv.b"])
        h = _apply_hook(hook, f"{p}.conv", h)
        h = ops.batch_norm(h, P[f"{p}.bn1.gamma"], P[f"{p}.bn1.beta"],
                           B[f"{p}.bn1.mean"], B[f"{p}.bn1.var"],
                           training=training, momentum=cfg.bn_momentum,
                           eps=cfg.bn_eps)
        h = ops.relu(h)
        h = _apply_hook(hook, f"{p}.relu1", h)
        h = ops.dropout(h, cfg.dropout_rate, training=training,
                        rng=model.dropout_rng)
        h = ops.separable_conv2d(h, P[f"{p}.sep.dw"], P[f"{p}.sep.pw"],
                                 P[f"{p}.sep.pb"])
        h = _apply_hook(hook, f"{p}.sep", h)
        h = ops.batch_norm(h, P[f"{p}.bn2.gamma"], P[f"{p}.bn2.beta"],
                           B[f"{p}.bn2.mean"], B[f"{p}.bn2.var"],
                           training=training, momentum=cfg.bn_momentum,
                           eps=cfg.bn_eps)
        h = ops.relu(h)
        h = _apply_hook(hook, f"{p}.relu2", h)
        if i < 5:
            skips.append(h)
            h = ops.max_pool2(h)
            h = _apply_hook(hook, f"{p}.pool", h)
    return h, skips


def head_forward(model, bottleneck, skips, *, training=False, hook=None):
    """Decoder + classifier + projection on precomputed encoder outputs."""
    cfg = model.config
    P = model.params
    B = model.buffers
    h = bottleneck
    for j in range(1, 5):
        p = f"dec{j}"
        h = ops.transpose_conv2d(h, P[f"{p}.tconv.w"], stride=2)
        h = _apply_hook(hook, f"{p}.tconv", h)
        h = ops.batch_norm(h, P[f"{p}.bn.gamma"], P[f"{p}.bn.beta"],
                           B[f"{p}.bn.mean"], B[f"{p}.bn.var"],
                           training=training, momentum=cfg.bn_momentum,
                           eps=cfg.bn_eps)
        h = ops.relu(h)
        h = _apply_hook(hook, f"{p}.relu", h)
        h = ops.concat_channels(h, skips[4 - j])
        h = _apply_hook(hook, f"{p}.concat", h)
    logit = ops.conv2d(h, P["seg.conv.w"], P["seg.conv.b"], padding=0)
    logit = _apply_hook(hook, "seg.conv", logit)
    mask = ops.sigmoid(logit)
    mask = _apply_hook(hook, "seg.mask", mask)

    g = ops.global_avg_pool(bottleneck)
    g = _apply_hook(hook, "gap", g)
    c = ops.dense(g, P["cls.fc1.w"], P["cls.fc1.b"])
    c = _apply_hook(hook, "cls.fc1", c)
    c = ops.relu(c)
    c = _apply_hook(hook, "cls.relu", c)
    c = ops.dense(c, P["cls.fc2.w"], P["cls.fc2.b"])
    c = _apply_hook(hook, "cls.fc2", c)
    probs = ops.softmax(c)
    probs = _apply_hook(hook, "cls.probs", probs)

    e = ops.dense(g, P["proj.fc.w"], P["proj.fc.b"])
    e = _apply_hook(hook, "proj.fc", e)
    emb = ops.l2_normalize(e)
    emb = _apply_hook(hook, "proj.embed", emb)
    return ForwardOutput(probs, mask, emb)


def forward(model, x, *, training=False, hook=None):
    bottleneck, skips = encoder_forward(model, x, training=training, hook=hook)
    return head_forward(model, bottleneck, skips, training=training, hook=hook)


def encode(model, x, *, training=False):
    """Encoder + projection only: (N,1,S,S) -> unit embeddings (N,D)."""
    bottleneck, _ = encoder_forward(model, x, training=training)
    g = ops.global_avg_pool(bottleneck)
    e = ops.dense(g, model.params["proj.fc.w"], model.params["proj.fc.b"])
    return ops.l2_normalize(e)


def count_params(model):
    """Total weight count across all trainable parameter tensors."""
    return sum(p.size for p in model.params.values())


def count_flops(model):
    """Multiply count (MACs) of one single-image forward pass.

    Counts convolution, transpose-convolution, and dense multiplies;
    bias adds, batch norm, pooling, and activations are excluded. For
    the default 224 config this is ~1.03e8.
    """
    cfg = model.config
    enc = cfg.encoder_filters
    dec = cfg.decoder_filters
    s = cfg.input_size
    total = 0
    c_in = 1
    for i, f in enumerate(enc):
        total += s * s * f * c_in * 9      # 3x3 conv
        total += s * s * f * 9             # depthwise
        total += s * s * f * f             # pointwise
        if i < 4:
            s //= 2
        c_in = f
    skips = (enc[3], enc[2], enc[1], enc[0])
    c_in = enc[4]
    for j, f in enumerate(dec):
        total += s * s * c_in * f * 9      # transpose conv, input-side count
        s *= 2
        c_in = f + skips[j]
    total += s * s * c_in                  # 1x1 mask conv
    total += enc[4] * cfg.dense_units
    total += cfg.dense_units * cfg.num_classes
    total += enc[4] * cfg.embedding_dim
    return total


def save_model(path, model, extra_meta=None):
    """Persist full float weights + config; returns file size in bytes."""
    from .checkpoint import save_checkpoint

    meta = {"kind": "wscn-fp32", "config": model.config.to_dict()}
    if extra_meta:
        meta.update(extra_meta)
    return save_checkpoint(path, model.state_arrays(), meta=meta)


def load_model(path):
    """Rebuild a model from a file written by :func:`save_model`."""
    from .checkpoint import load_checkpoint
    from .errors import CheckpointError

    arrays, meta, _ = load_checkpoint(path)
    if meta.get("kind") != "wscn-fp32":
        raise CheckpointError(f"not a float model file: kind={meta.get('kind')!r}")
    model = build_model(WscnConfig.from_dict(meta["config"]))
    model.load_state_arrays(arrays)
    return model
