"""Toy-scale ViT, CNN, CNN-ViT hybrid and simplified T2T-ViT classifiers."""

from __future__ import annotations

import dataclasses
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

FAMILIES = ("vit", "cnn", "hybrid", "t2t_vit")
CKPT_MAGIC = b"ADVLENS-CKPT-1\n"


class ConfigError(ValueError):
    """Invalid model, attack, or experiment configuration."""


@dataclass
class ModelConfig:
    family: str = "vit"
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    mlp_ratio: float = 2.0
    num_classes: int = 10
    # (kernel, stride, padding) per T2T soft split; one attention layer follows
    # every split except the last
    t2t_splits: list = field(default_factory=lambda: [[7, 4, 2], [3, 1, 1], [3, 1, 1]])
    t2t_dim: int = 32
    # cnn: widths of the residual stages; hybrid: conv stem widths
    conv_channels: list = field(default_factory=lambda: [16, 32, 64])
    stem_strides: list = field(default_factory=lambda: [2, 2])
    stem_kernel: int = 3
    input_mean: list = field(default_factory=lambda: [0.5])
    input_std: list = field(default_factory=lambda: [0.25])

    def __post_init__(self):
        self.t2t_splits = [list(s) for s in self.t2t_splits]
        self.conv_channels = list(self.conv_channels)
        self.stem_strides = list(self.stem_strides)
        self.input_mean = list(self.input_mean)
        self.input_std = list(self.input_std)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.hidden * self.mlp_ratio))

    def stem_output_size(self) -> int:
        n = self.image_size
        pad = self.stem_kernel // 2
        for s in self.stem_strides:
            n = T.conv_output_size(n, self.stem_kernel, s, pad)
        return n

    def t2t_grids(self) -> list[int]:
        sizes, n = [], self.image_size
        for k, s, p in self.t2t_splits:
            if n + 2 * p < k:
                raise ConfigError(f"t2t split kernel {k} exceeds padded map {n + 2 * p}")
            n = T.conv_output_size(n, k, s, p)
            sizes.append(n)
        return sizes

    def token_grid(self) -> int:
        """Side length of the token grid fed to the transformer blocks."""
        if self.family == "vit":
            base = self.image_size
        elif self.family == "hybrid":
            base = self.stem_output_size()
        elif self.family == "t2t_vit":
            return self.t2t_grids()[-1]
        else:
            raise ConfigError(f"family {self.family!r} has no token grid")
        if base % self.patch_size:
            raise ConfigError(f"{self.family}: extent {base} not divisible by patch size "
                              f"{self.patch_size}")
        return base // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.token_grid() ** 2

    def validate(self) -> "ModelConfig":
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown model family {self.family!r}; expected one of {FAMILIES}")
        if self.num_classes < 1 or self.channels < 1 or self.image_size < 1:
            raise ConfigError("num_classes, channels and image_size must be positive")
        if len(self.input_mean) not in (1, self.channels) or len(self.input_std) not in (1, self.channels):
            raise ConfigError("input_mean/input_std must have 1 or `channels` entries")
        if any(s <= 0 for s in self.input_std):
            raise ConfigError("input_std entries must be positive")
        if self.family == "cnn":
            if not self.conv_channels:
                raise ConfigError("cnn needs at least one conv stage")
            return self
        if self.hidden % self.heads:
            raise ConfigError(f"hidden size {self.hidden} not divisible by {self.heads} heads")
        if self.family == "hybrid" and len(self.stem_strides) != len(self.conv_channels):
            raise ConfigError("hybrid: stem_strides and conv_channels must have equal length")
        if self.family == "t2t_vit" and len(self.t2t_splits) < 1:
            raise ConfigError("t2t_vit needs at least one soft split")
        if self.token_grid() < 1:
            raise ConfigError("derived token count must be positive")
        return self


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def _block_manifest(prefix: str, dim: int, hidden: int) -> list[tuple[str, tuple, str]]:
    return [
        (f"{prefix}.norm1.gamma", (dim,), "ones"),
        (f"{prefix}.norm1.beta", (dim,), "zeros"),
        (f"{prefix}.attn.qkv.weight", (dim, 3 * dim), "trunc"),
        (f"{prefix}.attn.qkv.bias", (3 * dim,), "zeros"),
        (f"{prefix}.attn.proj.weight", (dim, dim), "trunc"),
        (f"{prefix}.attn.proj.bias", (dim,), "zeros"),
        (f"{prefix}.norm2.gamma", (dim,), "ones"),
        (f"{prefix}.norm2.beta", (dim,), "zeros"),
        (f"{prefix}.mlp.fc1.weight", (dim, hidden), "trunc"),
        (f"{prefix}.mlp.fc1.bias", (hidden,), "zeros"),
        (f"{prefix}.mlp.fc2.weight", (hidden, dim), "trunc"),
        (f"{prefix}.mlp.fc2.bias", (dim,), "zeros"),
    ]


def _conv(name: str, cout: int, cin: int, k: int) -> list[tuple[str, tuple, str]]:
    return [(f"{name}.weight", (cout, cin, k, k), "conv"), (f"{name}.bias", (cout,), "zeros")]


def _transformer_tail(cfg: ModelConfig, in_ch: int, in_kernel: int | None) -> list:
    D, N = cfg.hidden, cfg.num_tokens
    m = []
    if in_kernel is None:  # t2t: final split is projected with a linear layer
        m += [("embed.weight", (in_ch, D), "trunc"), ("embed.bias", (D,), "zeros")]
    else:
        m += _conv("patch_embed", D, in_ch, in_kernel)
    m += [("cls_token", (1, 1, D), "normal"), ("pos_embed", (1, N + 1, D), "normal")]
    for i in range(cfg.layers):
        m += _block_manifest(f"blocks.{i}", D, cfg.mlp_hidden)
    m += [("norm.gamma", (D,), "ones"), ("norm.beta", (D,), "zeros"),
          ("head.weight", (D, cfg.num_classes), "trunc"), ("head.bias", (cfg.num_classes,), "zeros")]
    return m


def manifest(cfg: ModelConfig) -> list[tuple[str, tuple, str]]:
    """Ordered ``(name, shape, init)`` triples for a configuration."""
    cfg.validate()
    if cfg.family == "vit":
        return _transformer_tail(cfg, cfg.channels, cfg.patch_size)
    if cfg.family == "hybrid":
        m, cin = [], cfg.channels
        for i, w in enumerate(cfg.conv_channels):
            m += _conv(f"stem.{i}", w, cin, cfg.stem_kernel)
            cin = w
        return m + _transformer_tail(cfg, cin, cfg.patch_size)
    if cfg.family == "t2t_vit":
        m, cin = [], cfg.channels
        for i, (k, _, _) in enumerate(cfg.t2t_splits[:-1]):
            m += [(f"t2t.{i}.proj.weight", (cin * k * k, cfg.t2t_dim), "trunc"),
                  (f"t2t.{i}.proj.bias", (cfg.t2t_dim,), "zeros")]
            m += _block_manifest(f"t2t.{i}.block", cfg.t2t_dim, int(round(cfg.t2t_dim * cfg.mlp_ratio)))
            cin = cfg.t2t_dim
        k_last = cfg.t2t_splits[-1][0]
        return m + _transformer_tail(cfg, cin * k_last * k_last, None)
    # cnn
    w0 = cfg.conv_channels[0]
    m = _conv("stem", w0, cfg.channels, 3)
    cin = w0
    for i, w in enumerate(cfg.conv_channels[1:]):
        m += _conv(f"stages.{i}.conv1", w, cin, 3)
        m += _conv(f"stages.{i}.conv2", w, w, 3)
        m += _conv(f"stages.{i}.shortcut", w, cin, 1)
        cin = w
    m += [("head.weight", (cin, cfg.num_classes), "trunc"), ("head.bias", (cfg.num_classes,), "zeros")]
    return m


class ParameterSet(OrderedDict):
    """Ordered mapping of parameter name to :class:`Tensor`."""

    def copy(self) -> "ParameterSet":
        return ParameterSet((k, Tensor(v.data.copy(), requires_grad=v.requires_grad))
                            for k, v in self.items())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    def requires_grad_(self, flag: bool = True) -> "ParameterSet":
        for v in self.values():
            v.requires_grad = flag
            v.grad = None
        return self

    def zero_grad(self) -> None:
        for v in self.values():
            v.grad = None

    def check(self, cfg: ModelConfig) -> None:
        expected = [(n, s) for n, s, _ in manifest(cfg)]
        got = [(n, v.shape) for n, v in self.items()]
        if sorted(expected) != sorted(got):
            missing = set(expected) - set(got)
            extra = set(got) - set(expected)
            raise ConfigError(f"parameter set mismatch; missing {sorted(missing)}, extra {sorted(extra)}")

    def equal(self, other: "ParameterSet") -> bool:
        return list(self) == list(other) and all(
            np.array_equal(self[k].data, other[k].data) for k in self)


def frozen_params(params: ParameterSet) -> ParameterSet:
    """Zero-copy view of ``params`` whose tensors do not require grad."""
    out = ParameterSet()
    for k, v in params.items():
        t = Tensor.__new__(Tensor)
        t.data, t.requires_grad, t.grad = v.data, False, None
        t._parents, t._backward, t.op = (), None, "leaf"
        out[k] = t
    return out


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_parameters(cfg: ModelConfig, seed: int = 0) -> ParameterSet:
    """Deterministic initialization from ``seed``."""
    rng = np.random.default_rng(seed)
    params = ParameterSet()
    for name, shape, kind in manifest(cfg):
        if kind == "ones":
            arr = np.ones(shape)
        elif kind == "zeros":
            arr = np.zeros(shape)
        elif kind == "normal":
            arr = rng.standard_normal(shape) * 0.02
        elif kind == "conv":
            fan_in = int(np.prod(shape[1:]))
            arr = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        else:
            arr = _trunc_normal(rng, shape)
        params[name] = Tensor(arr, requires_grad=True)
    return params


def is_no_decay(name: str) -> bool:
    """Parameters excluded from weight decay: norms and CLS/positional embeddings."""
    return ".norm" in name or name.startswith("norm.") or name in ("cls_token", "pos_embed")


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def linear(x, weight, bias=None) -> Tensor:
    out = T.matmul(x, weight)
    return out + bias if bias is not None else out


def normalize_input(x: Tensor, cfg: ModelConfig) -> Tensor:
    C = cfg.channels
    mean = np.broadcast_to(np.asarray(cfg.input_mean, dtype=float), (C,)).reshape(1, C, 1, 1)
    std = np.broadcast_to(np.asarray(cfg.input_std, dtype=float), (C,)).reshape(1, C, 1, 1)
    return (x - mean) / std


def patch_embed(x, weight, bias, patch_size: int) -> Tensor:
    """Non-overlapping ``P x P`` patches projected to ``D``: ``B x N x D``."""
    x = T.as_tensor(x)
    B, C, H, W = x.shape
    P = patch_size
    if H % P or W % P:
        raise T.ShapeError(f"patch_embed: image {H}x{W} not divisible by patch size {P}")
    fmap = T.conv2d(x, weight, bias, stride=P)
    D = fmap.shape[1]
    return T.transpose(T.reshape(fmap, (B, D, -1)), (0, 2, 1))


def multi_head_self_attention(tokens, params: dict, prefix: str, heads: int) -> Tensor:
    tokens = T.as_tensor(tokens)
    B, N, D = tokens.shape
    if D % heads:
        raise T.ShapeError(f"attention: hidden size {D} not divisible by {heads} heads")
    dh = D // heads
    qkv = linear(tokens, params[f"{prefix}.qkv.weight"], params[f"{prefix}.qkv.bias"])
    qkv = T.transpose(T.reshape(qkv, (B, N, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    out = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (B, N, D))
    return linear(out, params[f"{prefix}.proj.weight"], params[f"{prefix}.proj.bias"])


def transformer_block(tokens, params: dict, prefix: str, heads: int) -> Tensor:
    """Pre-norm block: x + MSA(LN(x)), then x + MLP(LN(x))."""
    h = T.layer_norm(tokens, params[f"{prefix}.norm1.gamma"], params[f"{prefix}.norm1.beta"])
    x = tokens + multi_head_self_attention(h, params, f"{prefix}.attn", heads)
    h = T.layer_norm(x, params[f"{prefix}.norm2.gamma"], params[f"{prefix}.norm2.beta"])
    h = T.gelu(linear(h, params[f"{prefix}.mlp.fc1.weight"], params[f"{prefix}.mlp.fc1.bias"]))
    return x + linear(h, params[f"{prefix}.mlp.fc2.weight"], params[f"{prefix}.mlp.fc2.bias"])


def t2t_soft_split(fmap, k: int, s: int, p: int) -> Tensor:
    """Overlapping ``k x k`` unfolding of a token map: ``B x T x (C*k*k)``."""
    return T.unfold(fmap, k, k, stride=s, padding=p)


def _tokens_to_map(tokens: Tensor) -> Tensor:
    B, N, D = tokens.shape
    side = int(round(np.sqrt(N)))
    return T.reshape(T.transpose(tokens, (0, 2, 1)), (B, D, side, side))


def _encode(tokens: Tensor, params: dict, cfg: ModelConfig, return_first_block: bool = False):
    B, N, D = tokens.shape
    cls = T.broadcast_to(params["cls_token"], (B, 1, D))
    x = T.concatenate([cls, tokens], axis=1) + params["pos_embed"]
    first = None
    for i in range(cfg.layers):
        x = transformer_block(x, params, f"blocks.{i}", cfg.heads)
        if i == 0:
            first = x
    x = T.layer_norm(x, params["norm.gamma"], params["norm.beta"])
    logits = linear(x[:, 0, :], params["head.weight"], params["head.bias"])
    return (logits, first) if return_first_block else logits


def vit_forward(x, params: dict, cfg: ModelConfig, return_first_block: bool = False):
    x = normalize_input(T.as_tensor(x), cfg)
    tokens = patch_embed(x, params["patch_embed.weight"], params["patch_embed.bias"], cfg.patch_size)
    return _encode(tokens, params, cfg, return_first_block)


def conv_stem(x: Tensor, params: dict, cfg: ModelConfig) -> Tensor:
    pad = cfg.stem_kernel // 2
    for i, s in enumerate(cfg.stem_strides):
        x = T.relu(T.conv2d(x, params[f"stem.{i}.weight"], params[f"stem.{i}.bias"],
                            stride=s, padding=pad))
    return x


def hybrid_forward(x, params: dict, cfg: ModelConfig, return_first_block: bool = False):
    x = normalize_input(T.as_tensor(x), cfg)
    fmap = conv_stem(x, params, cfg)
    side = fmap.shape[-1]
    if side % cfg.patch_size or fmap.shape[-2] % cfg.patch_size:
        raise T.ShapeError(f"hybrid: stem output {fmap.shape[-2:]} not divisible by "
                           f"patch size {cfg.patch_size}")
    tokens = patch_embed(fmap, params["patch_embed.weight"], params["patch_embed.bias"], cfg.patch_size)
    return _encode(tokens, params, cfg, return_first_block)


def t2t_vit_forward(x, params: dict, cfg: ModelConfig, return_first_block: bool = False):
    fmap = normalize_input(T.as_tensor(x), cfg)
    splits = cfg.t2t_splits
    for i, (k, s, p) in enumerate(splits[:-1]):
        tokens = t2t_soft_split(fmap, k, s, p)
        tokens = linear(tokens, params[f"t2t.{i}.proj.weight"], params[f"t2t.{i}.proj.bias"])
        tokens = transformer_block(tokens, params, f"t2t.{i}.block", 1)
        fmap = _tokens_to_map(tokens)
    k, s, p = splits[-1]
    tokens = linear(t2t_soft_split(fmap, k, s, p), params["embed.weight"], params["embed.bias"])
    return _encode(tokens, params, cfg, return_first_block)


def cnn_forward(x, params: dict, cfg: ModelConfig, return_first_block: bool = False):
    x = normalize_input(T.as_tensor(x), cfg)
    h = T.relu(T.conv2d(x, params["stem.weight"], params["stem.bias"], padding=1))
    first = None
    for i in range(len(cfg.conv_channels) - 1):
        p = f"stages.{i}"
        out = T.relu(T.conv2d(h, params[f"{p}.conv1.weight"], params[f"{p}.conv1.bias"],
                              stride=2, padding=1))
        out = T.conv2d(out, params[f"{p}.conv2.weight"], params[f"{p}.conv2.bias"], padding=1)
        short = T.conv2d(h, params[f"{p}.shortcut.weight"], params[f"{p}.shortcut.bias"], stride=2)
        h = T.relu(out + short)
        if first is None:
            first = h
    if first is None:
        first = h
    pooled = T.mean(h, axis=(2, 3))
    logits = linear(pooled, params["head.weight"], params["head.bias"])
    return (logits, first) if return_first_block else logits


_FORWARD = {"vit": vit_forward, "cnn": cnn_forward, "hybrid": hybrid_forward,
            "t2t_vit": t2t_vit_forward}


class Classifier:
    """A configuration bound to its parameters; callable on ``B x C x H x W`` inputs."""

    def __init__(self, cfg: ModelConfig, params: ParameterSet | None = None, seed: int = 0,
                 name: str | None = None):
        self.cfg = cfg.validate()
        self.params = params if params is not None else init_parameters(cfg, seed)
        self.seed = seed
        self.name = name or cfg.family

    def frozen(self) -> "Classifier":
        """View sharing the same arrays with gradients disabled (safe across threads)."""
        return Classifier(self.cfg, frozen_params(self.params), self.seed, self.name)

    def __call__(self, x) -> Tensor:
        return _FORWARD[self.cfg.family](x, self.params, self.cfg)

    def first_block(self, x) -> Tensor:
        with T.no_grad():
            return _FORWARD[self.cfg.family](x, self.params, self.cfg, return_first_block=True)[1]

    def logits(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        outs = []
        with T.no_grad():
            for i in range(0, len(x), batch_size):
                outs.append(self(Tensor(x[i:i + batch_size])).data)
        return np.concatenate(outs) if outs else np.zeros((0, self.cfg.num_classes))

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return self.logits(x, batch_size).argmax(axis=1)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, cfg: ModelConfig, params: ParameterSet, seed: int = 0,
                    extra: dict | None = None) -> None:
    """Write magic line, 8-byte little-endian header length, JSON header, float64 payload."""
    entries, offset = [], 0
    for name, t in params.items():
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += t.size * 8
    header = {"format": CKPT_MAGIC.decode().strip(), "config": cfg.to_dict(), "seed": seed,
              "ops": {"gelu": T.GELU_FORM, "layer_norm_eps": T.LAYER_NORM_EPS},
              "params": entries, "extra": extra or {}}
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for t in params.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, ParameterSet, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not an ADVLENS-CKPT-1 checkpoint (bad magic at byte 0)")
    pos = len(CKPT_MAGIC)
    if len(raw) < pos + 8:
        raise ValueError(f"{path}: truncated header length at byte {pos}")
    (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    header = json.loads(raw[pos:pos + hlen].decode())
    pos += hlen
    cfg = ModelConfig.from_dict(header["config"])
    params = ParameterSet()
    for e in header["params"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = pos + e["offset"]
        if start + count * 8 > len(raw):
            raise ValueError(f"{path}: truncated payload for {e['name']} at byte {start}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(e["shape"])
        params[e["name"]] = Tensor(arr.astype(np.float64), requires_grad=True)
    params.check(cfg)
    return cfg, params, header


def load_classifier(path, name: str | None = None) -> Classifier:
    cfg, params, header = load_checkpoint(path)
    return Classifier(cfg, params, seed=header.get("seed", 0), name=name or Path(path).stem)
