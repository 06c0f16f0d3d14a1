"""Attention U-Net for binary segmentation.

Layout for ``levels = L`` (channels ``c_l = base * 2**l``):

* encoder level ``l``: ``[conv3x3 -> BN -> ReLU] x 2``, then 2x2 max-pool
  for every level but the last (the bottleneck);
* decoder level ``l`` (``L-2`` down to 0): nearest 2x upsample of the
  coarser feature, ``conv3x3 -> BN -> ReLU`` to ``c_l`` channels (the
  gating signal), attention gate on the encoder skip, concat with the
  gating signal, ``[conv3x3 -> BN -> ReLU] x 2``;
* head: ``conv1x1 -> sigmoid``.

Parameter names are a pure function of :class:`UNetConfig`, so client
replicas built from the same config line up name by name for averaging.
"""
from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Parameter, Tensor, no_grad
from .tensor import functional as F


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 3
    base_channels: int = 8
    in_channels: int = 1
    out_channels: int = 1
    reduction: int = 8
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.levels < 2:
            raise ConfigError(f"levels must be >= 2, got {self.levels}")
        if self.base_channels < self.reduction:
            raise ConfigError(
                f"base_channels ({self.base_channels}) must be >= reduction ({self.reduction})"
            )
        if self.in_channels < 1 or self.out_channels < 1 or self.reduction < 1:
            raise ConfigError("channel counts and reduction must be positive")

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def gate_hidden(self, level: int) -> int:
        return max(1, 2 * self.channels(level) // self.reduction)

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def digest(self) -> bytes:
        """SHA-256 of the canonical JSON form; identifies the architecture."""
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


def _conv_shapes(cfg: UNetConfig) -> "OrderedDict[str, tuple[int, int, int]]":
    """(out, in, k) for every conv, in initialization order."""
    convs: OrderedDict[str, tuple[int, int, int]] = OrderedDict()
    prev = cfg.in_channels
    for lv in range(cfg.levels):
        c = cfg.channels(lv)
        convs[f"enc{lv}.conv1"] = (c, prev, 3)
        convs[f"enc{lv}.conv2"] = (c, c, 3)
        prev = c
    for lv in range(cfg.levels - 2, -1, -1):
        c = cfg.channels(lv)
        convs[f"dec{lv}.up"] = (c, cfg.channels(lv + 1), 3)
        convs[f"dec{lv}.gate.reduce"] = (cfg.gate_hidden(lv), 2 * c, 1)
        convs[f"dec{lv}.gate.restore"] = (c, cfg.gate_hidden(lv), 1)
        convs[f"dec{lv}.conv1"] = (c, 2 * c, 3)
        convs[f"dec{lv}.conv2"] = (c, c, 3)
    convs["head"] = (cfg.out_channels, cfg.channels(0), 1)
    return convs


class AttentionUNet:
    """Model state: trainable parameters plus batch-norm running statistics."""

    def __init__(self, config: UNetConfig, params: "OrderedDict[str, Parameter]", buffers: "OrderedDict[str, np.ndarray]"):
        self.config = config
        self.params = params
        self.buffers = buffers

    # -- state -----------------------------------------------------------------

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        """Copies of every parameter and buffer, in a fixed order."""
        state = OrderedDict((k, p.data.copy()) for k, p in self.params.items())
        state.update((k, b.copy()) for k, b in self.buffers.items())
        return state

    def load_state_dict(self, state) -> None:
        names = list(self.params) + list(self.buffers)
        if set(state) != set(names):
            missing = sorted(set(names) - set(state))
            extra = sorted(set(state) - set(names))
            raise KeyError(f"state mismatch: missing={missing[:3]} unexpected={extra[:3]}")
        for k, p in self.params.items():
            if state[k].shape != p.data.shape:
                raise DimensionError(f"{k}: shape {state[k].shape} != {p.data.shape}")
            p.data[...] = state[k]
        for k, b in self.buffers.items():
            if state[k].shape != b.shape:
                raise DimensionError(f"{k}: shape {state[k].shape} != {b.shape}")
            b[...] = state[k]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def parameter_vector(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.params.values()])

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- layers ----------------------------------------------------------------

    def _conv(self, name: str, x: Tensor) -> Tensor:
        w = self.params[name + ".weight"]
        pad = w.shape[2] // 2
        return F.conv2d(x, w, self.params[name + ".bias"], stride=1, padding=pad)

    def _bn(self, name: str, x: Tensor, mode: str) -> Tensor:
        cfg = self.config
        return F.batchnorm2d(
            x,
            self.params[name + ".gamma"],
            self.params[name + ".beta"],
            self.buffers[name + ".running_mean"],
            self.buffers[name + ".running_var"],
            mode=mode,
            momentum=cfg.bn_momentum,
            eps=cfg.bn_eps,
        )

    def _conv_bn_relu(self, conv: str, bn: str, x: Tensor, mode: str) -> Tensor:
        return F.relu(self._bn(bn, self._conv(conv, x), mode))

    def attention_gate(self, level: int, skip: Tensor, gate: Tensor, return_weights: bool = False):
        """Scale ``skip`` by sigmoid attention weights computed from
        ``concat(skip, gate)``: 1x1 reduce, sigmoid, 1x1 restore, sigmoid."""
        if skip.shape != gate.shape:
            raise DimensionError(f"attention gate: skip {skip.shape} and gate {gate.shape} differ")
        p = f"dec{level}.gate"
        a = F.sigmoid(self._conv(p + ".reduce", F.concat_channels(skip, gate)))
        w = F.sigmoid(self._conv(p + ".restore", a))
        out = F.mul(skip, w)
        return (out, w) if return_weights else out

    def forward(self, x, mode: str = "train", return_gates: bool = False):
        """Per-pixel foreground probabilities, same spatial size as ``x``.

        ``mode`` selects batch-norm behaviour; ``eval`` leaves the running
        statistics untouched. Wrap in :func:`~fedseg.tensor.no_grad` (or use
        :meth:`predict`) to skip graph construction.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        if not isinstance(x, Tensor):
            x = Tensor(x)
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise DimensionError(f"expected (N, {cfg.in_channels}, H, W) input, got {x.shape}")
        h, w = x.shape[2:]
        if h % cfg.divisor or w % cfg.divisor:
            raise DimensionError(f"input {h}x{w} not divisible by {cfg.divisor}")
        return self._forward(x, mode, return_gates)

    __call__ = forward

    def _forward(self, x: Tensor, mode: str, return_gates: bool):
        cfg = self.config
        skips = []
        for lv in range(cfg.levels):
            x = self._conv_bn_relu(f"enc{lv}.conv1", f"enc{lv}.bn1", x, mode)
            x = self._conv_bn_relu(f"enc{lv}.conv2", f"enc{lv}.bn2", x, mode)
            if lv < cfg.levels - 1:
                skips.append(x)
                x = F.max_pool2d(x, 2, 2)
        gates = {}
        for lv in range(cfg.levels - 2, -1, -1):
            g = self._conv_bn_relu(f"dec{lv}.up", f"dec{lv}.up.bn", F.upsample2x(x), mode)
            s, wts = self.attention_gate(lv, skips[lv], g, return_weights=True)
            gates[lv] = wts
            x = F.concat_channels(s, g)
            x = self._conv_bn_relu(f"dec{lv}.conv1", f"dec{lv}.bn1", x, mode)
            x = self._conv_bn_relu(f"dec{lv}.conv2", f"dec{lv}.bn2", x, mode)
        out = F.sigmoid(self._conv("head", x))
        return (out, gates) if return_gates else out

    def predict(self, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
        """Eval-mode probabilities for an (N, C, H, W) array, batched."""
        with no_grad():
            chunks = [self.forward(images[i:i + batch_size], mode="eval").data
                      for i in range(0, len(images), batch_size)]
        return np.concatenate(chunks, axis=0)


def parameter_shapes(config: UNetConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Names and shapes of trainable parameters, in initialization order."""
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    for name, (o, i, k) in _conv_shapes(config).items():
        shapes[name + ".weight"] = (o, i, k, k)
        shapes[name + ".bias"] = (o,)
        if k == 3:
            bn = _bn_name(name)
            shapes[bn + ".gamma"] = (o,)
            shapes[bn + ".beta"] = (o,)
    return shapes


def _bn_name(conv: str) -> str:
    prefix, leaf = conv.rsplit(".", 1)
    if leaf in ("conv1", "conv2"):
        return f"{prefix}.bn{leaf[-1]}"
    return conv + ".bn"


def build_model(config: UNetConfig | None = None, seed: int = 0) -> AttentionUNet:
    """Deterministically initialized model.

    Conv weights are He-uniform (bound ``sqrt(6 / fan_in)``), biases and
    batch-norm shifts zero, batch-norm scales one.
    """
    config = config or UNetConfig()
    rng = np.random.default_rng(seed)
    params: OrderedDict[str, Parameter] = OrderedDict()
    buffers: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gamma"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Parameter(name, data)
        if name.endswith(".gamma"):
            bn = name[: -len(".gamma")]
            buffers[bn + ".running_mean"] = np.zeros(shape)
            buffers[bn + ".running_var"] = np.ones(shape)
    return AttentionUNet(config, params, buffers)
