"""Small differentiable-network core.

Networks are described by a :class:`NetworkSpec` (an ordered list of layer
blocks) and instantiated on top of ``torch`` which supplies reverse-mode
gradients. The module also holds the first-order optimizer wrapper and the
manifest + raw-blob checkpoint format used by every learned component.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .errors import CheckpointError, ConfigurationError, TrainingError, UsageError

LAYER_KINDS = ("dense", "conv", "flatten", "reshape", "upsample")
ACTIVATIONS = (None, "relu", "tanh")


@dataclass(frozen=True)
class LayerSpec:
    """One block: ``activation(norm(layer(x)))``.

    ``fan_in``/``fan_out`` are features for dense layers and channels for
    convolutions. ``shape`` is only used by ``reshape`` and ``scale`` only by
    ``upsample``.
    """

    kind: str
    fan_in: int = 0
    fan_out: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    activation: Optional[str] = None
    norm: bool = False
    shape: Tuple[int, ...] = ()
    scale: int = 2


def dense(fan_in: int, fan_out: int, activation: Optional[str] = None, norm: bool = False) -> LayerSpec:
    return LayerSpec("dense", fan_in, fan_out, activation=activation, norm=norm)


def conv(fan_in: int, fan_out: int, kernel: int = 3, stride: int = 1, padding: int = 0,
         activation: Optional[str] = None, norm: bool = False) -> LayerSpec:
    return LayerSpec("conv", fan_in, fan_out, kernel=kernel, stride=stride, padding=padding,
                     activation=activation, norm=norm)


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def reshape(*shape: int) -> LayerSpec:
    return LayerSpec("reshape", shape=tuple(shape))


def upsample(scale: int = 2) -> LayerSpec:
    return LayerSpec("upsample", scale=scale)


@dataclass(frozen=True)
class NetworkSpec:
    """Input shape (without the batch axis) plus an ordered tuple of blocks."""

    input_shape: Tuple[int, ...]
    layers: Tuple[LayerSpec, ...]

    def output_shape(self) -> Tuple[int, ...]:
        return infer_shapes(self)[-1]

    @property
    def fan_in(self) -> Tuple[int, ...]:
        return self.input_shape


def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def infer_shapes(spec: NetworkSpec) -> List[Tuple[int, ...]]:
    """Per-layer shapes, starting with the input shape.

    Raises ConfigurationError when consecutive layers are incompatible.
    """
    shapes = [tuple(spec.input_shape)]
    cur = tuple(spec.input_shape)
    for k, layer in enumerate(spec.layers):
        if layer.kind not in LAYER_KINDS:
            raise ConfigurationError(f"layer {k}: unknown kind {layer.kind!r}")
        if layer.activation not in ACTIVATIONS:
            raise ConfigurationError(f"layer {k}: unknown activation {layer.activation!r}")
        if layer.kind == "dense":
            if len(cur) != 1 or cur[0] != layer.fan_in:
                raise ConfigurationError(f"layer {k}: dense expects ({layer.fan_in},), got {cur}")
            cur = (layer.fan_out,)
        elif layer.kind == "conv":
            if len(cur) != 3 or cur[0] != layer.fan_in:
                raise ConfigurationError(f"layer {k}: conv expects {layer.fan_in} channels, got {cur}")
            h = _conv_out(cur[1], layer.kernel, layer.stride, layer.padding)
            w = _conv_out(cur[2], layer.kernel, layer.stride, layer.padding)
            if h <= 0 or w <= 0:
                raise ConfigurationError(f"layer {k}: conv output would be empty for input {cur}")
            cur = (layer.fan_out, h, w)
        elif layer.kind == "flatten":
            cur = (int(np.prod(cur)),)
        elif layer.kind == "reshape":
            if int(np.prod(layer.shape)) != int(np.prod(cur)):
                raise ConfigurationError(f"layer {k}: cannot reshape {cur} into {layer.shape}")
            cur = tuple(layer.shape)
        elif layer.kind == "upsample":
            if len(cur) != 3:
                raise ConfigurationError(f"layer {k}: upsample needs a (C, H, W) input, got {cur}")
            cur = (cur[0], cur[1] * layer.scale, cur[2] * layer.scale)
        shapes.append(cur)
    return shapes


def count_parameters(spec: NetworkSpec) -> int:
    """Closed-form trainable parameter count of ``spec``."""
    total = 0
    for layer in spec.layers:
        if layer.kind == "dense":
            total += layer.fan_in * layer.fan_out + layer.fan_out
        elif layer.kind == "conv":
            total += layer.kernel * layer.kernel * layer.fan_in * layer.fan_out + layer.fan_out
        if layer.norm:
            total += 2 * layer.fan_out
    return total


class _Reshape(nn.Module):
    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, x):
        return x.reshape(x.shape[0], *self.shape)


def _init_uniform_fan_in(module: nn.Module, fan_in: int, generator: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        module.weight.uniform_(-bound, bound, generator=generator)
        module.bias.uniform_(-bound, bound, generator=generator)


class Network(nn.Module):
    """A feed-forward network built from a :class:`NetworkSpec`.

    Layer norm on a convolution normalizes over (C, H, W) with one affine
    pair per channel. Besides normal ``torch`` use, :meth:`run` and
    :meth:`backward` expose an explicit forward/backward pair for callers
    that want gradients without building their own loss.
    """

    def __init__(self, spec: NetworkSpec, seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        infer_shapes(spec)
        self.spec = spec
        gen = torch.Generator().manual_seed(int(seed))
        blocks: List[nn.Module] = []
        for layer in spec.layers:
            ops: List[nn.Module] = []
            if layer.kind == "dense":
                lin = nn.Linear(layer.fan_in, layer.fan_out)
                _init_uniform_fan_in(lin, layer.fan_in, gen)
                ops.append(lin)
                if layer.norm:
                    ops.append(nn.LayerNorm(layer.fan_out))
            elif layer.kind == "conv":
                cv = nn.Conv2d(layer.fan_in, layer.fan_out, layer.kernel, layer.stride, layer.padding)
                _init_uniform_fan_in(cv, layer.fan_in * layer.kernel * layer.kernel, gen)
                ops.append(cv)
                if layer.norm:
                    ops.append(nn.GroupNorm(1, layer.fan_out))
            elif layer.kind == "flatten":
                ops.append(nn.Flatten())
            elif layer.kind == "reshape":
                ops.append(_Reshape(layer.shape))
            elif layer.kind == "upsample":
                ops.append(nn.Upsample(scale_factor=layer.scale, mode="nearest"))
            if layer.activation == "relu":
                ops.append(nn.ReLU())
            elif layer.activation == "tanh":
                ops.append(nn.Tanh())
            blocks.append(ops[0] if len(ops) == 1 else nn.Sequential(*ops))
        self.body = nn.Sequential(*blocks)
        self.to(dtype)
        self._recorded: Optional[Tuple[torch.Tensor, torch.Tensor]] = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise ConfigurationError(
                f"input shape {tuple(x.shape[1:])} does not match network fan-in {self.spec.input_shape}")
        return self.body(x)

    def run(self, x: torch.Tensor) -> torch.Tensor:
        """Forward pass that records what :meth:`backward` needs."""
        x = x.detach().clone().requires_grad_(True)
        out = self.forward(x)
        self._recorded = (x, out)
        return out.detach()

    def backward(self, upstream: torch.Tensor) -> torch.Tensor:
        """Accumulate parameter gradients for ``upstream`` and return the input gradient."""
        if self._recorded is None:
            raise UsageError("backward called without a preceding run()")
        x, out = self._recorded
        self._recorded = None
        out.backward(upstream.to(out.dtype))
        return x.grad

    def zero_grad(self, set_to_none: bool = True) -> None:
        super().zero_grad(set_to_none=set_to_none)

    def named_tensors(self) -> Dict[str, torch.Tensor]:
        return {k: v for k, v in self.state_dict().items()}


class Optimizer:
    """First-order update rule over a parameter list.

    ``rule`` is ``"adam"`` (default moment coefficients) or ``"sgd"``.
    Gradients are checked for finiteness before every step and cleared after.
    """

    def __init__(self, params: Iterable[torch.nn.Parameter], lr: float, rule: str = "adam",
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params]
        if rule == "adam":
            self._opt = torch.optim.Adam(self.params, lr=lr, betas=betas, eps=eps)
        elif rule == "sgd":
            self._opt = torch.optim.SGD(self.params, lr=lr)
        else:
            raise ConfigurationError(f"unknown optimizer rule {rule!r}")
        self.rule = rule

    @property
    def lr(self) -> float:
        return self._opt.param_groups[0]["lr"]

    @lr.setter
    def lr(self, value: float) -> None:
        for group in self._opt.param_groups:
            group["lr"] = value

    def zero_grad(self) -> None:
        self._opt.zero_grad(set_to_none=True)

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                self.zero_grad()
                raise TrainingError("non-finite gradient encountered in optimizer step")
        self._opt.step()
        self.zero_grad()


# -- checkpoints -----------------------------------------------------------

MANIFEST = "manifest.json"
BLOB = "params.bin"


def save_checkpoint(path: os.PathLike, tensors: Mapping[str, torch.Tensor | np.ndarray],
                    extra: Optional[dict] = None) -> Path:
    """Write ``tensors`` as a JSON manifest plus one little-endian float32 blob."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name in sorted(tensors):
        value = tensors[name]
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    with open(path / BLOB, "wb") as fh:
        for raw in chunks:
            fh.write(raw)
    manifest = {"format": "float32-le", "blob": BLOB, "total_bytes": offset, "tensors": entries}
    if extra:
        manifest["extra"] = extra
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(path: os.PathLike) -> Tuple[Dict[str, np.ndarray], dict]:
    """Inverse of :func:`save_checkpoint`; returns (tensors, extra)."""
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
        blob = (path / manifest.get("blob", BLOB)).read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint at {path}: {exc}") from exc
    if len(blob) != manifest.get("total_bytes", len(blob)):
        raise CheckpointError(f"blob size {len(blob)} does not match manifest in {path}")
    out = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start, stop = entry["offset"], entry["offset"] + entry["nbytes"]
        if stop > len(blob) or entry["nbytes"] != 4 * n:
            raise CheckpointError(f"tensor {entry['name']} is truncated or malformed")
        out[entry["name"]] = np.frombuffer(blob[start:stop], dtype="<f4").reshape(shape).copy()
    return out, manifest.get("extra", {})


def module_tensors(modules: Mapping[str, nn.Module]) -> Dict[str, torch.Tensor]:
    """Flatten several modules' state dicts into ``prefix.name`` keys."""
    out = {}
    for prefix, module in modules.items():
        for name, value in module.state_dict().items():
            out[f"{prefix}.{name}"] = value
    return out


def load_module_tensors(modules: Mapping[str, nn.Module], tensors: Mapping[str, np.ndarray]) -> None:
    for prefix, module in modules.items():
        state = {}
        for name, ref in module.state_dict().items():
            key = f"{prefix}.{name}"
            if key not in tensors:
                raise CheckpointError(f"checkpoint lacks tensor {key}")
            arr = tensors[key]
            if tuple(arr.shape) != tuple(ref.shape):
                raise CheckpointError(f"tensor {key} has shape {arr.shape}, expected {tuple(ref.shape)}")
            state[name] = torch.from_numpy(np.array(arr, dtype=np.float32)).to(ref.dtype)
        module.load_state_dict(state)


# -- architectures -----------------------------------------------------------

def model_encoder_spec(in_channels: int, crop: int, latent_dim: int, channels: int = 32,
                       strides: Sequence[int] = (2, 1, 1), hidden: int = 32) -> NetworkSpec:
    layers = []
    c_in = in_channels
    for s in strides:
        layers.append(conv(c_in, channels, 3, s, activation="relu", norm=True))
        c_in = channels
    layers.append(flatten())
    shape = infer_shapes(NetworkSpec((in_channels, crop, crop), tuple(layers)))[-1]
    layers += [dense(shape[0], hidden, "relu"), dense(hidden, hidden, "relu"), dense(hidden, 2 * latent_dim)]
    return NetworkSpec((in_channels, crop, crop), tuple(layers))


def model_decoder_spec(latent_dim: int, out_channels: int, side: int, channels: int = 128,
                       n_upsample: int = 3, hidden: int = 128) -> NetworkSpec:
    base = side // (2 ** n_upsample)
    if base * 2 ** n_upsample != side:
        raise ConfigurationError(f"image side {side} is not divisible by 2**{n_upsample}")
    layers = [dense(latent_dim, hidden, "relu"), dense(hidden, hidden, "relu"),
              dense(hidden, channels * base * base, "relu"), reshape(channels, base, base)]
    for k in range(n_upsample):
        layers.append(upsample(2))
        last = k == n_upsample - 1
        layers.append(conv(channels, out_channels if last else channels, 3, 1, 1,
                           activation=None if last else "relu"))
    return NetworkSpec((latent_dim,), tuple(layers))


def dynamics_spec(latent_dim: int, action_dim: int, hidden: int = 512) -> NetworkSpec:
    out = 3 * latent_dim + latent_dim * action_dim
    return NetworkSpec((latent_dim,), (dense(latent_dim, hidden, "relu"), dense(hidden, hidden, "relu"),
                                       dense(hidden, out)))


def rl_encoder_spec(in_channels: int, crop: int, feature_dim: int = 32, channels: int = 32,
                    n_conv: int = 4) -> NetworkSpec:
    layers = []
    c_in = in_channels
    for _ in range(n_conv):
        layers.append(conv(c_in, channels, 3, 2, activation="relu", norm=True))
        c_in = channels
    layers.append(flatten())
    shape = infer_shapes(NetworkSpec((in_channels, crop, crop), tuple(layers)))[-1]
    layers.append(dense(shape[0], feature_dim, norm=True))
    return NetworkSpec((in_channels, crop, crop), tuple(layers))


def mlp_spec(fan_in: int, fan_out: int, hidden: int = 1024, depth: int = 2) -> NetworkSpec:
    layers = []
    c = fan_in
    for _ in range(depth):
        layers.append(dense(c, hidden, "relu"))
        c = hidden
    layers.append(dense(c, fan_out))
    return NetworkSpec((fan_in,), tuple(layers))


def full_scale_specs(latent_dim: int = 16, action_dim: int = 7) -> Dict[str, NetworkSpec]:
    """The full-size architectures (two stacked RGB views, 128 px frames, 112 px crops)."""
    return {
        "model_encoder": model_encoder_spec(6, 112, latent_dim),
        "model_decoder": model_decoder_spec(latent_dim, 6, 128, channels=128, n_upsample=3),
        "dynamics": dynamics_spec(latent_dim, action_dim, hidden=512),
        "rl_encoder": rl_encoder_spec(6, 112, 32, channels=32, n_conv=4),
        "actor": mlp_spec(32, 2 * action_dim, hidden=1024),
        "critic": mlp_spec(32 + action_dim, 1, hidden=1024),
    }
