"""Generator, discriminator and autoencoder networks as pure functions of their parameters.

A network is described by a :class:`ModelSpec` (an ordered list of layers)
and evaluated by :func:`forward` against a :class:`ModelParams` mapping of
named tensors. Keeping parameters outside of ``torch.nn.Module`` objects lets
the unrolled trainer swap in virtually-updated discriminator weights that are
still part of the autograd graph.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Mapping

import torch
import torch.nn.functional as F

from .errors import ShapeMismatch

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class Profile(enum.Enum):
    IMAGE128 = "image128"
    IMAGE32 = "image32"
    TOY = "toy"

    @property
    def size(self) -> int | None:
        return {Profile.IMAGE128: 128, Profile.IMAGE32: 32}.get(self)


class ModelKind(enum.Enum):
    GENERATOR_IMAGE = "generator_image"
    DISCRIMINATOR_IMAGE = "discriminator_image"
    GENERATOR_TOY = "generator_toy"
    DISCRIMINATOR_TOY = "discriminator_toy"
    AUTOENCODER_IMAGE = "autoencoder_image"

    @property
    def is_discriminator(self) -> bool:
        return self in (ModelKind.DISCRIMINATOR_IMAGE, ModelKind.DISCRIMINATOR_TOY)


class Mode(enum.Enum):
    TRAIN = "train"
    INFERENCE = "inference"


@dataclass(frozen=True)
class Layer:
    name: str
    op: str  # "linear" | "conv" | "deconv"
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    activation: str = "none"  # relu | leaky_relu | tanh | none
    norm: bool = False
    bias: bool = True

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        cin, cout = self.in_shape[0], self.out_shape[0]
        if self.op == "linear":
            n_in = 1
            for d in self.in_shape:
                n_in *= d
            n_out = 1
            for d in self.out_shape:
                n_out *= d
            shapes = {f"{self.name}.weight": (n_in, n_out)}
            bias_len = n_out
        elif self.op == "conv":
            shapes = {f"{self.name}.weight": (cout, cin, self.kernel, self.kernel)}
            bias_len = cout
        elif self.op == "deconv":
            shapes = {f"{self.name}.weight": (cin, cout, self.kernel, self.kernel)}
            bias_len = cout
        else:
            raise ValueError(f"unknown layer op {self.op!r}")
        if self.bias:
            shapes[f"{self.name}.bias"] = (bias_len,)
        if self.norm:
            shapes[f"{self.name}.gamma"] = (cout,)
            shapes[f"{self.name}.beta"] = (cout,)
        return shapes


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind
    layers: tuple[Layer, ...]
    profile: Profile
    K: int = 1
    heads: tuple[tuple[str, int], ...] = ()
    slope: float = 0.2
    init_std: float = 0.02

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.layers[0].in_shape

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.layers[-1].out_shape

    @property
    def profile_id(self) -> str:
        return f"{self.kind.value}/{self.profile.value}"

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for layer in self.layers:
            shapes.update(layer.param_shapes())
        n_feat = 1
        for d in self.output_shape:
            n_feat *= d
        for name, width in self.heads:
            shapes[f"{name}.weight"] = (n_feat, width)
            shapes[f"{name}.bias"] = (width,)
        return shapes

    def buffer_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for layer in self.layers:
            if layer.norm:
                shapes[f"{layer.name}.running_mean"] = (layer.out_shape[0],)
                shapes[f"{layer.name}.running_var"] = (layer.out_shape[0],)
        return shapes

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "profile": self.profile.value,
            "K": self.K,
            "heads": [list(h) for h in self.heads],
            "slope": self.slope,
            "init_std": self.init_std,
            "layers": [
                {**layer.__dict__, "in_shape": list(layer.in_shape), "out_shape": list(layer.out_shape)}
                for layer in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        layers = tuple(
            Layer(**{**l, "in_shape": tuple(l["in_shape"]), "out_shape": tuple(l["out_shape"])}) for l in d["layers"]
        )
        return cls(
            ModelKind(d["kind"]),
            layers,
            Profile(d["profile"]),
            int(d["K"]),
            tuple((str(n), int(w)) for n, w in d["heads"]),
            float(d["slope"]),
            float(d["init_std"]),
        )


# ---------------------------------------------------------------------------
# spec builders

# (channels, spatial size) stages after the latent projection
_GEN_STAGES = {
    # 100 -> 512x4x4 -> 256x8x8 -> 128x32x32 -> 64x64x64 -> 1x128x128
    Profile.IMAGE128: [(512, 4, 4, 1, 0), (256, 8, 4, 2, 1), (128, 32, 8, 4, 2), (64, 64, 4, 2, 1), (1, 128, 4, 2, 1)],
    Profile.IMAGE32: [(128, 4, 4, 1, 0), (64, 8, 4, 2, 1), (32, 16, 4, 2, 1), (1, 32, 4, 2, 1)],
}


def _generator_layers(profile: Profile, latent_dim: int, prefix: str = "g") -> list[Layer]:
    layers = []
    shape = (latent_dim, 1, 1)
    stages = _GEN_STAGES[profile]
    for i, (ch, size, kernel, stride, pad) in enumerate(stages):
        last = i == len(stages) - 1
        out = (ch, size, size)
        layers.append(
            Layer(f"{prefix}{i}", "deconv", shape, out, kernel, stride, pad,
                  activation="tanh" if last else "relu", norm=not last, bias=last)
        )
        shape = out
    return layers


def _conv_trunk(profile: Profile, channels: tuple[int, int], prefix: str = "d") -> list[Layer]:
    size = profile.size
    shape = (1, size, size)
    layers = []
    for i, ch in enumerate(channels):
        size //= 2
        out = (ch, size, size)
        layers.append(Layer(f"{prefix}{i}", "conv", shape, out, 4, 2, 1, "leaky_relu", norm=True, bias=False))
        shape = out
    return layers


def generator_spec(profile: Profile | str = Profile.IMAGE128, latent_dim: int | None = None, hidden: int = 64) -> ModelSpec:
    profile = Profile(profile)
    if profile is Profile.TOY:
        z = latent_dim or 16
        layers = (
            Layer("g0", "linear", (z,), (hidden,), activation="tanh"),
            Layer("g1", "linear", (hidden,), (hidden,), activation="tanh"),
            Layer("g2", "linear", (hidden,), (2,)),
        )
        return ModelSpec(ModelKind.GENERATOR_TOY, layers, profile)
    return ModelSpec(ModelKind.GENERATOR_IMAGE, tuple(_generator_layers(profile, latent_dim or 100)), profile)


def discriminator_spec(
    profile: Profile | str = Profile.IMAGE128,
    K: int = 1,
    channels: tuple[int, int] = (64, 128),
    slope: float = 0.2,
    hidden: int = 64,
) -> ModelSpec:
    """Shared trunk with a realness head and, when ``K >= 2``, a class head."""
    profile = Profile(profile)
    heads = (("real_head", 1),) + ((("class_head", K),) if K >= 2 else ())
    if profile is Profile.TOY:
        layers = (
            Layer("d0", "linear", (2,), (hidden,), activation="tanh"),
            Layer("d1", "linear", (hidden,), (hidden,), activation="tanh"),
        )
        return ModelSpec(ModelKind.DISCRIMINATOR_TOY, layers, profile, K, heads, slope)
    return ModelSpec(ModelKind.DISCRIMINATOR_IMAGE, tuple(_conv_trunk(profile, channels)), profile, K, heads, slope)


def autoencoder_spec(profile: Profile | str = Profile.IMAGE128, bottleneck: int = 100,
                     channels: tuple[int, int] = (64, 128), slope: float = 0.2) -> ModelSpec:
    """Encoder shaped like the discriminator trunk, decoder shaped like the generator."""
    profile = Profile(profile)
    if profile is Profile.TOY:
        raise ValueError("the autoencoder exists only for image profiles")
    enc = _conv_trunk(profile, channels, prefix="enc")
    code = Layer("code", "linear", enc[-1].out_shape, (bottleneck,))
    dec = _generator_layers(profile, bottleneck, prefix="dec")
    return ModelSpec(ModelKind.AUTOENCODER_IMAGE, tuple(enc + [code] + dec), profile, slope=slope)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ModelParams:
    """Named parameter tensors of one network plus normalization running statistics."""

    spec: ModelSpec
    entries: dict[str, torch.Tensor]
    buffers: dict[str, torch.Tensor] = field(default_factory=dict)

    @property
    def profile_id(self) -> str:
        return self.spec.profile_id

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.entries.values())).dtype

    def numel(self) -> int:
        return sum(t.numel() for t in self.entries.values())

    def replace(self, entries: Mapping[str, torch.Tensor] | None = None,
                buffers: Mapping[str, torch.Tensor] | None = None) -> "ModelParams":
        return replace(
            self,
            entries=dict(self.entries if entries is None else entries),
            buffers=dict(self.buffers if buffers is None else buffers),
        )

    def clone(self) -> "ModelParams":
        return clone_params(self)

    def equal(self, other: "ModelParams", atol: float = 0.0) -> bool:
        if self.entries.keys() != other.entries.keys() or self.buffers.keys() != other.buffers.keys():
            return False
        pairs = [(a, other.entries[n]) for n, a in self.entries.items()]
        pairs += [(a, other.buffers[n]) for n, a in self.buffers.items()]
        if atol == 0.0:
            return all(torch.equal(a.detach(), b.detach()) for a, b in pairs)
        return all(torch.allclose(a.detach(), b.detach(), rtol=0.0, atol=atol) for a, b in pairs)

    def max_abs_diff(self, other: "ModelParams") -> float:
        return max(float((a.detach() - other.entries[n].detach()).abs().max()) for n, a in self.entries.items())


def init_params(spec: ModelSpec, seed: int, dtype: torch.dtype = torch.float32) -> ModelParams:
    """Weights ~ Normal(0, init_std); norm scale 1, shift 0; biases 0."""
    gen = torch.Generator().manual_seed(int(seed))
    entries = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".weight"):
            t = torch.randn(shape, generator=gen, dtype=torch.float64) * spec.init_std
        elif name.endswith(".gamma"):
            t = torch.ones(shape, dtype=torch.float64)
        else:
            t = torch.zeros(shape, dtype=torch.float64)
        entries[name] = t.to(dtype).requires_grad_(True)
    buffers = {
        name: (torch.zeros(shape, dtype=dtype) if name.endswith("mean") else torch.ones(shape, dtype=dtype))
        for name, shape in spec.buffer_shapes().items()
    }
    return ModelParams(spec, entries, buffers)


def clone_params(params: ModelParams) -> ModelParams:
    """Deep copy whose tensors share no storage with the original."""
    return params.replace(
        entries={n: t.detach().clone().requires_grad_(True) for n, t in params.entries.items()},
        buffers={n: t.detach().clone() for n, t in params.buffers.items()},
    )


# ---------------------------------------------------------------------------
# evaluation


def _batch_norm(x, layer: Layer, entries, buffers, train: bool, new_buffers):
    dims = [0] + list(range(2, x.dim()))
    shape = [1, -1] + [1] * (x.dim() - 2)
    rm, rv = buffers[f"{layer.name}.running_mean"], buffers[f"{layer.name}.running_var"]
    if train:
        mean = x.mean(dim=dims)
        var = x.var(dim=dims, unbiased=False)
        n = x.numel() // x.shape[1]
        unbiased = var.detach() * (n / max(n - 1, 1))
        new_buffers[f"{layer.name}.running_mean"] = (1 - BN_MOMENTUM) * rm + BN_MOMENTUM * mean.detach()
        new_buffers[f"{layer.name}.running_var"] = (1 - BN_MOMENTUM) * rv + BN_MOMENTUM * unbiased
    else:
        mean, var = rm, rv
    x = (x - mean.reshape(shape)) / torch.sqrt(var.reshape(shape) + BN_EPS)
    return x * entries[f"{layer.name}.gamma"].reshape(shape) + entries[f"{layer.name}.beta"].reshape(shape)


def _activate(x, name: str, slope: float):
    if name == "relu":
        return F.relu(x)
    if name == "leaky_relu":
        return F.leaky_relu(x, slope)
    if name == "tanh":
        return torch.tanh(x)
    if name == "none":
        return x
    raise ValueError(f"unknown activation {name!r}")


def forward(params: ModelParams, x: torch.Tensor, mode: Mode = Mode.INFERENCE):
    """Run the layer stack (heads excluded).

    Returns ``(output, buffers)`` where ``buffers`` holds the running
    statistics after this call. In inference mode they are the inputs
    unchanged; committing them is the caller's decision.
    """
    spec, entries = params.spec, params.entries
    train = Mode(mode) is Mode.TRAIN
    new_buffers = dict(params.buffers)
    n = x.shape[0]
    if tuple(x.shape[1:]) != spec.input_shape and x[0].numel() != _numel(spec.input_shape):
        raise ShapeMismatch(f"{spec.kind.value} expects input {spec.input_shape}, got {tuple(x.shape[1:])}")
    for layer in spec.layers:
        x = x.reshape(n, *layer.in_shape)
        w = entries[f"{layer.name}.weight"]
        b = entries.get(f"{layer.name}.bias")
        if layer.op == "linear":
            x = x.reshape(n, -1) @ w
            if b is not None:
                x = x + b
            x = x.reshape(n, *layer.out_shape)
        elif layer.op == "conv":
            x = F.conv2d(x, w, b, layer.stride, layer.padding)
        else:
            x = F.conv_transpose2d(x, w, b, layer.stride, layer.padding)
        if tuple(x.shape[1:]) != layer.out_shape:
            raise ShapeMismatch(f"layer {layer.name} produced {tuple(x.shape[1:])}, spec says {layer.out_shape}")
        if layer.norm:
            x = _batch_norm(x, layer, entries, params.buffers, train, new_buffers)
        x = _activate(x, layer.activation, spec.slope)
    return x, new_buffers


def _numel(shape) -> int:
    out = 1
    for d in shape:
        out *= d
    return out


@dataclass
class DiscriminatorOutput:
    realness: torch.Tensor
    class_posterior: torch.Tensor | None
    realness_logit: torch.Tensor
    class_logits: torch.Tensor | None = None

    def __len__(self) -> int:
        return self.realness.shape[0]


def discriminator_heads(params: ModelParams, features: torch.Tensor) -> DiscriminatorOutput:
    feat = features.reshape(features.shape[0], -1)
    e = params.entries
    logit = (feat @ e["real_head.weight"] + e["real_head.bias"]).squeeze(1)
    if params.spec.K >= 2:
        class_logits = feat @ e["class_head.weight"] + e["class_head.bias"]
        return DiscriminatorOutput(torch.sigmoid(logit), torch.softmax(class_logits, dim=1), logit, class_logits)
    return DiscriminatorOutput(torch.sigmoid(logit), None, logit)


def run_discriminator(params: ModelParams, x: torch.Tensor, mode: Mode = Mode.TRAIN):
    """Discriminator output plus the post-call running statistics."""
    if not params.spec.kind.is_discriminator:
        raise ShapeMismatch(f"{params.spec.kind.value} is not a discriminator")
    features, buffers = forward(params, x, mode)
    return discriminator_heads(params, features), buffers


def discriminator_forward(params: ModelParams, rolls: torch.Tensor, mode: Mode = Mode.TRAIN) -> DiscriminatorOutput:
    return run_discriminator(params, rolls, mode)[0]


def generator_forward(params: ModelParams, z: torch.Tensor, mode: Mode = Mode.INFERENCE) -> torch.Tensor:
    """Samples for a batch of latents: ``(N, 1, S, S)`` rolls in [-1, 1] or ``(N, 2)`` toy points."""
    if params.spec.kind not in (ModelKind.GENERATOR_IMAGE, ModelKind.GENERATOR_TOY):
        raise ShapeMismatch(f"{params.spec.kind.value} is not a generator")
    if z.dim() != 2 or z.shape[1] != params.spec.input_shape[0]:
        raise ShapeMismatch(f"latent batch must be (N, {params.spec.input_shape[0]}), got {tuple(z.shape)}")
    return forward(params, z, mode)[0]


def latent_dim(spec: ModelSpec) -> int:
    return spec.input_shape[0]


def gradient(loss: torch.Tensor, params: ModelParams, create_graph: bool = False) -> dict[str, torch.Tensor]:
    """Reverse-mode derivative of a scalar with respect to every entry.

    Entries the loss does not depend on get zero gradients.
    """
    names = list(params.entries)
    tensors = [params.entries[n] for n in names]
    if not loss.requires_grad:
        return {n: torch.zeros_like(t) for n, t in zip(names, tensors)}
    grads = torch.autograd.grad(loss, tensors, allow_unused=True, create_graph=create_graph, retain_graph=True)
    return {n: torch.zeros_like(t) if g is None else g for n, t, g in zip(names, tensors, grads)}
