"""Adversarial training with k-step unrolled discriminator lookahead.

One training iteration is:

1. a committed discriminator step against the current generator,
2. a *virtual* copy of that discriminator advanced ``k`` plain-SGD steps,
3. a generator step taken against the virtual copy.

With ``k = 0`` the virtual copy is the committed discriminator and the loop
is ordinary alternating GAN/CAN training. In ``full`` unroll mode the
generator gradient also flows through the ``k`` virtual updates; in
``stopgrad`` mode the virtual copy is treated as a constant.

All randomness derives from ``TrainConfig.seed``: ``SeedSequence(seed)`` is
spawned into the named streams of :data:`STREAMS`, in that order, and each
child's first 32-bit word seeds a ``torch.Generator``/numpy stream.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import hashlib
import io
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import container, optim
from .dataset import Corpus, TrainingSet, batches, from_profile, to_profile
from .errors import CorruptContainer, InsufficientBatches, ShapeMismatch, SingleClass
from .midi_codec import PianoRoll, ValueDomain, decode, default_step_ticks, write_midi
from .models import (
    Mode,
    ModelParams,
    ModelSpec,
    Profile,
    discriminator_spec,
    forward,
    generator_spec,
    gradient,
    init_params,
    run_discriminator,
)
from .objectives import (
    GeneratorMode,
    LossBreakdown,
    can_discriminator_loss,
    can_generator_loss,
    gan_discriminator_loss,
    gan_generator_loss,
)
from .optim import OptimizerKind, OptimizerState

STREAMS = ("init_g", "init_d", "shuffle", "d_noise", "unroll", "g_noise", "eval")
CHECKPOINT_VERSION = 1
LOG_HEADER = ["epoch", "step", "side", "total", "realness_term", "class_term", "ambiguity_term", "wall_ms"]


class Objective(enum.Enum):
    GAN = "gan"
    CAN = "can"


class UnrollMode(enum.Enum):
    FULL = "full"
    STOPGRAD = "stopgrad"


class LatentPrior(enum.Enum):
    NORMAL = "normal"
    UNIFORM = "uniform"


_PROFILE_DEFAULTS = {
    Profile.TOY: dict(eta_g=2e-3, eta_d=2e-3, batch_size=256, unroll_mode=UnrollMode.FULL, latent_dim=16),
    Profile.IMAGE32: dict(eta_g=2e-4, eta_d=2e-4, batch_size=16, unroll_mode=UnrollMode.STOPGRAD, latent_dim=100),
    Profile.IMAGE128: dict(eta_g=2e-4, eta_d=2e-4, batch_size=16, unroll_mode=UnrollMode.STOPGRAD, latent_dim=100),
}


@dataclass
class TrainConfig:
    """Hyperparameters of one training run.

    Fields left as ``None`` take per-profile defaults when the config is
    built; ``dataclasses.replace`` keeps the already-resolved values.
    """

    objective: Objective = Objective.GAN
    profile: Profile = Profile.TOY
    k: int = 0
    unroll_mode: UnrollMode | None = None
    unroll_lr: float = 0.005
    eta_g: float | None = None
    eta_d: float | None = None
    optimizer: OptimizerKind = OptimizerKind.ADAM
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int | None = None
    epochs: int = 1
    seed: int = 0
    latent_prior: LatentPrior = LatentPrior.NORMAL
    latent_dim: int | None = None
    generator_mode: GeneratorMode = GeneratorMode.NON_SATURATING
    d_steps: int = 1
    fresh_unroll_batches: bool = False
    toy_hidden: int = 64
    dtype: str = "float32"
    ppq: int = 96
    step_div: int = 4
    eval_samples: int = 16
    gate_lr: float = 1e-3
    gate_target_mse: float = 0.01

    def __post_init__(self):
        for name, enum_type in (
            ("objective", Objective),
            ("profile", Profile),
            ("optimizer", OptimizerKind),
            ("latent_prior", LatentPrior),
            ("generator_mode", GeneratorMode),
        ):
            setattr(self, name, enum_type(getattr(self, name)))
        if self.unroll_mode is not None:
            self.unroll_mode = UnrollMode(self.unroll_mode)
        for name, value in _PROFILE_DEFAULTS[self.profile].items():
            if getattr(self, name) is None:
                setattr(self, name, value)
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if self.eta_g <= 0 or self.eta_d <= 0 or self.unroll_lr < 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1 or self.d_steps < 1 or self.epochs < 0:
            raise ValueError("batch_size and d_steps must be >= 1, epochs >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        return {f.name: (v.value if isinstance(v, enum.Enum) else v)
                for f in dataclasses.fields(self) for v in [getattr(self, f.name)]}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def derive_seeds(seed: int) -> dict[str, int]:
    children = np.random.SeedSequence(int(seed)).spawn(len(STREAMS))
    return {name: int(c.generate_state(1)[0]) for name, c in zip(STREAMS, children)}


def torch_rng(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed))


def sample_latents(cfg: TrainConfig, n: int, rng: torch.Generator) -> torch.Tensor:
    shape = (n, cfg.latent_dim)
    if cfg.latent_prior is LatentPrior.UNIFORM:
        return torch.rand(shape, generator=rng, dtype=torch.float64).mul(2).sub(1).to(cfg.torch_dtype)
    return torch.randn(shape, generator=rng, dtype=torch.float64).to(cfg.torch_dtype)


def build_specs(cfg: TrainConfig, K: int) -> tuple[ModelSpec, ModelSpec]:
    g = generator_spec(cfg.profile, cfg.latent_dim, hidden=cfg.toy_hidden)
    d_classes = K if cfg.objective is Objective.CAN else 1
    d = discriminator_spec(cfg.profile, d_classes, hidden=cfg.toy_hidden)
    return g, d


def prepare_batch(x: np.ndarray, cfg: TrainConfig) -> torch.Tensor:
    """Training arrays in the network's input layout and dtype."""
    if cfg.profile is Profile.TOY:
        arr = np.asarray(x, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ShapeMismatch(f"toy profile trains on (N, 2) points, got {arr.shape}")
    else:
        arr = to_profile(x, cfg.profile.size)
    return torch.as_tensor(arr).to(cfg.torch_dtype)


# ---------------------------------------------------------------------------
# single steps


def _discriminator_loss(cfg: TrainConfig, real_out, labels, fake_out) -> LossBreakdown:
    if cfg.objective is Objective.CAN:
        return can_discriminator_loss(real_out, labels, fake_out)
    return gan_discriminator_loss(real_out, fake_out)


def _generator_loss(cfg: TrainConfig, fake_out) -> LossBreakdown:
    if cfg.objective is Objective.CAN:
        return can_generator_loss(fake_out, mode=cfg.generator_mode)
    return gan_generator_loss(fake_out, cfg.generator_mode)


def _labels(labels, n: int) -> torch.Tensor:
    if labels is None:
        return torch.zeros(n, dtype=torch.long)
    return torch.as_tensor(np.asarray(labels), dtype=torch.long)


def discriminator_loss_on(d: ModelParams, g: ModelParams, real: torch.Tensor, labels, z: torch.Tensor,
                          cfg: TrainConfig, detach_fake: bool = True):
    """Discriminator loss on one real batch and ``G(z)``; returns ``(loss, buffers)``.

    Generator normalization statistics are used in train mode but not written back.
    """
    fake = forward(g, z, Mode.TRAIN)[0]
    if detach_fake:
        fake = fake.detach()
    real_out, buffers = run_discriminator(d, real, Mode.TRAIN)
    fake_out, buffers = run_discriminator(d.replace(buffers=buffers), fake, Mode.TRAIN)
    return _discriminator_loss(cfg, real_out, _labels(labels, real.shape[0]), fake_out), buffers


def discriminator_step(d: ModelParams, g: ModelParams, real: torch.Tensor, labels, z: torch.Tensor,
                       cfg: TrainConfig, state: OptimizerState):
    """Committed update ``D <- D - eta_d * dL_D/dD``; returns ``(d, state, loss)``."""
    loss, buffers = discriminator_loss_on(d, g, real, labels, z, cfg)
    grads = gradient(loss.total, d)
    entries, state = optim.apply(d.entries, grads, state, cfg.eta_d, cfg.beta1, cfg.beta2)
    return d.replace(entries=entries, buffers=buffers), state, loss


def virtual_unroll(d: ModelParams, g: ModelParams, real_batches: Sequence[tuple[torch.Tensor, object]],
                   cfg: TrainConfig, latents: Sequence[torch.Tensor] | None = None,
                   rng: torch.Generator | None = None) -> ModelParams:
    """Copy of ``d`` advanced ``cfg.k`` SGD steps at ``cfg.unroll_lr``.

    ``d`` itself is never modified and the copy's running statistics are the
    ones ``d`` started with. In full mode the returned entries are still
    functions of the generator's entries.
    """
    if len(real_batches) < cfg.k:
        raise InsufficientBatches(f"virtual unroll needs {cfg.k} batches, got {len(real_batches)}")
    if latents is None:
        if rng is None:
            raise ValueError("pass either latents or rng")
        latents = [sample_latents(cfg, real_batches[i][0].shape[0], rng) for i in range(cfg.k)]
    full = cfg.unroll_mode is UnrollMode.FULL
    cur = d.replace(entries={n: t.detach().requires_grad_(True) for n, t in d.entries.items()})
    for i in range(cfg.k):
        real, labels = real_batches[i]
        loss, _ = discriminator_loss_on(cur, g, real, labels, latents[i], cfg, detach_fake=not full)
        grads = gradient(loss.total, cur, create_graph=full)
        cur = cur.replace(entries=optim.sgd_update(cur.entries, grads, cfg.unroll_lr))
    if not full:
        cur = cur.replace(entries={n: t.detach() for n, t in cur.entries.items()})
    return cur


def generator_loss_against(g: ModelParams, d_k: ModelParams, z: torch.Tensor, cfg: TrainConfig):
    fake, buffers = forward(g, z, Mode.TRAIN)
    fake_out, _ = run_discriminator(d_k, fake, Mode.TRAIN)
    return _generator_loss(cfg, fake_out), buffers, fake


def generator_step(g: ModelParams, d_k: ModelParams, z: torch.Tensor, cfg: TrainConfig, state: OptimizerState):
    """``G <- G - eta_g * dL_G(D_k, G)/dG``; returns ``(g, state, loss, fake)``."""
    if z.shape[1] != g.spec.input_shape[0]:
        raise ShapeMismatch(f"latent width {z.shape[1]} != generator input {g.spec.input_shape[0]}")
    loss, buffers, fake = generator_loss_against(g, d_k, z, cfg)
    grads = gradient(loss.total, g)
    entries, state = optim.apply(g.entries, grads, state, cfg.eta_g, cfg.beta1, cfg.beta2)
    return g.replace(entries=entries, buffers=buffers), state, loss, fake.detach()


# ---------------------------------------------------------------------------
# checkpoints and logs


@dataclass
class Checkpoint:
    generator: ModelParams
    discriminator: ModelParams
    g_state: OptimizerState
    d_state: OptimizerState
    epoch: int
    config: dict
    format_version: int = CHECKPOINT_VERSION

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)

    def to_bytes(self) -> bytes:
        entries = {}
        for prefix, p in (("generator", self.generator), ("discriminator", self.discriminator)):
            entries.update({f"{prefix}/param/{n}": t.detach().numpy() for n, t in p.entries.items()})
            entries.update({f"{prefix}/buffer/{n}": t.detach().numpy() for n, t in p.buffers.items()})
        for prefix, st in (("opt_g", self.g_state), ("opt_d", self.d_state)):
            entries.update({f"{prefix}/{n}": t.detach().numpy() for n, t in st.slots.items()})
        meta = {
            "kind": "checkpoint",
            "format_version": self.format_version,
            "epoch": self.epoch,
            "config": self.config,
            "generator_spec": self.generator.spec.to_dict(),
            "discriminator_spec": self.discriminator.spec.to_dict(),
            "opt_g": {"kind": self.g_state.kind.value, "step": self.g_state.step},
            "opt_d": {"kind": self.d_state.kind.value, "step": self.d_state.step},
        }
        return container.dumps(entries, meta)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        entries, meta = container.loads(data)
        if meta.get("kind") != "checkpoint":
            raise CorruptContainer("container does not hold a training checkpoint")

        def params(prefix: str, spec_key: str) -> ModelParams:
            spec = ModelSpec.from_dict(meta[spec_key])
            ent = {n.split("/", 2)[2]: torch.from_numpy(a).requires_grad_(True)
                   for n, a in entries.items() if n.startswith(f"{prefix}/param/")}
            buf = {n.split("/", 2)[2]: torch.from_numpy(a) for n, a in entries.items()
                   if n.startswith(f"{prefix}/buffer/")}
            return ModelParams(spec, ent, buf)

        def state(prefix: str) -> OptimizerState:
            slots = {n[len(prefix) + 1:]: torch.from_numpy(a) for n, a in entries.items() if n.startswith(prefix + "/")}
            return OptimizerState(OptimizerKind(meta[prefix]["kind"]), int(meta[prefix]["step"]), slots)

        return cls(
            params("generator", "generator_spec"),
            params("discriminator", "discriminator_spec"),
            state("opt_g"),
            state("opt_d"),
            int(meta["epoch"]),
            meta["config"],
            int(meta["format_version"]),
        )

    def save(self, path: str | Path) -> None:
        container.write_atomic(path, self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass
class LogRecord:
    epoch: int
    step: int
    discriminator: dict[str, float]
    generator: dict[str, float]
    wall_ms: float
    sample_hash: str


@dataclass
class TrainLog:
    records: list[LogRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: LogRecord) -> None:
        if self.records and (record.epoch, record.step) <= (self.records[-1].epoch, self.records[-1].step):
            raise ValueError("log records must be appended in (epoch, step) order")
        self.records.append(record)

    def rows(self):
        for r in self.records:
            for side, losses in (("discriminator", r.discriminator), ("generator", r.generator)):
                yield [r.epoch, r.step, side, losses["total"], losses["realness_term"],
                       losses["class_term"], losses["ambiguity_term"], round(r.wall_ms, 3)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LOG_HEADER)
        writer.writerows(self.rows())
        return buf.getvalue()


def _sample_hash(fake: torch.Tensor) -> str:
    return hashlib.sha1(fake.detach().to(torch.float32).numpy().tobytes()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# training loop

EpochCallback = Callable[[int, Checkpoint, torch.Tensor], None]


def _as_training_set(data: Corpus | TrainingSet) -> TrainingSet:
    return data.training_set() if isinstance(data, Corpus) else data


def init_models(cfg: TrainConfig, K: int) -> tuple[ModelParams, ModelParams]:
    seeds = derive_seeds(cfg.seed)
    g_spec, d_spec = build_specs(cfg, K)
    return (init_params(g_spec, seeds["init_g"], cfg.torch_dtype),
            init_params(d_spec, seeds["init_d"], cfg.torch_dtype))


def train(data: Corpus | TrainingSet, cfg: TrainConfig, on_epoch: EpochCallback | None = None,
          models: tuple[ModelParams, ModelParams] | None = None) -> tuple[Checkpoint, TrainLog]:
    """Alternate committed D steps and unrolled G steps over ``cfg.epochs`` epochs.

    ``on_epoch(epoch, checkpoint, eval_samples)`` runs after every epoch with
    generator outputs for a fixed, seeded latent set.
    """
    ts = _as_training_set(data)
    if cfg.objective is Objective.CAN and ts.K < 2:
        raise SingleClass("CAN training needs at least two style classes")
    seeds = derive_seeds(cfg.seed)
    g, d = models if models is not None else init_models(cfg, ts.K)
    g_state = optim.init_state(g.entries, cfg.optimizer)
    d_state = optim.init_state(d.entries, cfg.optimizer)
    d_rng, u_rng, g_rng = torch_rng(seeds["d_noise"]), torch_rng(seeds["unroll"]), torch_rng(seeds["g_noise"])
    fresh_rng = np.random.default_rng(seeds["unroll"])
    eval_z = sample_latents(cfg, cfg.eval_samples, torch_rng(seeds["eval"]))
    log = TrainLog()
    ckpt = Checkpoint(g, d, g_state, d_state, 0, cfg.to_dict())
    shuffle = np.random.SeedSequence(seeds["shuffle"])

    for epoch in range(cfg.epochs):
        epoch_seed = int(shuffle.spawn(1)[0].generate_state(1)[0])
        for step, (xb, yb) in enumerate(batches(ts, cfg.batch_size, epoch_seed)):
            t0 = time.perf_counter()
            real = prepare_batch(xb, cfg)
            for _ in range(cfg.d_steps):
                z = sample_latents(cfg, cfg.batch_size, d_rng)
                d, d_state, d_loss = discriminator_step(d, g, real, yb, z, cfg, d_state)
            if cfg.fresh_unroll_batches:
                unroll_batches = []
                for _ in range(cfg.k):
                    idx = fresh_rng.choice(len(ts), size=cfg.batch_size, replace=False)
                    unroll_batches.append((prepare_batch(ts.x[idx], cfg), ts.labels[idx]))
            else:
                unroll_batches = [(real, yb)] * cfg.k
            d_k = virtual_unroll(d, g, unroll_batches, cfg, rng=u_rng)
            z = sample_latents(cfg, cfg.batch_size, g_rng)
            g, g_state, g_loss, fake = generator_step(g, d_k, z, cfg, g_state)
            log.append(LogRecord(epoch, step, d_loss.as_floats(), g_loss.as_floats(),
                                 (time.perf_counter() - t0) * 1000.0, _sample_hash(fake[:1])))
        ckpt = Checkpoint(g, d, g_state, d_state, epoch + 1, cfg.to_dict())
        if on_epoch is not None:
            with torch.no_grad():
                samples = forward(g, eval_z, Mode.INFERENCE)[0]
            on_epoch(epoch + 1, ckpt, samples)
    return ckpt, log


# ---------------------------------------------------------------------------
# generation


def sample_generator(g: ModelParams, cfg: TrainConfig, n: int, seed: int) -> torch.Tensor:
    """Raw generator outputs (inference mode) for ``n`` latents drawn with ``seed``."""
    z = sample_latents(cfg, n, torch_rng(seed))
    with torch.no_grad():
        return forward(g, z, Mode.INFERENCE)[0]


def outputs_to_rolls(outputs: torch.Tensor | np.ndarray, step_ticks: int) -> list[PianoRoll]:
    grids = np.clip(from_profile(np.asarray(outputs, dtype=np.float32)), -1.0, 1.0)
    return [PianoRoll(grid, ValueDomain.SIGNED11, step_ticks) for grid in grids]


def generate(ckpt: Checkpoint, n: int, seed: int) -> tuple[list[PianoRoll], list[bytes]]:
    """Sample ``n`` pieces: Signed11 rolls and the MIDI bytes of their 0-thresholded decodes."""
    cfg = ckpt.train_config
    if cfg.profile is Profile.TOY:
        raise ShapeMismatch("toy checkpoints produce points, not piano rolls; use sample_generator")
    if n == 0:
        return [], []
    rolls = outputs_to_rolls(sample_generator(ckpt.generator, cfg, n, seed), default_step_ticks(cfg.ppq, cfg.step_div))
    return rolls, [write_midi(decode(r, 0.0, cfg.ppq)) for r in rolls]
