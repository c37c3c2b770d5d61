"""Expert-gate novelty scoring.

An autoencoder is fit to the real corpus; a candidate piece scores the mean
squared reconstruction error of its roll. Pieces unlike anything in the
corpus reconstruct badly and score high. Scores are computed on unit-range
pixels (on = 1, off = 0) at the gate's profile resolution.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import container, optim
from .dataset import Corpus, TrainingSet, batches, normalize, to_profile
from .errors import CorruptContainer, EmptyCorpus, EmptySet
from .midi_codec import PianoRoll, ValueDomain
from .models import Mode, ModelParams, ModelSpec, Profile, autoencoder_spec, forward, gradient, init_params
from .unroll_engine import TrainConfig

# Published figures for the three generator families, carried in reports as
# context only; nothing is checked against them.
REFERENCE_SCORES = {
    "max": {"gan": 0.029, "can": 0.013, "unrolled_can": 0.043},
    "mean": {"gan": 0.02, "can": 0.013, "unrolled_can": 0.043},
    "gate_train_mse": 0.01,
}


@dataclass
class NoveltyReport:
    per_sample: list[float]
    mean: float
    max: float
    n: int
    gate_train_mse: float = math.nan
    sample_ids: list[str] = field(default_factory=list)
    reference: dict = field(default_factory=lambda: json.loads(json.dumps(REFERENCE_SCORES)))

    def summary(self) -> dict:
        return {
            "mean": self.mean,
            "max": self.max,
            "n": self.n,
            "gate_train_mse": None if math.isnan(self.gate_train_mse) else self.gate_train_mse,
            "reference": self.reference,
        }


def _gate_input(grids: np.ndarray, spec: ModelSpec) -> torch.Tensor:
    return torch.as_tensor(to_profile(grids, spec.profile.size))


def _unit_mse(recon: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-sample MSE after mapping [-1, 1] onto [0, 1]."""
    diff = (recon - target) / 2.0
    return (diff * diff).reshape(diff.shape[0], -1).mean(dim=1)


def _signed_grids(rolls: Sequence[PianoRoll]) -> np.ndarray:
    out = []
    for r in rolls:
        if r.value_domain is ValueDomain.BINARY01:
            r = normalize(r)
        out.append(r.grid)
    return np.stack(out).astype(np.float32)


def score_grids(gate: ModelParams, grids: np.ndarray, batch: int = 64) -> np.ndarray:
    """Reconstruction MSE for ``(N, 128, 128)`` Signed11 grids."""
    scores = []
    with torch.no_grad():
        for start in range(0, len(grids), batch):
            x = _gate_input(grids[start:start + batch], gate.spec).to(gate.dtype)
            recon = forward(gate, x, Mode.INFERENCE)[0]
            scores.append(_unit_mse(recon, x).to(torch.float64).numpy())
    return np.concatenate(scores) if scores else np.zeros(0)


def reconstruction_mse(gate: ModelParams, roll: PianoRoll) -> float:
    return float(score_grids(gate, _signed_grids([roll]))[0])


def train_expert_gate(data: Corpus | TrainingSet, cfg: TrainConfig) -> tuple[ModelParams, float]:
    """Fit the autoencoder to the real rolls; returns ``(gate, final train MSE)``.

    Stops after ``cfg.epochs`` epochs or as soon as the train-set MSE (in
    inference mode) reaches ``cfg.gate_target_mse``.
    """
    ts = data.training_set() if isinstance(data, Corpus) else data
    if len(ts) == 0:
        raise EmptyCorpus("expert gate needs at least one real roll")
    if cfg.profile is Profile.TOY:
        raise ValueError("expert gate needs an image profile")
    init_seed, shuffle_seed = (int(s) for s in np.random.SeedSequence([cfg.seed, 0x6A7E]).generate_state(2))
    gate = init_params(autoencoder_spec(cfg.profile), init_seed, cfg.torch_dtype)
    state = optim.init_state(gate.entries, optim.OptimizerKind.ADAM)
    batch_size = min(cfg.batch_size, len(ts))
    shuffle = np.random.SeedSequence(shuffle_seed)
    mse = float(score_grids(gate, ts.x).mean())
    for _ in range(cfg.epochs):
        if mse <= cfg.gate_target_mse:
            break
        epoch_seed = int(shuffle.spawn(1)[0].generate_state(1)[0])
        for xb, _ in batches(ts, batch_size, epoch_seed):
            x = _gate_input(xb, gate.spec).to(cfg.torch_dtype)
            recon, buffers = forward(gate, x, Mode.TRAIN)
            loss = _unit_mse(recon, x).mean()
            grads = gradient(loss, gate)
            entries, state = optim.apply(gate.entries, grads, state, cfg.gate_lr, 0.9, 0.999)
            gate = gate.replace(entries=entries, buffers=buffers)
        mse = float(score_grids(gate, ts.x).mean())
    return gate, mse


def score_set(gate: ModelParams, rolls: Sequence[PianoRoll], gate_train_mse: float = math.nan,
              sample_ids: Sequence[str] | None = None) -> NoveltyReport:
    if len(rolls) == 0:
        raise EmptySet("nothing to score")
    scores = [float(s) for s in score_grids(gate, _signed_grids(rolls))]
    ids = list(sample_ids) if sample_ids is not None else [str(i) for i in range(len(scores))]
    return NoveltyReport(scores, float(np.mean(scores)), float(np.max(scores)), len(scores), float(gate_train_mse), ids)


def write_report(report: NoveltyReport, csv_path: str | Path, json_path: str | Path) -> None:
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "mse"])
        writer.writerows((sid, repr(s)) for sid, s in zip(report.sample_ids, report.per_sample))
    Path(json_path).write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")


def save_gate(gate: ModelParams, path: str | Path, gate_train_mse: float = math.nan) -> None:
    entries = {f"param/{n}": t.detach().numpy() for n, t in gate.entries.items()}
    entries.update({f"buffer/{n}": t.detach().numpy() for n, t in gate.buffers.items()})
    meta = {"kind": "expert_gate", "spec": gate.spec.to_dict(),
            "gate_train_mse": None if math.isnan(gate_train_mse) else gate_train_mse}
    container.save(path, entries, meta)


def load_gate(path: str | Path) -> tuple[ModelParams, float]:
    entries, meta = container.load(path)
    if meta.get("kind") != "expert_gate":
        raise CorruptContainer("container does not hold an expert gate")
    params = {n[6:]: torch.from_numpy(a).requires_grad_(True) for n, a in entries.items() if n.startswith("param/")}
    buffers = {n[7:]: torch.from_numpy(a) for n, a in entries.items() if n.startswith("buffer/")}
    mse = meta.get("gate_train_mse")
    return ModelParams(ModelSpec.from_dict(meta["spec"]), params, buffers), math.nan if mse is None else float(mse)
