"""Functional SGD and Adam over :class:`~unrolled_can.models.ModelParams` entries."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import torch


class OptimizerKind(enum.Enum):
    SGD = "sgd"
    ADAM = "adam"


@dataclass
class OptimizerState:
    kind: OptimizerKind
    step: int = 0
    slots: dict[str, torch.Tensor] = field(default_factory=dict)  # "m/<name>", "v/<name>"

    def clone(self) -> "OptimizerState":
        return OptimizerState(self.kind, self.step, {k: v.clone() for k, v in self.slots.items()})


def init_state(entries: dict[str, torch.Tensor], kind: OptimizerKind | str) -> OptimizerState:
    kind = OptimizerKind(kind)
    slots = {}
    if kind is OptimizerKind.ADAM:
        for n, t in entries.items():
            slots[f"m/{n}"] = torch.zeros_like(t, requires_grad=False)
            slots[f"v/{n}"] = torch.zeros_like(t, requires_grad=False)
    return OptimizerState(kind, 0, slots)


def sgd_update(entries: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], lr: float) -> dict[str, torch.Tensor]:
    """``p - lr * g`` without detaching; used for differentiable virtual steps."""
    return {n: p - lr * grads[n] for n, p in entries.items()}


def apply(
    entries: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: OptimizerState,
    lr: float,
    beta1: float = 0.5,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, torch.Tensor], OptimizerState]:
    """One committed step. Returns fresh leaf tensors and the advanced state."""
    step = state.step + 1
    if state.kind is OptimizerKind.SGD:
        new = {n: (p.detach() - lr * grads[n].detach()) for n, p in entries.items()}
        return {n: t.requires_grad_(True) for n, t in new.items()}, OptimizerState(state.kind, step, {})
    slots = {}
    new = {}
    bc1 = 1 - beta1 ** step
    bc2 = 1 - beta2 ** step
    for n, p in entries.items():
        g = grads[n].detach()
        m = beta1 * state.slots[f"m/{n}"] + (1 - beta1) * g
        v = beta2 * state.slots[f"v/{n}"] + (1 - beta2) * g * g
        slots[f"m/{n}"], slots[f"v/{n}"] = m, v
        new[n] = (p.detach() - lr * (m / bc1) / (torch.sqrt(v / bc2) + eps)).requires_grad_(True)
    return new, OptimizerState(state.kind, step, slots)
