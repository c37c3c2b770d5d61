"""Fixture builders and independent oracles shared by the test modules."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from unrolled_can.midi_codec import MidiSong, NoteEvent, write_midi

PPQ = 96
STEP = PPQ // 4


def make_song(rng: np.random.Generator, style: str, windows: int = 1, ppq: int = PPQ) -> MidiSong:
    """A small, strongly patterned piece so an autoencoder can learn the style."""
    step = ppq // 4
    notes = []
    total = 128 * windows
    if style == "arpeggio":
        root = int(rng.integers(48, 60))
        pattern = [root, root + 4, root + 7, root + 12]
        for i, t in enumerate(range(0, total - 1, 2)):
            notes.append(NoteEvent(pattern[i % 4], t * step, 2 * step, int(rng.integers(60, 110))))
    elif style == "chords":
        root = int(rng.integers(60, 72))
        for t in range(0, total - 3, 8):
            for p in (root, root + 3, root + 7):
                notes.append(NoteEvent(p, t * step, 4 * step, int(rng.integers(60, 110))))
    elif style == "bass":
        root = int(rng.integers(36, 44))
        for t in range(0, total - 7, 8):
            notes.append(NoteEvent(root + (5 if (t // 8) % 2 else 0), t * step, 6 * step, 90))
    else:
        raise ValueError(style)
    return MidiSong.from_notes(ppq, notes)


def write_corpus(root: Path, per_class: dict[str, list[int]], seed: int = 0,
                 styles: dict[str, str] | None = None) -> Path:
    """``per_class`` maps class name -> window count of each file in that class."""
    styles = styles or {}
    rng = np.random.default_rng(seed)
    default_styles = ["arpeggio", "chords", "bass"]
    for c, (name, files) in enumerate(sorted(per_class.items())):
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        style = styles.get(name, default_styles[c % len(default_styles)])
        for i, windows in enumerate(files):
            (d / f"{name}_{i:03d}.mid").write_bytes(write_midi(make_song(rng, style, windows)))
    return root


def random_song(rng: np.random.Generator, n_notes: int, ppq: int = PPQ, max_tick: int = 4000,
                n_tracks: int = 1) -> MidiSong:
    notes = [
        NoteEvent(int(rng.integers(0, 128)), int(rng.integers(0, max_tick)), int(rng.integers(1, 500)),
                  int(rng.integers(1, 128)), int(rng.integers(0, n_tracks)))
        for _ in range(n_notes)
    ]
    return MidiSong.from_notes(ppq, notes)


def central_difference(f, tensors: dict[str, torch.Tensor], h: float = 1e-6) -> dict[str, torch.Tensor]:
    """Numerical gradient of scalar ``f()`` w.r.t. every element, perturbing ``tensors`` in place."""
    # f() runs with autograd on: losses that differentiate internally (the
    # virtual discriminator step) would silently change under no_grad
    def put(flat, i, v):
        with torch.no_grad():
            flat[i] = v

    out = {}
    for name, t in tensors.items():
        g = torch.zeros_like(t, requires_grad=False)
        flat, gflat = t.detach().view(-1), g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            put(flat, i, orig + h)
            plus = float(f().detach())
            put(flat, i, orig - h)
            minus = float(f().detach())
            put(flat, i, orig)
            gflat[i] = (plus - minus) / (2 * h)
        out[name] = g
    return out


def relative_error(a: dict[str, torch.Tensor], b: dict[str, torch.Tensor]) -> float:
    va = torch.cat([a[n].reshape(-1) for n in sorted(a)])
    vb = torch.cat([b[n].reshape(-1) for n in sorted(a)])
    return float((va - vb).norm() / max(float(va.norm() + vb.norm()), 1e-12))


# --- hand-solvable adversarial pair ----------------------------------------------
#
# G(z) = theta * z and D(x) = sigmoid(h * w * x + c): a linear generator and a
# logistic discriminator whose trunk is one weight w feeding a realness head
# (h, c). Small enough for the chain rule to be written out by hand.


def tiny_pair(theta: float, w: float, h: float = 1.0, c: float = 0.0):
    from unrolled_can.models import Layer, ModelKind, ModelParams, ModelSpec, Profile

    g_spec = ModelSpec(ModelKind.GENERATOR_TOY, (Layer("g0", "linear", (1,), (1,), bias=False),), Profile.TOY)
    d_spec = ModelSpec(ModelKind.DISCRIMINATOR_TOY, (Layer("d0", "linear", (1,), (1,), bias=False),), Profile.TOY,
                       1, (("real_head", 1),))
    t = lambda v, shape: torch.full(shape, float(v), dtype=torch.float64, requires_grad=True)
    g = ModelParams(g_spec, {"g0.weight": t(theta, (1, 1))})
    d = ModelParams(d_spec, {"d0.weight": t(w, (1, 1)), "real_head.weight": t(h, (1, 1)), "real_head.bias": t(c, (1,))})
    return g, d


def _sig(u):
    return 1.0 / (1.0 + np.exp(-u))


def hand_discriminator_grads(theta, w, h, c, x, z):
    """Gradient of -mean log D(x) - mean log(1 - D(theta z)) w.r.t. (w, h, c)."""
    x, y = np.asarray(x, float), theta * np.asarray(z, float)
    s = h * w
    r = -(1 - _sig(s * x + c)) / len(x)
    q = _sig(s * y + c) / len(y)
    g_s = (r * x).sum() + (q * y).sum()
    g_c = r.sum() + q.sum()
    return h * g_s, w * g_s, g_c


def hand_unrolled_generator_grad(theta, w, h, c, lr, x, z, z_gen):
    """d/dtheta of -mean log D'(theta z_gen), D' being D after one SGD step on (x, theta z)."""
    x, z, z_gen = (np.asarray(a, float) for a in (x, z, z_gen))
    s = h * w
    y = theta * z
    gw, gh, gc = hand_discriminator_grads(theta, w, h, c, x, z)
    w1, h1, c1 = w - lr * gw, h - lr * gh, c - lr * gc
    s1 = w1 * h1
    # derivatives of the virtual step with respect to theta (real terms do not move)
    sig_y = _sig(s * y + c)
    dsig = sig_y * (1 - sig_y)
    dgs = ((dsig * s * z / len(z)) * y + (sig_y / len(z)) * z).sum()
    dgc = (dsig * s * z / len(z)).sum()
    dw1, dh1, dc1 = -lr * h * dgs, -lr * w * dgs, -lr * dgc
    ds1 = h1 * dw1 + w1 * dh1
    u = s1 * theta * z_gen + c1
    dl = s1 * z_gen + theta * z_gen * ds1 + dc1
    return float((-(1 - _sig(u)) * dl).mean())
