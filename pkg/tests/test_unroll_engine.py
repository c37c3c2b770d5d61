import dataclasses

import numpy as np
import pytest
import torch

from helpers import (
    central_difference,
    hand_discriminator_grads,
    hand_unrolled_generator_grad,
    relative_error,
    tiny_pair,
    write_corpus,
)
from unrolled_can import optim
from unrolled_can.dataset import Layout, TrainingSet, scan_corpus
from unrolled_can.errors import InsufficientBatches, SingleClass
from unrolled_can.midi_codec import encode, parse_midi
from unrolled_can.models import Mode, Profile, discriminator_forward, forward, gradient
from unrolled_can.optim import OptimizerKind
from unrolled_can.toy_bench import MoGSpec, toy_training_set
from unrolled_can.unroll_engine import (
    LOG_HEADER,
    Checkpoint,
    Objective,
    TrainConfig,
    UnrollMode,
    discriminator_loss_on,
    discriminator_step,
    generate,
    generator_loss_against,
    generator_step,
    init_models,
    train,
    virtual_unroll,
)


def toy_cfg(**kw):
    base = dict(profile=Profile.TOY, toy_hidden=8, dtype="float64", batch_size=16)
    return TrainConfig(**(base | kw))


def toy_batch(n=16, seed=0, K=1):
    spec = MoGSpec.ring()
    ts = toy_training_set(spec, n, seed)
    return torch.as_tensor(ts.x, dtype=torch.float64), ts.labels % K


def _perturbed_models(cfg, K=1, seed=0):
    g, d = init_models(dataclasses.replace(cfg, seed=seed), K)
    with torch.no_grad():
        gen = torch.Generator().manual_seed(seed + 99)
        for t in list(g.entries.values()) + list(d.entries.values()):
            t.add_(torch.randn(t.shape, generator=gen, dtype=t.dtype) * 0.3)
    return g, d


# --- virtual unroll -------------------------------------------------------------------


def test_k0_returns_equal_params():
    cfg = toy_cfg(k=0)
    g, d = init_models(cfg, 1)
    assert virtual_unroll(d, g, [], cfg, latents=[]).equal(d)


def test_zero_unroll_rate_returns_equal_params():
    cfg = toy_cfg(k=1, unroll_lr=0.0)
    g, d = _perturbed_models(cfg)
    x, y = toy_batch()
    assert virtual_unroll(d, g, [(x, y)], cfg, rng=torch.Generator().manual_seed(0)).equal(d)


def test_insufficient_batches():
    cfg = toy_cfg(k=2)
    g, d = init_models(cfg, 1)
    with pytest.raises(InsufficientBatches):
        virtual_unroll(d, g, [toy_batch()], cfg, rng=torch.Generator())


@pytest.mark.parametrize("objective,K", [(Objective.GAN, 1), (Objective.CAN, 3)])
def test_k2_equals_two_manual_steps(objective, K):
    cfg = toy_cfg(k=2, unroll_lr=0.1, objective=objective, unroll_mode=UnrollMode.STOPGRAD)
    g, d = _perturbed_models(cfg, K)
    batches = [toy_batch(seed=1, K=K), toy_batch(seed=2, K=K)]
    zs = [torch.randn(16, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(i)) for i in range(2)]
    d_k = virtual_unroll(d, g, batches, cfg, latents=zs)

    # oracle: a torch SGD optimizer driving a detached clone
    clone = d.clone()
    opt = torch.optim.SGD(list(clone.entries.values()), lr=0.1)
    for (x, y), z in zip(batches, zs):
        opt.zero_grad()
        loss, _ = discriminator_loss_on(clone, g, x, y, z, cfg)
        loss.total.backward()
        opt.step()
    assert d_k.max_abs_diff(clone) < 1e-12


def test_virtual_unroll_leaves_input_untouched():
    cfg = TrainConfig(profile=Profile.IMAGE32, k=2, unroll_mode=UnrollMode.FULL, objective=Objective.CAN, batch_size=4)
    g, d = init_models(cfg, 2)
    before = d.clone()
    x = torch.rand(4, 1, 32, 32) * 2 - 1
    d_k = virtual_unroll(d, g, [(x, [0, 1, 0, 1])] * 2, cfg, rng=torch.Generator().manual_seed(0))
    assert d.equal(before)
    assert not d_k.equal(d)
    assert all(torch.equal(d_k.buffers[n], d.buffers[n]) for n in d.buffers)


def test_full_mode_stays_differentiable_in_generator():
    cfg = toy_cfg(k=1, unroll_mode=UnrollMode.FULL)
    g, d = _perturbed_models(cfg)
    d_k = virtual_unroll(d, g, [toy_batch()], cfg, rng=torch.Generator().manual_seed(0))
    assert all(t.requires_grad and t.grad_fn is not None for t in d_k.entries.values())
    sg = virtual_unroll(d, g, [toy_batch()], dataclasses.replace(cfg, unroll_mode=UnrollMode.STOPGRAD),
                        rng=torch.Generator().manual_seed(0))
    assert all(t.grad_fn is None for t in sg.entries.values())
    assert sg.max_abs_diff(d_k) < 1e-12


# --- generator step ------------------------------------------------------------------


def _generator_grad(cfg, g, d, batch, z_unroll, z_gen):
    d_k = virtual_unroll(d, g, [batch] * cfg.k, cfg, latents=[z_unroll] * cfg.k)
    loss, _, _ = generator_loss_against(g, d_k, z_gen, cfg)
    return gradient(loss.total, g)


def test_full_and_stopgrad_differ_only_through_virtual_step():
    cfg = toy_cfg(k=1, unroll_lr=0.5, objective=Objective.CAN)
    g, d = _perturbed_models(cfg, 3)
    batch = toy_batch(K=3)
    gen = torch.Generator().manual_seed(5)
    zu, zg = torch.randn(16, 16, generator=gen, dtype=torch.float64), torch.randn(16, 16, generator=gen, dtype=torch.float64)
    full = _generator_grad(dataclasses.replace(cfg, unroll_mode=UnrollMode.FULL), g, d, batch, zu, zg)
    stop = _generator_grad(dataclasses.replace(cfg, unroll_mode=UnrollMode.STOPGRAD), g, d, batch, zu, zg)
    diff = torch.cat([(full[n] - stop[n]).reshape(-1) for n in full]).norm()
    assert float(diff) > 1e-6
    # at k = 0 the two modes coincide exactly
    zero = [_generator_grad(dataclasses.replace(cfg, k=0, unroll_mode=m), g, d, batch, zu, zg) for m in UnrollMode]
    assert all(torch.equal(zero[0][n], zero[1][n]) for n in zero[0])


@pytest.mark.parametrize("objective,K", [(Objective.GAN, 1), (Objective.CAN, 3)])
def test_unrolled_gradient_matches_finite_differences(objective, K):
    cfg = toy_cfg(k=1, unroll_lr=0.5, objective=objective, unroll_mode=UnrollMode.FULL)
    g, d = _perturbed_models(cfg, K, seed=3)
    batch = toy_batch(K=K)
    gen = torch.Generator().manual_seed(11)
    zu, zg = torch.randn(16, 16, generator=gen, dtype=torch.float64), torch.randn(16, 16, generator=gen, dtype=torch.float64)

    def value():
        d_k = virtual_unroll(d, g, [batch], cfg, latents=[zu])
        return generator_loss_against(g, d_k, zg, cfg)[0].total

    analytic = gradient(value(), g)
    numeric = central_difference(value, g.entries)
    assert relative_error(analytic, numeric) <= 1e-5


def test_unrolled_gradient_matches_hand_model():
    rng = np.random.default_rng(0)
    for _ in range(5):
        theta, w, h, c = rng.uniform(-1.5, 1.5, 4)
        x, z, zg = rng.normal(1.0, 0.5, 6), rng.normal(size=5), rng.normal(size=7)
        cfg = TrainConfig(profile=Profile.TOY, k=1, unroll_mode=UnrollMode.FULL, unroll_lr=0.3, latent_dim=1,
                          dtype="float64", batch_size=6)
        g, d = tiny_pair(theta, w, h, c)
        t = lambda a: torch.tensor(a, dtype=torch.float64).reshape(-1, 1)
        d_k = virtual_unroll(d, g, [(t(x), None)], cfg, latents=[t(z)])
        loss, _, _ = generator_loss_against(g, d_k, t(zg), cfg)
        got = float(gradient(loss.total, g)["g0.weight"])
        assert abs(got - hand_unrolled_generator_grad(theta, w, h, c, 0.3, x, z, zg)) < 1e-6


def test_generator_step_k0_is_plain_step():
    cfg = toy_cfg(k=0, optimizer=OptimizerKind.SGD, eta_g=0.05)
    g, d = _perturbed_models(cfg)
    z = torch.randn(16, 16, dtype=torch.float64)
    d_k = virtual_unroll(d, g, [], cfg, latents=[])
    new_g, _, _, _ = generator_step(g, d_k, z, cfg, optim.init_state(g.entries, cfg.optimizer))
    fake_out = discriminator_forward(d, forward(g, z, Mode.TRAIN)[0])
    grads = gradient(-torch.log(fake_out.realness.clamp(1e-7, 1 - 1e-7)).mean(), g)
    for n, p in g.entries.items():
        assert torch.allclose(new_g.entries[n], p - 0.05 * grads[n], rtol=0, atol=1e-14)


# --- discriminator step ------------------------------------------------------------------


def test_discriminator_step_zero_rate():
    cfg = toy_cfg(optimizer=OptimizerKind.SGD, eta_d=1e-300)
    g, d = _perturbed_models(cfg)
    x, y = toy_batch()
    new_d, _, _ = discriminator_step(d, g, x, y, torch.randn(16, 16, dtype=torch.float64), cfg,
                                     optim.init_state(d.entries, cfg.optimizer))
    assert new_d.equal(d)


def test_discriminator_step_matches_hand_sgd():
    rng = np.random.default_rng(1)
    for _ in range(5):
        theta, w, h, c = rng.uniform(-1.5, 1.5, 4)
        x, z = rng.normal(1.0, 0.5, 6), rng.normal(size=6)
        cfg = TrainConfig(profile=Profile.TOY, optimizer=OptimizerKind.SGD, eta_d=0.2, latent_dim=1,
                          dtype="float64", batch_size=6)
        g, d = tiny_pair(theta, w, h, c)
        t = lambda a: torch.tensor(a, dtype=torch.float64).reshape(-1, 1)
        new_d, _, _ = discriminator_step(d, g, t(x), None, t(z), cfg, optim.init_state(d.entries, cfg.optimizer))
        gw, gh, gc = hand_discriminator_grads(theta, w, h, c, x, z)
        assert abs(new_d.entries["d0.weight"].item() - (w - 0.2 * gw)) < 1e-12
        assert abs(new_d.entries["real_head.weight"].item() - (h - 0.2 * gh)) < 1e-12
        assert abs(new_d.entries["real_head.bias"].item() - (c - 0.2 * gc)) < 1e-12


def test_descent_over_twenty_seeds():
    d_down = g_down = 0
    for seed in range(20):
        cfg = toy_cfg(optimizer=OptimizerKind.SGD, eta_d=1e-3, eta_g=1e-3, seed=seed, toy_hidden=16)
        g, d = _perturbed_models(cfg, seed=seed)
        x, y = toy_batch(seed=seed)
        z = torch.randn(16, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
        before = discriminator_loss_on(d, g, x, y, z, cfg)[0].total.item()
        new_d, _, _ = discriminator_step(d, g, x, y, z, cfg, optim.init_state(d.entries, cfg.optimizer))
        d_down += discriminator_loss_on(new_d, g, x, y, z, cfg)[0].total.item() <= before
        g_before = generator_loss_against(g, d, z, cfg)[0].total.item()
        new_g, _, _, _ = generator_step(g, d, z, cfg, optim.init_state(g.entries, cfg.optimizer))
        g_down += generator_loss_against(new_g, d, z, cfg)[0].total.item() <= g_before
    # one-sided sign test at p < 0.05 needs at least 15 of 20
    assert d_down >= 15 and g_down >= 15


# --- train loop ------------------------------------------------------------------------------


def _toy_set(n=100, K=1):
    ts = toy_training_set(MoGSpec.ring(), n, 0)
    return TrainingSet(ts.x, ts.labels % K, K)


def test_log_row_count():
    cfg = toy_cfg(epochs=2, batch_size=16)
    _, log = train(_toy_set(100), cfg)
    assert len(log) == 2 * (100 // 16)
    csv_text = log.to_csv().splitlines()
    assert csv_text[0] == ",".join(LOG_HEADER)
    assert len(csv_text) == 1 + 2 * 2 * (100 // 16)
    keys = [(r.epoch, r.step) for r in log.records]
    assert keys == sorted(keys)


def test_can_needs_two_classes():
    with pytest.raises(SingleClass):
        train(_toy_set(40), toy_cfg(objective=Objective.CAN))


def test_gan_runs_on_single_class():
    ckpt, _ = train(_toy_set(40), toy_cfg())
    assert ckpt.epoch == 1


def test_training_is_deterministic():
    cfg = toy_cfg(epochs=2, k=2, objective=Objective.CAN)
    a, la = train(_toy_set(64, 2), cfg)
    b, lb = train(_toy_set(64, 2), cfg)
    assert a.generator.equal(b.generator) and a.discriminator.equal(b.discriminator)
    assert [r.sample_hash for r in la.records] == [r.sample_hash for r in lb.records]


def test_committed_discriminator_independent_of_k_for_first_step():
    ts = _toy_set(16)
    d_after = []
    for k in (0, 3):
        cfg = toy_cfg(k=k, epochs=1, batch_size=16)
        ckpt, _ = train(ts, cfg)
        d_after.append(ckpt.discriminator)
    # a single iteration: the D step runs before any unrolling
    assert d_after[0].equal(d_after[1])


def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = toy_cfg(dtype="float32", epochs=1, k=1)
    ckpt, _ = train(_toy_set(48), cfg)
    path = tmp_path / "ckpt.canroll"
    ckpt.save(path)
    back = Checkpoint.load(path)
    assert back.generator.equal(ckpt.generator) and back.discriminator.equal(ckpt.discriminator)
    assert back.g_state.step == ckpt.g_state.step
    assert all(torch.equal(back.d_state.slots[n], ckpt.d_state.slots[n]) for n in ckpt.d_state.slots)
    assert back.config == ckpt.config and back.to_bytes() == ckpt.to_bytes()


@pytest.fixture(scope="module")
def image_ckpt(tmp_path_factory):
    root = write_corpus(tmp_path_factory.mktemp("c"), {"a": [1] * 4, "b": [1] * 4})
    corpus = scan_corpus(root, Layout.PER_CLASS, holdout_fraction=0)
    cfg = TrainConfig(objective=Objective.CAN, profile=Profile.IMAGE32, batch_size=4, k=1)
    ckpt, _ = train(corpus, cfg)
    return ckpt


def test_generate_empty(image_ckpt):
    assert generate(image_ckpt, 0, 0) == ([], [])


def test_generate_fixed_point_and_determinism(image_ckpt):
    rolls, mids = generate(image_ckpt, 3, 5)
    again = generate(image_ckpt, 3, 5)
    assert len(rolls) == len(mids) == 3
    assert all(a == b for a, b in zip(rolls, again[0])) and mids == again[1]
    for roll, mid in zip(rolls, mids):
        assert encode(parse_midi(mid), 0) == roll.binarize(0.0)
