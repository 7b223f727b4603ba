import pytest
import torch

from onestep_vton import tryonnet as tn
from onestep_vton.config import TryOnNetConfig, load_preset
from onestep_vton.preprocess import PreservedMask


def tiny_cfg(**kw):
    defaults = dict(
        base_channels=8,
        channel_multipliers=[1, 2],
        attention_resolutions=[8],
        attention_dropout=0.0,
        res_blocks_per_scale=1,
        embedding_dim=16,
        encoder_id="seeded-conv:16:0",
        noise_alpha=5.0,
        stem_downsample=1,
    )
    defaults.update(kw)
    return TryOnNetConfig(**defaults)


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------

def test_add_noise_zero_alpha_exact():
    z0 = torch.randn(3, 16, 16)
    z = tn.add_noise(z0, tn.NoiseConfig(alpha_n=0.0, rng_seed=4))
    assert torch.equal(z, z0)


def test_add_noise_deterministic_per_seed():
    z0 = torch.randn(3, 8, 8)
    cfg = tn.NoiseConfig(alpha_n=5.0, rng_seed=11)
    assert torch.equal(tn.add_noise(z0, cfg), tn.add_noise(z0, cfg))
    other = tn.add_noise(z0, tn.NoiseConfig(alpha_n=5.0, rng_seed=12))
    assert not torch.equal(tn.add_noise(z0, cfg), other)


def test_add_noise_statistics_million_samples():
    z0 = torch.zeros(1, 1, 1000, 1000)
    z = tn.add_noise(z0, tn.NoiseConfig(alpha_n=5.0, rng_seed=0))
    diff = z - z0
    assert 4.95 <= float(diff.std()) <= 5.05
    assert abs(float(diff.mean())) <= 0.05


def test_derive_seed_stable_and_distinct():
    assert tn.derive_seed(0, "a", 1) == tn.derive_seed(0, "a", 1)
    assert tn.derive_seed(0, "a", 1) != tn.derive_seed(0, "a", 2)
    assert tn.derive_seed(0, "a") != tn.derive_seed(1, "a")


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

def test_seeded_encoder_deterministic_and_frozen():
    enc = tn.make_global_encoder("seeded-conv:32:0", 32)
    g = torch.randn(3, 32, 24)
    e1 = tn.encode_global(g, enc)
    e2 = tn.encode_global(g, enc)
    assert torch.equal(e1, e2)
    assert e1.shape == (32,)
    assert torch.isfinite(e1).all()
    assert all(not p.requires_grad for p in enc.parameters())


def test_encoder_fingerprint_stable_across_builds():
    a = tn.make_global_encoder("seeded-conv:32:3", 32)
    b = tn.make_global_encoder("seeded-conv:32:3", 32)
    assert tn.parameter_fingerprint(a) == tn.parameter_fingerprint(b)


def test_missing_clip_encoder_names_id():
    with pytest.raises(FileNotFoundError, match="clip:ViT-B/32"):
        tn.make_global_encoder("clip:ViT-B/32", 512)


def test_file_embedding_encoder_lookup(tmp_path):
    import numpy as np

    path = tmp_path / "emb.npz"
    np.savez(path, a=np.ones(8, dtype=np.float32), b=np.zeros(8, dtype=np.float32))
    enc = tn.make_global_encoder(f"clip-file:{path}", 8)
    g = torch.zeros(3, 8, 8)
    assert torch.equal(tn.encode_global(g, enc, names="a"), torch.ones(8))
    out = tn.encode_global(g, enc, names=["a", "b"])
    assert out.shape == (2, 8)
    with pytest.raises(ValueError):
        tn.encode_global(g, enc)


# ---------------------------------------------------------------------------
# U-Net
# ---------------------------------------------------------------------------

def test_unet_shapes_and_range():
    net = tn.TryOnUNet(tiny_cfg(), (32, 24))
    with torch.no_grad():
        out = net(torch.randn(2, 3, 32, 24), torch.randn(2, 3, 32, 24),
                  torch.randn(2, 3, 32, 24), torch.randn(2, 16))
    assert out.shape == (2, 3, 32, 24)
    assert float(out.min()) >= -1.0 and float(out.max()) <= 1.0


def test_unet_unbatched_and_counter():
    net = tn.TryOnUNet(tiny_cfg(), (32, 24))
    net.reset_forward_count()
    out = net(torch.randn(3, 32, 24), torch.randn(3, 32, 24),
              torch.randn(3, 32, 24), torch.randn(16))
    assert out.shape == (3, 32, 24)
    assert net.forward_calls == 1


def test_unet_eval_deterministic_train_dropout_not():
    net = tn.TryOnUNet(tiny_cfg(attention_dropout=0.5), (32, 24))
    args = (torch.randn(1, 3, 32, 24), torch.randn(1, 3, 32, 24),
            torch.randn(1, 3, 32, 24), torch.randn(1, 16))
    net.eval()
    assert torch.equal(net(*args), net(*args))


def test_unet_space_to_depth_stem_roundtrips_shape():
    net = tn.TryOnUNet(tiny_cfg(stem_downsample=2), (32, 24))
    out = net(torch.randn(1, 3, 32, 24), torch.randn(1, 3, 32, 24),
              torch.randn(1, 3, 32, 24), torch.randn(1, 16))
    assert out.shape == (1, 3, 32, 24)


def test_unet_shape_mismatch_rejected():
    net = tn.TryOnUNet(tiny_cfg(), (32, 24))
    with pytest.raises(ValueError):
        net(torch.randn(1, 3, 32, 24), torch.randn(1, 3, 16, 12),
            torch.randn(1, 3, 32, 24), torch.randn(1, 16))


def test_unet_gradient_reaches_embedding():
    net = tn.TryOnUNet(tiny_cfg(), (32, 24))
    emb = torch.randn(1, 16, requires_grad=True)
    out = net(torch.randn(1, 3, 32, 24), torch.randn(1, 3, 32, 24),
              torch.randn(1, 3, 32, 24), emb)
    out.abs().mean().backward()
    assert float(emb.grad.norm()) > 0


def test_unet_time_conditioned_needs_t():
    net = tn.TryOnUNet(tiny_cfg(), (32, 24), time_conditioned=True)
    args = (torch.randn(1, 3, 32, 24), torch.randn(1, 3, 32, 24),
            torch.randn(1, 3, 32, 24), torch.randn(1, 16))
    with pytest.raises(ValueError):
        net(*args)
    out = net(*args, t=torch.tensor(500))
    assert out.shape == (1, 3, 32, 24)


# ---------------------------------------------------------------------------
# merge_static
# ---------------------------------------------------------------------------

def _preserved(mask):
    return PreservedMask(mask=mask, garment_type="upper", background=mask & False)


def test_merge_static_full_preserved_returns_person():
    person = torch.rand(3, 6, 6)
    raw = torch.zeros(3, 6, 6)
    preserved = _preserved(torch.ones(6, 6, dtype=torch.bool))
    parsing = torch.ones(6, 6, dtype=torch.int64)  # nothing is background
    pred = torch.randn(7, 6, 6)
    out = tn.merge_static(raw, person, preserved, pred, parsing)
    assert torch.equal(out, person)


def test_merge_static_no_static_returns_raw():
    person = torch.rand(3, 6, 6)
    raw = torch.rand(3, 6, 6)
    preserved = _preserved(torch.zeros(6, 6, dtype=torch.bool))
    parsing = torch.ones(6, 6, dtype=torch.int64)
    pred = torch.zeros(7, 6, 6)
    pred[1] = 10.0  # predicted cloth everywhere: no predicted background
    out = tn.merge_static(raw, person, preserved, pred, parsing)
    assert torch.equal(out, raw)


def test_merge_static_hand_built_4x4():
    person = torch.arange(48, dtype=torch.float32).reshape(3, 4, 4)
    raw = -person
    pred = torch.zeros(7, 4, 4)
    pred[0, :2] = 10.0   # predicted background: rows 0-1
    pred[1, 2:] = 10.0
    parsing = torch.zeros(4, 4, dtype=torch.int64)
    parsing[:, 2:] = 2   # actual background: columns 0-1
    mp = torch.zeros(4, 4, dtype=torch.bool)
    mp[3, 3] = True
    preserved = _preserved(mp)
    out = tn.merge_static(raw, person, preserved, pred, parsing)
    for y in range(4):
        for x in range(4):
            static = (y < 2 and x < 2) or (y == 3 and x == 3)
            src = person if static else raw
            assert torch.equal(out[:, y, x], src[:, y, x]), (y, x)


def test_merge_static_every_pixel_from_one_source():
    gen = torch.Generator().manual_seed(0)
    person = torch.rand(3, 8, 8, generator=gen)
    raw = torch.rand(3, 8, 8, generator=gen)
    preserved = _preserved(torch.rand(8, 8, generator=gen) < 0.4)
    parsing = (torch.rand(8, 8, generator=gen) < 0.5).long()
    pred = torch.randn(7, 8, 8, generator=gen)
    out = tn.merge_static(raw, person, preserved, pred, parsing)
    matches = (out == person).all(dim=0) | (out == raw).all(dim=0)
    assert matches.all()


# ---------------------------------------------------------------------------
# EMA
# ---------------------------------------------------------------------------

def test_ema_equals_weights_after_zero_updates():
    net = tn.TryOnUNet(tiny_cfg(), (32, 24))
    ema = tn.EmaShadow(net, decay=0.9999)
    assert ema.max_divergence(net) == 0.0


def test_ema_decay_law():
    net = torch.nn.Linear(4, 4)
    ema = tn.EmaShadow(net, decay=0.9999)
    with torch.no_grad():
        ema.shadow["weight"].add_(1.0)  # perturb the shadow
    diff0 = ema.max_divergence(net)
    for _ in range(10):
        ema.update(net)
    assert ema.max_divergence(net) == pytest.approx(diff0 * 0.9999**10, rel=1e-6)


def test_ema_copy_to():
    net = torch.nn.Linear(4, 4)
    ema = tn.EmaShadow(net, decay=0.5)
    with torch.no_grad():
        ema.shadow["weight"].zero_()
        ema.shadow["bias"].zero_()
    ema.copy_to(net)
    assert torch.equal(net.weight, torch.zeros_like(net.weight))


# ---------------------------------------------------------------------------
# DDIM baseline
# ---------------------------------------------------------------------------

def test_ddim_rejects_bad_steps_and_untimed_net():
    multi = tn.TryOnUNet(tiny_cfg(), (16, 16), time_conditioned=True)
    single = tn.TryOnUNet(tiny_cfg(), (16, 16))
    cond = torch.randn(3, 16, 16)
    with pytest.raises(ValueError):
        tn.ddim_sample(multi, cond, cond, torch.randn(16), steps=0)
    with pytest.raises(ValueError):
        tn.ddim_sample(single, cond, cond, torch.randn(16), steps=1)


def test_ddim_single_step_is_one_forward():
    net = tn.TryOnUNet(tiny_cfg(), (16, 16), time_conditioned=True).eval()
    net.reset_forward_count()
    cond = torch.randn(3, 16, 16)
    out = tn.ddim_sample(net, cond, cond, torch.randn(16), steps=1, seed=3)
    assert net.forward_calls == 1
    assert out.shape == (3, 16, 16)


def test_ddim_deterministic_and_step_counted():
    net = tn.TryOnUNet(tiny_cfg(), (16, 16), time_conditioned=True).eval()
    cond = torch.randn(3, 16, 16)
    emb = torch.randn(16)
    a = tn.ddim_sample(net, cond, cond, emb, steps=5, seed=3)
    net.reset_forward_count()
    b = tn.ddim_sample(net, cond, cond, emb, steps=5, seed=3)
    assert net.forward_calls == 5
    assert torch.equal(a, b)


def test_ddim_wall_time_monotone_in_steps():
    import time

    net = tn.TryOnUNet(tiny_cfg(), (32, 24), time_conditioned=True).eval()
    cond = torch.randn(4, 3, 32, 24)
    emb = torch.randn(4, 16)
    with torch.no_grad():
        tn.ddim_sample(net, cond, cond, emb, steps=1)  # warm up
        t0 = time.perf_counter()
        tn.ddim_sample(net, cond, cond, emb, steps=1)
        t1 = time.perf_counter()
        tn.ddim_sample(net, cond, cond, emb, steps=20)
        t2 = time.perf_counter()
    assert (t2 - t1) > (t1 - t0)


def test_ddim_schedule_shape():
    sched = tn.make_ddim_schedule(100)
    assert sched.num_train_steps == 100
    acp = sched.alphas_cumprod
    assert float(acp[0]) > float(acp[-1]) > 0.0
