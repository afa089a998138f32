import inspect

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

import oracles
from uniugg_mini.config import LossWeights
from uniugg_mini.data import PairBatch
from uniugg_mini.encoder import Encoder, EncoderConfig, RgbHead
from uniugg_mini.errors import ConfigurationError, ValidationError
from uniugg_mini.spatial_decoder import DecoderConfig, SpatialDecoder, SpatialPrediction, spatial_loss
from uniugg_mini.spatial_vae import LatentDistribution, SpatialVAE, VAEConfig, kl_loss, reparameterize, vae_loss

SMALL = VAEConfig(in_dim=16, grid=4, hidden=16, width=16, depth=1, heads=2)


def small_vae(cfg=SMALL, seed=0):
    torch.manual_seed(seed)
    return SpatialVAE(cfg).double()


def test_full_scale_shapes():
    vae = SpatialVAE(VAEConfig.full_scale(depth=1))
    z = torch.zeros(1, 14, 14, 1024)
    dist = vae.encode(z)
    assert dist.mean.shape == (1, 28, 28, 4) and dist.logvar.shape == (1, 28, 28, 4)
    out = vae.decode(dist.mean)
    assert out.shape == (1, 14, 14, 1024)
    assert out.reshape(1, 196, 1024).shape == (1, 196, 1024)


def test_desk_scale_shapes():
    vae = SpatialVAE(VAEConfig())
    dist = vae.encode(torch.zeros(2, 8, 8, 128))
    assert dist.mean.shape == (2, 16, 16, 4)
    assert vae.decode(dist.mean).shape == (2, 8, 8, 128)


def test_zero_input_zero_final_convs():
    vae = small_vae()
    with torch.no_grad():
        for conv in (vae.conv_mu, vae.conv_logvar):
            conv.weight.zero_()
            conv.bias.zero_()
    dist = vae.encode(torch.zeros(1, 4, 4, 16, dtype=torch.float64))
    assert torch.all(dist.mean == 0) and torch.all(dist.logvar == 0)


def test_encode_rejects_bad_grid():
    with pytest.raises(ValidationError):
        small_vae().encode(torch.zeros(1, 4, 3, 16, dtype=torch.float64))


@pytest.mark.parametrize("grid", [1, 2, 3, 5, 7])
def test_round_trip_geometry(grid):
    cfg = VAEConfig(in_dim=8, grid=grid, hidden=8, width=8, depth=1, heads=2)
    vae = SpatialVAE(cfg)
    z = torch.randn(2, grid, grid, 8)
    rec, dist = vae(z)
    assert rec.shape == z.shape and dist.mean.shape == (2, 2 * grid, 2 * grid, 4)


def test_reparameterize_limits():
    mean = torch.randn(2, 4, 4, 4, dtype=torch.float64)
    dist = LatentDistribution(mean, torch.full_like(mean, -float("inf")))
    assert dist.logvar.min() == -30
    assert (reparameterize(dist, 3) - mean).abs().max() < 1e-6
    dist = LatentDistribution(mean, torch.randn_like(mean))
    assert reparameterize(dist, 3, deterministic=True) is mean
    assert torch.equal(reparameterize(dist, 3), reparameterize(dist, 3))
    assert not torch.equal(reparameterize(dist, 3), reparameterize(dist, 4))


def test_reparameterize_monte_carlo():
    z = torch.zeros(100_000, 1, 1, 1, dtype=torch.float64)
    s = reparameterize(LatentDistribution(z, z.clone()), 0)
    assert abs(s.mean().item()) < 0.02
    assert 0.97 <= s.var().item() <= 1.03


def test_reparameterize_gradient(fd_check):
    g = torch.Generator().manual_seed(5)
    noise = torch.randn(2, 3, 3, 4, generator=g, dtype=torch.float64)
    mean = torch.randn(2, 3, 3, 4, generator=g, dtype=torch.float64)
    logvar = torch.randn(2, 3, 3, 4, generator=g, dtype=torch.float64)
    m, lv = mean.clone().requires_grad_(True), logvar.clone().requires_grad_(True)
    sample = reparameterize(LatentDistribution(m, lv), noise=noise)
    dm, dlv = torch.autograd.grad(sample.sum(), [m, lv])
    assert torch.all(dm == 1)
    assert torch.allclose(dlv, 0.5 * torch.exp(0.5 * logvar) * noise, atol=1e-15)
    weights = torch.randn(2, 3, 3, 4, generator=g, dtype=torch.float64)
    fn = lambda t: (reparameterize(LatentDistribution(t[0], t[1]), noise=noise) * weights).sum()
    assert fd_check(fn, [mean, logvar]) < 1e-4


def test_kl_closed_form_cases():
    z = torch.zeros(3, 4, 4, 4, dtype=torch.float64)
    assert kl_loss(LatentDistribution(z, z.clone())).item() == 0.0
    assert kl_loss(LatentDistribution(z + 1, z.clone())).item() == 0.5


def test_kl_oracle():
    rng = np.random.default_rng(0)
    for _ in range(5):
        m, lv = rng.normal(size=(2, 4, 4, 4)), rng.normal(size=(2, 4, 4, 4)) * 3
        got = kl_loss(LatentDistribution(torch.as_tensor(m), torch.as_tensor(lv))).item()
        assert abs(got - oracles.kl(m, lv)) < 1e-12


def test_kl_nonnegative_bulk():
    g = torch.Generator().manual_seed(0)
    m = torch.randn(10_000, 1, 1, 4, generator=g, dtype=torch.float64) * 2
    lv = torch.randn(10_000, 1, 1, 4, generator=g, dtype=torch.float64) * 3
    per = torch.stack([kl_loss(LatentDistribution(m[k:k + 1], lv[k:k + 1])) for k in range(0, 10_000, 50)])
    elem = 0.5 * (m * m + torch.exp(lv) - 1 - lv)
    assert torch.all(per > 0) and torch.all(elem >= 0)
    # zero only at the prior
    assert torch.all(elem[(m != 0) | (lv != 0)] > 0)


def test_gamma_default():
    assert LossWeights().gamma == 1e-4
    assert inspect.signature(vae_loss).parameters["gamma"].default == 1e-4


def test_overfit_single_grid():
    torch.manual_seed(0)
    vae = SpatialVAE(SMALL)
    z = torch.randn(1, 4, 4, 16)
    opt = torch.optim.Adam(vae.parameters(), 3e-3)
    for _ in range(300):
        rec = vae.decode(vae.encode(z).mean)
        loss = ((rec - z) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        rel = ((vae.decode(vae.encode(z).mean) - z) ** 2).mean() / (z * z).mean()
    assert rel.item() < 1e-2


# -- composite loss -----------------------------------------------------------------


def _setup(pairs, shared=False):
    torch.manual_seed(0)
    enc = Encoder(EncoderConfig(image_size=64, patch_size=8, dim=16, depth=1, heads=2)).double()
    dec = SpatialDecoder(DecoderConfig(enc_dim=16, dim=16, depth=1, heads=2, descriptor_dim=4, patch_size=8,
                                       grid=8, shared_branches=shared)).double()
    head = RgbHead(16, 8).double()
    vae = SpatialVAE(VAEConfig(in_dim=16, grid=8, hidden=16, width=16, depth=1, heads=2)).double()
    batch = PairBatch.from_pairs(pairs, 8, dtype=torch.float64)
    return enc, dec, head, vae, batch


def test_vae_loss_requires_decoder(pairs8):
    _, _, _, vae, batch = _setup(pairs8[:1])
    z = torch.zeros(1, 8, 8, 16, dtype=torch.float64)
    with pytest.raises(ConfigurationError):
        vae_loss(vae, z, z, batch)


def test_vae_loss_additivity(pairs8):
    enc, dec, head, vae, batch = _setup(pairs8[:2])
    vae.attach_decoder(dec, head)
    z_i, z_j = enc(batch.image_i), enc(batch.image_j)
    out = vae_loss(vae, z_i, z_j, batch, gamma=0.3, noise_seed=7)
    assert abs(out["total"].item() - (out["s"] + out["mse"] + 0.3 * out["kl"]).item()) < 1e-12
    # independent recomputation of each term
    d_i, d_j = vae.encode(z_i), vae.encode(z_j)
    r_i, r_j = vae.decode(reparameterize(d_i, 7)), vae.decode(reparameterize(d_j, 8))
    mse = 0.5 * (((r_i - z_i) ** 2).mean() + ((r_j - z_j) ** 2).mean())
    kl = kl_loss(d_i) + kl_loss(d_j)
    s = spatial_loss(*dec(r_i, r_j), batch, rgb_i=head(r_i), rgb_j=head(r_j))["total"]
    assert abs(out["mse"].item() - mse.item()) < 1e-12
    assert abs(out["kl"].item() - kl.item()) < 1e-12
    assert abs(out["s"].item() - s.item()) < 1e-12
    single = vae_loss(vae, z_i, z_j, batch, noise_seed=7, mse_both_views=False)
    assert abs(single["mse"].item() - ((r_i - z_i) ** 2).mean().item()) < 1e-12


def test_vae_loss_zero_state(pairs8):
    """Identity reconstruction, prior latents and a perfect spatial prediction give zero."""
    _, _, _, vae, batch = _setup(pairs8[:1])
    desc = torch.nn.functional.normalize(torch.ones(1, 8, 8, 4, dtype=torch.float64), dim=-1)
    ones = torch.ones(1, 64, 64, dtype=torch.float64)

    class Perfect(torch.nn.Module):
        def forward(self, a, b):
            return (SpatialPrediction(batch.gt_ii, ones, desc), SpatialPrediction(batch.gt_ji, ones, desc))

    z = torch.randn(1, 8, 8, 16, dtype=torch.float64)
    zero_dist = LatentDistribution(torch.zeros(1, 16, 16, 4, dtype=torch.float64),
                                   torch.zeros(1, 16, 16, 4, dtype=torch.float64))
    vae.encode = lambda x: zero_dist
    vae.decode = lambda t: z
    vae.attach_decoder(Perfect())
    out = vae_loss(vae, z, z, batch, lambda1=0.0)
    assert abs(out["total"].item()) < 1e-12


def test_frozen_encoder_is_untouched(pairs8):
    enc, dec, head, vae, batch = _setup(pairs8[:1])
    vae.attach_decoder(dec, head)
    before = [p.detach().clone() for p in enc.parameters()]
    params = list(vae.parameters()) + list(dec.parameters())
    opt = torch.optim.SGD(params, 0.1)
    out = vae_loss(vae, enc(batch.image_i), enc(batch.image_j), batch)
    opt.zero_grad()
    out["total"].backward()
    assert all(p.grad is None for p in enc.parameters())
    opt.step()
    assert all(torch.equal(a, b) for a, b in zip(before, enc.parameters()))


def test_vae_loss_gradient(fd_check, pairs8):
    _, dec, _, vae, batch = _setup(pairs8[:1])
    vae.attach_decoder(dec)
    g = torch.Generator().manual_seed(1)
    z_i = torch.randn(1, 8, 8, 16, generator=g, dtype=torch.float64)
    z_j = torch.randn(1, 8, 8, 16, generator=g, dtype=torch.float64)

    def loss(t):
        swaps = {"conv_mu": ("weight", t[0]), "conv_logvar": ("bias", t[1])}
        saved = {}
        for name, (attr, value) in swaps.items():
            mod = vae.get_submodule(name)
            saved[name] = mod._parameters[attr]
            mod._parameters[attr] = value
        try:
            return vae_loss(vae, z_i, z_j, batch, gamma=0.5)["total"]
        finally:
            for name, (attr, _) in swaps.items():
                vae.get_submodule(name)._parameters[attr] = saved[name]

    assert fd_check(loss, [vae.conv_mu.weight.detach(), vae.conv_logvar.bias.detach()]) < 1e-4


@given(st.integers(0, 10**6))
def test_kl_nonnegative_property(seed):
    rng = np.random.default_rng(seed)
    m, lv = rng.normal(size=(1, 2, 2, 4)) * 3, rng.normal(size=(1, 2, 2, 4)) * 5
    assert kl_loss(LatentDistribution(torch.as_tensor(m), torch.as_tensor(lv))).item() >= 0
