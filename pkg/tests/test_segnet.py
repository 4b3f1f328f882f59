from __future__ import annotations

import numpy as np
import pytest
import torch

from kerneladapt.segnet import (
    DECODER_SITES,
    ENCODER_SITES,
    ArchConfig,
    DomainDiscriminator,
    FeatureAggregator,
    ModelBundle,
    ResUNet,
    TapSet,
    aggregate_features,
    build_adversarial_heads,
    grad_reverse,
    load_checkpoint,
    save_checkpoint,
)

torch.manual_seed(0)


@pytest.fixture(scope="module")
def net() -> ResUNet:
    model = ResUNet()
    model.eval()
    return model


def test_forward_shapes_and_tap_arithmetic(net):
    x = torch.randn(2, 1, 128, 128)
    with torch.no_grad():
        logits, taps = net(x)
    assert logits.shape == (2, 1, 128, 128)
    assert taps.sites == list(ENCODER_SITES) + list(DECODER_SITES) + ["output"]
    # encoder halves resolution and doubles width per stage
    for i, site in enumerate(ENCODER_SITES):
        t = taps.get(site)
        assert t.shape == (2, 16 * 2**i, 128 // 2**i, 128 // 2**i)
    # decoder mirrors it back up
    for site in DECODER_SITES:
        level = int(site.split("_")[1])
        t = taps.get(site)
        assert t.shape == (2, 16 * 2**level, 128 // 2**level, 128 // 2**level)
    assert taps.get("output").shape == (2, 1, 128, 128)


def test_forward_rejects_indivisible_input(net):
    with pytest.raises(ValueError):
        net(torch.randn(1, 1, 48, 50))
    with pytest.raises(ValueError):
        net(torch.randn(1, 1, 30, 30))


def test_encode_matches_full_forward(net):
    x = torch.randn(2, 1, 64, 64)
    with torch.no_grad():
        feats = net.encode(x)
        _, taps = net(x)
    assert len(feats) == 5
    for f, site in zip(feats, ENCODER_SITES):
        assert torch.equal(f, taps.get(site))


def test_eval_forward_deterministic(net):
    x = torch.randn(1, 1, 64, 64)
    with torch.no_grad():
        a, _ = net(x)
        b, _ = net(x)
    assert torch.equal(a, b)


def test_residual_blocks_carry_identity():
    """Zeroing every conv leaves each residual stage as (projected) identity,
    so information flows through the skip path by construction."""
    net = ResUNet()
    for name, p in net.named_parameters():
        if "conv" in name or "head" in name:
            torch.nn.init.zeros_(p)
    net.eval()
    x = torch.randn(1, 1, 32, 32)
    with torch.no_grad():
        logits, _ = net(x)
    assert torch.all(logits == 0.0)


def test_tapset_selection_and_validation():
    t1 = torch.zeros(1, 2, 4, 4)
    taps = TapSet([("encoder_0", t1), ("decoder_0", t1), ("output", t1)])
    assert taps.select("encoder").sites == ["encoder_0"]
    assert taps.select("decoder").sites == ["decoder_0"]
    with pytest.raises(ValueError):
        taps.select("bottleneck")
    with pytest.raises(KeyError):
        taps.get("encoder_9")
    with pytest.raises(ValueError):
        TapSet([("a", t1), ("a", t1)])


def test_grad_reverse_identity_forward_and_scaled_negative_backward():
    x = torch.tensor([3.0], requires_grad=True)
    y = grad_reverse(x, 1.0) * 4.0  # d(out)/dx = 4, reversed -> -4
    y.backward()
    assert x.grad.item() == pytest.approx(-4.0, abs=1e-6)

    # chain with an outer factor 3: grad = -(lam) * 3 * 4 = -12 at lam = 1
    x = torch.tensor([1.0], requires_grad=True)
    out = 3.0 * (grad_reverse(x * 4.0, 1.0))
    out.backward()
    assert x.grad.item() == pytest.approx(-12.0, abs=1e-6)

    x = torch.tensor([2.0], requires_grad=True)
    grad_reverse(x, 0.0).sum().backward()
    assert x.grad.item() == 0.0

    x = torch.tensor([2.0], requires_grad=True)
    grad_reverse(x, 0.25).sum().backward()
    assert x.grad.item() == pytest.approx(-0.25)

    with pytest.raises(ValueError):
        grad_reverse(torch.zeros(1), -0.5)


def test_grad_reverse_forward_is_exact_identity():
    x = torch.randn(3, 4)
    assert torch.equal(grad_reverse(x.clone().requires_grad_(), 0.7).detach(), x)


def test_aggregator_channel_arithmetic(net):
    x = torch.randn(2, 1, 64, 64)
    with torch.no_grad():
        _, taps = net(x)
    agg, disc = build_adversarial_heads(net, "encoder")
    fused = aggregate_features(taps, "encoder", agg)
    # five encoder taps, 32 projection channels each, on the coarsest grid
    assert fused.shape == (2, 5 * 32, 4, 4)
    agg_d, _ = build_adversarial_heads(net, "decoder")
    fused_d = aggregate_features(taps, "decoder", agg_d)
    assert fused_d.shape == (2, 4 * 32, 8, 8)
    with torch.no_grad():
        score = disc(fused)
    assert score.shape == (2,)


def test_aggregator_single_tap():
    t = torch.randn(3, 8, 16, 16)
    agg = FeatureAggregator(["decoder_0"], [8])
    out = agg(TapSet([("decoder_0", t)]))
    assert out.shape == (3, 32, 16, 16)
    with pytest.raises(ValueError):
        FeatureAggregator(["a", "b"], [8])


def test_discriminator_learns_a_separable_toy_problem():
    """200 steps on blobs with different means must reach high accuracy;
    guards against dead gradients anywhere in the head stack."""
    torch.manual_seed(1)
    disc = DomainDiscriminator(in_channels=4)
    opt = torch.optim.Adam(disc.parameters(), lr=1e-3)
    bce = torch.nn.BCEWithLogitsLoss()
    for _ in range(200):
        a = torch.randn(8, 4, 16, 16) - 0.5
        b = torch.randn(8, 4, 16, 16) + 0.5
        logits = disc(torch.cat([a, b]))
        labels = torch.cat([torch.zeros(8), torch.ones(8)])
        loss = bce(logits, labels)
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        a = torch.randn(64, 4, 16, 16) - 0.5
        b = torch.randn(64, 4, 16, 16) + 0.5
        pred = torch.cat([disc(a), disc(b)]) > 0.0
        truth = torch.cat([torch.zeros(64), torch.ones(64)]).bool()
    assert (pred == truth).float().mean().item() > 0.95


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    torch.manual_seed(2)
    net = ResUNet()
    agg, disc = build_adversarial_heads(net, "decoder")
    bundle = ModelBundle(segmenter=net, aggregator=agg, discriminator=disc)
    bundle.eval()
    stem = tmp_path / "ck"
    save_checkpoint(
        stem,
        bundle,
        iteration=17,
        rng_state={"torch": torch.get_rng_state()},
        extra={"site_filter": "decoder", "method": "dann_dec"},
    )
    loaded, manifest = load_checkpoint(stem)
    assert manifest["iteration"] == 17
    assert manifest["extra"]["method"] == "dann_dec"
    sd_a = bundle.segmenter.state_dict()
    sd_b = loaded.segmenter.state_dict()
    assert sorted(sd_a) == sorted(sd_b)
    for key in sd_a:
        assert torch.equal(sd_a[key].float(), sd_b[key].float()), key
    x = torch.randn(1, 1, 48, 48)
    with torch.no_grad():
        ya, taps_a = bundle.segmenter(x)
        yb, taps_b = loaded.segmenter(x)
        fa = aggregate_features(taps_a, "decoder", bundle.aggregator)
        fb = aggregate_features(taps_b, "decoder", loaded.aggregator)
        da = bundle.discriminator(fa)
        db = loaded.discriminator(fb)
    assert torch.equal(ya, yb)
    assert torch.equal(da, db)
    # a resave of the loaded bundle reproduces the binary exactly
    save_checkpoint(tmp_path / "ck2", loaded, iteration=17, rng_state=None, extra={"site_filter": "decoder"})
    assert (tmp_path / "ck.bin").read_bytes() == (tmp_path / "ck2.bin").read_bytes()


def test_checkpoint_restores_rng_state(tmp_path):
    net = ResUNet()
    bundle = ModelBundle(segmenter=net)
    torch.manual_seed(33)
    state = torch.get_rng_state()
    expected = torch.randn(4)
    save_checkpoint(tmp_path / "ck", bundle, iteration=0, rng_state={"torch": state})
    _, manifest = load_checkpoint(tmp_path / "ck")
    torch.set_rng_state(manifest["rng_state"]["torch"])
    assert torch.equal(torch.randn(4), expected)
