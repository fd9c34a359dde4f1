import json
import math

import numpy as np
import pytest
import torch

from rectiflow import backbone as bb
from rectiflow.errors import ConfigError, DomainError, IntegrityError, ShapeError


def test_embedding_values():
    e0 = bb.sinusoidal_embedding(torch.tensor(0.0), 16)
    assert torch.equal(e0[:8], torch.zeros(8)) and torch.equal(e0[8:], torch.ones(8))
    ts = torch.linspace(0, 1, 101)
    emb = bb.sinusoidal_embedding(ts, 32)
    assert emb.shape == (101, 32)
    assert emb.abs().max() <= 1.0
    d = bb.sinusoidal_embedding(torch.tensor(0.1), 128) - bb.sinusoidal_embedding(torch.tensor(0.9), 128)
    assert d.norm() > 0


def test_embedding_first_frequency_matches_hand_value():
    # the lowest index uses frequency 1 applied to 1000 * t
    e = bb.sinusoidal_embedding(torch.tensor([0.0005], dtype=torch.float64), 8)
    assert e[0, 0].item() == pytest.approx(math.sin(0.5), abs=1e-15)
    assert e[0, 4].item() == pytest.approx(math.cos(0.5), abs=1e-15)


def test_embedding_rejects_odd_dim():
    with pytest.raises(ConfigError):
        bb.sinusoidal_embedding(torch.tensor(0.5), 7)


def test_param_counts():
    n = bb.param_count(bb.preset_config("paper_unet"))
    assert abs(n - 4.5e6) <= 0.15 * 4.5e6
    assert bb.param_count(bb.preset_config("tiny_unet")) < 300_000
    assert bb.param_count(bb.preset_config("paper_unet")) == 4_738_177


def test_presets_match_architecture_table():
    c = bb.preset_config("paper_unet")
    assert c.in_shape == (1, 32, 32)
    assert tuple(c.channel_multipliers) == (64, 128, 256)
    assert tuple(c.attention_resolutions) == (16,)
    assert c.time_embed_dim == 128 and c.time_hidden == 256
    toy = bb.preset_config("toy_mlp")
    assert toy.in_shape == (2,) and not toy.attention_resolutions


def test_unknown_preset_and_config_keys():
    with pytest.raises(ConfigError):
        bb.preset_config("resnet")
    d = bb.preset_config("toy_mlp").to_dict()
    assert bb.BackboneConfig.from_dict(d) == bb.preset_config("toy_mlp")
    with pytest.raises(ConfigError):
        bb.BackboneConfig.from_dict({**d, "dropout": 0.1})


def test_same_seed_same_init():
    a = bb.build(bb.preset_config("tiny_unet", seed=3))
    b = bb.build(bb.preset_config("tiny_unet", seed=3))
    c = bb.build(bb.preset_config("tiny_unet", seed=4))
    for (n, p), (_, q) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(p, q), n
    assert not all(torch.equal(p, q) for p, q in zip(a.state_dict().values(), c.state_dict().values()))


def test_output_layer_starts_at_zero():
    model = bb.build(bb.preset_config("toy_mlp"))
    assert torch.equal(bb.forward(model, torch.randn(5, 2), 0.3), torch.zeros(5, 2))


def test_shapes():
    unet = bb.build(bb.preset_config("paper_unet"))
    assert bb.forward(unet, torch.randn(4, 1, 32, 32), torch.rand(4)).shape == (4, 1, 32, 32)
    mlp = bb.build(bb.preset_config("toy_mlp"))
    assert bb.forward(mlp, torch.randn(9, 2), 0.5).shape == (9, 2)


def test_forward_input_checks():
    mlp = bb.build(bb.preset_config("toy_mlp"))
    with pytest.raises(ShapeError):
        bb.forward(mlp, torch.randn(3, 3), 0.5)
    with pytest.raises(DomainError):
        bb.forward(mlp, torch.tensor([[float("nan"), 0.0]]), 0.5)


@pytest.mark.parametrize("preset", ["tiny_unet", "toy_mlp"])
def test_no_cross_batch_leakage(preset):
    conf = bb.preset_config(preset)
    model = bb.randomize_output_layer(bb.build(conf), 1)
    x = torch.randn(3, *conf.in_shape)
    t = torch.tensor([0.1, 0.5, 0.9])
    with torch.no_grad():
        single = model(x, t)
        double = model(torch.cat([x, x]), torch.cat([t, t]))
    assert torch.allclose(double[:3], single, atol=1e-5)
    assert torch.allclose(double[3:], single, atol=1e-5)


def test_time_sensitivity_paper_unet():
    # the output layer is zero at init; randomize it so the conditioning path is observable
    model = bb.randomize_output_layer(bb.build(bb.preset_config("paper_unet", seed=2)), 5)
    x = torch.randn(2, 1, 32, 32)
    with torch.no_grad():
        a = bb.forward(model, x, 0.1)
        b = bb.forward(model, x, 0.9)
    assert (a - b).abs().max() > 1e-4


def test_attention_permutation_equivariance():
    torch.manual_seed(0)
    block = bb.AttentionBlock(8, groups=1)
    x = torch.randn(2, 8, 4, 4)
    perm = torch.randperm(16)
    xp = x.reshape(2, 8, 16)[:, :, perm].reshape(2, 8, 4, 4)
    with torch.no_grad():
        y = block(x).reshape(2, 8, 16)[:, :, perm]
        yp = block(xp).reshape(2, 8, 16)
    assert torch.allclose(y, yp, atol=1e-5)


def test_attention_identity_projections_oracle():
    c = 4
    block = bb.AttentionBlock(c, groups=1).double()
    with torch.no_grad():
        block.qkv.weight.copy_(torch.cat([torch.eye(c)] * 3)[:, :, None, None])
        block.qkv.bias.zero_()
        block.proj.weight.copy_(torch.eye(c)[:, :, None, None])
        block.proj.bias.zero_()
        block.norm.weight.fill_(1.0)
        block.norm.bias.zero_()
    x = torch.randn(1, c, 3, 3, dtype=torch.float64)
    with torch.no_grad():
        out = block(x)
    n = block.norm(x).detach().reshape(c, 9).numpy()
    scores = n.T @ n / math.sqrt(c)
    w = np.exp(scores - scores.max(1, keepdims=True))
    w /= w.sum(1, keepdims=True)
    expected = x.reshape(c, 9).numpy() + (w @ n.T).T
    assert np.allclose(out.reshape(c, 9).numpy(), expected, atol=1e-12)


def test_save_load_round_trip(tmp_path):
    conf = bb.preset_config("tiny_unet", seed=9)
    model = bb.randomize_output_layer(bb.build(conf), 2)
    bb.save(model, tmp_path / "ck", paradigm="diffusion", schedule={"T": 1000})
    loaded, ckpt = bb.load_model(tmp_path / "ck")
    assert ckpt.paradigm == "diffusion" and ckpt.config == conf
    for (n, p), (_, q) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(p, q), n
    x = torch.randn(2, 1, 32, 32)
    with torch.no_grad():
        assert torch.equal(model(x, torch.rand(2).mul(0) + 0.3), loaded(x, torch.full((2,), 0.3)))
    assert (tmp_path / "ck" / "params.bin").stat().st_size == 4 * bb.param_count(conf)


def test_manifest_spans_cover_blob(tmp_path):
    bb.save(bb.build(bb.preset_config("toy_mlp")), tmp_path / "ck")
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    spans = sorted((e["offset"], e["nbytes"]) for e in manifest["entries"])
    pos = 0
    for off, nbytes in spans:
        assert off == pos
        pos += nbytes
    assert pos == (tmp_path / "ck" / "params.bin").stat().st_size


def test_truncated_blob(tmp_path):
    bb.save(bb.build(bb.preset_config("toy_mlp")), tmp_path / "ck")
    blob = tmp_path / "ck" / "params.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(IntegrityError):
        bb.load(tmp_path / "ck")


def test_overlapping_spans_rejected(tmp_path):
    bb.save(bb.build(bb.preset_config("toy_mlp")), tmp_path / "ck")
    mpath = tmp_path / "ck" / "manifest.json"
    manifest = json.loads(mpath.read_text())
    manifest["entries"][1]["offset"] -= 4
    mpath.write_text(json.dumps(manifest))
    with pytest.raises(IntegrityError) as info:
        bb.load(tmp_path / "ck")
    assert info.value.entry is not None


def test_flops_scale_with_architecture():
    assert bb.flops_per_forward(bb.preset_config("paper_unet")) > bb.flops_per_forward(bb.preset_config("tiny_unet"))
    toy = bb.preset_config("toy_mlp")
    # toy_mlp is all Linear layers: MACs equal the weight count
    weights = sum(p.numel() for n, p in bb.build(toy).named_parameters() if n.endswith("weight"))
    assert bb.flops_per_forward(toy) == weights
