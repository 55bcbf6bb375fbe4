import pytest
import torch
from pydantic import ValidationError

from app.core.errors import ConfigError, ShapeError
from app.diffusion import Rng, make_schedule, training_loss
from app.models import UNet, build_unet, forward, parameter_count, preset, self_attention_block, timestep_embedding, weight_shape_table
from app.models.unet import AttentionWeights, attention_probabilities, init_weights
from app.tensor.gradcheck import gradient_check
from tests.conftest import make_tiny_unet_config


def _inputs(n=2, size=16, dtype=torch.float32):
    rng = Rng(9)
    return rng.split("x").normal((n, 3, size, size), dtype), rng.split("y").normal((n, 1, size, size), dtype)


def _randomize_output(model: UNet, seed: int = 1) -> None:
    rng = Rng(seed)
    with torch.no_grad():
        for name, p in model.out_conv.named_parameters():
            p.copy_(rng.split(name).normal(p.shape, p.dtype) * 0.1)


# ---------------------------------------------------------------------------
# Time embedding
# ---------------------------------------------------------------------------

def test_timestep_embedding_at_zero():
    emb = timestep_embedding(0, 8)
    torch.testing.assert_close(emb, torch.tensor([0.0] * 4 + [1.0] * 4))


def test_timestep_embeddings_are_distinct():
    emb = timestep_embedding(torch.arange(0, 101), 16, T=100)
    assert emb.shape == (101, 16)
    dists = torch.cdist(emb.double(), emb.double())
    dists.fill_diagonal_(1.0)
    assert float(dists.min()) > 1e-4


def test_timestep_embedding_validates():
    with pytest.raises(ShapeError):
        timestep_embedding(1, 7)
    with pytest.raises(ShapeError):
        timestep_embedding(torch.tensor([5, 200]), 8, T=100)


# ---------------------------------------------------------------------------
# Configs and construction
# ---------------------------------------------------------------------------

def test_presets_differ_only_in_attention_placement():
    cfg_i, cfg_ii = preset("I"), preset("II")
    assert cfg_i.attention_levels == [4, 8, 16]
    assert cfg_ii.attention_levels == [2, 4, 8, 16]
    assert cfg_i.model_dump(exclude={"attention_levels"}) == cfg_ii.model_dump(exclude={"attention_levels"})


def test_preset_attention_factors_from_module_tree():
    with torch.device("meta"):
        factors_i = set(UNet(preset("I", 32)).attention_factors())
        factors_ii = set(UNet(preset("II", 32)).attention_factors())
    assert 2 not in factors_i
    assert 2 in factors_ii
    assert factors_ii - factors_i == {2}


def test_preset_rejects_bad_size_and_variant():
    with pytest.raises(ConfigError):
        preset("II", 40)
    with pytest.raises(ConfigError):
        preset("III")


def test_config_rejects_attention_beyond_token_budget():
    with pytest.raises(ValidationError):
        make_tiny_unet_config(image_size=128, attention_levels=[1], max_attention_tokens=4096)


def test_config_rejects_indivisible_geometry():
    with pytest.raises(ValidationError):
        make_tiny_unet_config(image_size=18)
    with pytest.raises(ValidationError):
        make_tiny_unet_config(groupnorm_groups=3)
    with pytest.raises(ValidationError):
        make_tiny_unet_config(attention_levels=[8])


def test_weight_shape_table_matches_model(tiny_unet_config, tiny_model):
    table = weight_shape_table(tiny_unet_config)
    assert table == {name: tuple(p.shape) for name, p in tiny_model.named_parameters()}
    assert parameter_count(tiny_unet_config) == sum(p.numel() for p in tiny_model.parameters())


def test_weight_names_are_canonical(tiny_unet_config):
    table = weight_shape_table(tiny_unet_config)
    assert table["down.1.0.attn.qkv_weight"] == (48, 16)
    assert table["conv_in.weight"] == (8, 4, 3, 3)
    assert "middle.attn.proj_weight" in table
    assert "up.0.upsample.weight" in table
    assert table["out_conv.weight"] == (1, 8, 3, 3)


def test_build_is_deterministic(tiny_unet_config):
    a = build_unet(tiny_unet_config, Rng(5))
    b = build_unet(tiny_unet_config, Rng(5))
    c = build_unet(tiny_unet_config, Rng(6))
    pa, pb, pc = dict(a.named_parameters()), dict(b.named_parameters()), dict(c.named_parameters())
    assert all(torch.equal(pa[k], pb[k]) for k in pa)
    assert not torch.equal(pa["conv_in.weight"], pc["conv_in.weight"])


def test_init_values(tiny_model):
    params = dict(tiny_model.named_parameters())
    assert torch.all(params["out_conv.weight"] == 0)
    assert torch.all(params["out_norm.scale"] == 1)
    assert torch.all(params["conv_in.bias"] == 0)
    bound = 1.0 / (4 * 9) ** 0.5
    assert float(params["conv_in.weight"].abs().max()) <= bound


def test_init_weights_reproduces_build(tiny_unet_config):
    model = build_unet(tiny_unet_config, Rng(3))
    fresh = UNet(tiny_unet_config)
    init_weights(fresh, Rng(3))
    assert torch.equal(dict(model.named_parameters())["down.0.0.res.conv1.weight"],
                       dict(fresh.named_parameters())["down.0.0.res.conv1.weight"])


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def test_forward_shape_and_zero_initial_output(tiny_model):
    x, y = _inputs()
    out = forward(tiny_model, x, y, torch.tensor([1, 10]))
    assert out.shape == (2, 1, 16, 16)
    assert torch.all(out == 0)


def test_forward_accepts_scalar_timestep(tiny_model):
    _randomize_output(tiny_model)
    x, y = _inputs()
    torch.testing.assert_close(tiny_model(x, y, 4), tiny_model(x, y, torch.tensor([4, 4])))


def test_forward_depends_on_source_and_timestep(tiny_model):
    _randomize_output(tiny_model)
    x, y = _inputs()
    base = tiny_model(x, y, 3)
    assert not torch.allclose(base, tiny_model(-x, y, 3))
    assert not torch.allclose(base, tiny_model(x, y, 7))


@pytest.mark.parametrize("x_shape,y_shape", [
    ((1, 3, 16, 16), (1, 1, 8, 8)),
    ((1, 1, 16, 16), (1, 1, 16, 16)),
    ((1, 3, 18, 18), (1, 1, 18, 18)),
    ((2, 3, 16, 16), (1, 1, 16, 16)),
])
def test_forward_rejects_bad_shapes(tiny_model, x_shape, y_shape):
    with pytest.raises(ShapeError):
        tiny_model(torch.zeros(x_shape), torch.zeros(y_shape), 1)


def test_forward_guards_attention_token_count(tiny_model):
    with pytest.raises(ConfigError):
        tiny_model(torch.zeros(1, 3, 32, 32), torch.zeros(1, 1, 32, 32), 1)


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------

def _attention_weights(c: int, seed: int = 0) -> AttentionWeights:
    rng = Rng(seed)
    return AttentionWeights(
        qkv_weight=rng.split("qkv").normal((3 * c, c), torch.float64) * 0.3,
        qkv_bias=rng.split("qkv_b").normal((3 * c,), torch.float64) * 0.1,
        proj_weight=rng.split("proj").normal((c, c), torch.float64) * 0.3,
        proj_bias=rng.split("proj_b").normal((c,), torch.float64) * 0.1,
    )


def test_attention_with_zero_projection_is_identity():
    w = _attention_weights(4)
    w.proj_weight = torch.zeros_like(w.proj_weight)
    w.proj_bias = torch.zeros_like(w.proj_bias)
    x = torch.randn(2, 4, 3, 3, dtype=torch.float64)
    torch.testing.assert_close(self_attention_block(x, 2, w), x)


def test_attention_probabilities_are_row_stochastic():
    x = torch.randn(1, 4, 3, 3, dtype=torch.float64)
    probs = attention_probabilities(x, 2, _attention_weights(4))
    assert probs.shape == (1, 2, 9, 9)
    torch.testing.assert_close(probs.sum(dim=-1), torch.ones(1, 2, 9, dtype=torch.float64))


def test_attention_is_permutation_equivariant_over_tokens():
    w = _attention_weights(4)
    x = torch.randn(1, 4, 1, 6, dtype=torch.float64)
    perm = torch.tensor([3, 0, 5, 1, 4, 2])
    out = self_attention_block(x, 2, w)
    out_perm = self_attention_block(x[..., perm], 2, w)
    torch.testing.assert_close(out_perm, out[..., perm])


def test_attention_rejects_indivisible_heads():
    with pytest.raises(ShapeError):
        self_attention_block(torch.zeros(1, 6, 2, 2), 4, _attention_weights(6))


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def test_every_parameter_receives_gradient(tiny_model):
    _randomize_output(tiny_model)
    x, y0 = _inputs()
    s = make_schedule("cosine", 10)
    eps = Rng(2).normal(y0.shape)
    loss = training_loss(tiny_model, x, y0, torch.tensor([2, 9]), eps, s)
    loss.backward()
    dead = [name for name, p in tiny_model.named_parameters() if p.grad is None or float(p.grad.abs().sum()) == 0.0]
    assert dead == []


def test_loss_gradient_matches_finite_differences():
    cfg = make_tiny_unet_config(
        image_size=8, base_channels=4, heads=1, groupnorm_groups=2, time_embed_dim=8,
    )
    model = build_unet(cfg, Rng(0)).double()
    _randomize_output(model)
    x, y0 = _inputs(n=1, size=8, dtype=torch.float64)
    eps = Rng(3).normal(y0.shape, torch.float64)
    s = make_schedule("cosine", 10)
    t = torch.tensor([6])

    checked = ["conv_in.weight", "down.1.0.attn.qkv_weight", "down.1.0.res.emb_proj.weight",
               "middle.res1.conv2.weight", "up.0.blocks.0.res.norm1.scale",
               "time_mlp.lin1.weight", "out_conv.weight"]
    params = dict(model.named_parameters())
    inputs = [params[name] for name in checked]
    errors = gradient_check(lambda: training_loss(model, x, y0, t, eps, s), inputs, h=1e-6, max_entries=6, seed=1)
    assert max(errors) < 1e-2, dict(zip(checked, errors))


# ---------------------------------------------------------------------------
# Attention placement A/B
# ---------------------------------------------------------------------------

def _shared_weight_pair():
    with_half_res = build_unet(make_tiny_unet_config(attention_levels=[2, 4]), Rng(4))
    without = UNet(make_tiny_unet_config(attention_levels=[4]))
    donor = dict(with_half_res.named_parameters())
    with torch.no_grad():
        for name, p in without.named_parameters():
            p.copy_(donor[name])
    _randomize_output(with_half_res)
    _randomize_output(without)
    return with_half_res, without


def test_half_resolution_attention_is_the_only_extra_weight():
    with_half_res, without = _shared_weight_pair()
    extra = set(dict(with_half_res.named_parameters())) - set(dict(without.named_parameters()))
    assert extra
    assert all(name.startswith(("down.1.", "up.1.")) and ".attn." in name for name in extra)
    assert set(dict(without.named_parameters())) <= set(dict(with_half_res.named_parameters()))


def test_half_resolution_attention_changes_output_with_shared_weights():
    with_half_res, without = _shared_weight_pair()
    x, y = _inputs()
    a, b = with_half_res(x, y, 5), without(x, y, 5)
    assert a.shape == b.shape == (2, 1, 16, 16)
    assert not torch.allclose(a, b)


def test_silenced_half_resolution_attention_matches_model_without_it():
    with_half_res, without = _shared_weight_pair()
    with torch.no_grad():
        for name, p in with_half_res.named_parameters():
            if name.startswith(("down.1.", "up.1.")) and name.endswith(("attn.proj_weight", "attn.proj_bias")):
                p.zero_()
    x, y = _inputs()
    torch.testing.assert_close(with_half_res(x, y, 5), without(x, y, 5))
