import pytest
import torch
from torch import nn

from conftest import assert_gradient_matches, tiny_model_config
from sprite_story_pkg.encoders import FaceEmbedding, FeatureSequence
from sprite_story_pkg.errors import ValidationError
from sprite_story_pkg.ppr import (
    ConditioningBundle,
    PositionalPerceiverResampler,
    Resampler,
    interpolate_conditioning,
    make_layout,
    resample,
)


def make_refs(count: int, batch: int, dim: int, seed: int = 0):
    generator = torch.Generator().manual_seed(seed)
    return [
        (
            FaceEmbedding(torch.nn.functional.normalize(torch.randn(batch, dim, generator=generator), dim=-1)),
            FeatureSequence(torch.randn(batch, 16, dim, generator=generator), role="character"),
        )
        for _ in range(count)
    ]


@pytest.mark.parametrize("num_characters", [1, 2])
@pytest.mark.parametrize("tokens", [2, 4, 8])
@pytest.mark.parametrize("dim", [16, 64])
def test_conditioning_rows_and_layout(num_characters, tokens, dim):
    config = tiny_model_config(face_dim=dim, encoder_dim=dim, cond_dim=dim, num_tokens=tokens)
    ppr = PositionalPerceiverResampler(config)
    bundle = ppr.build_conditioning(make_refs(num_characters, 3, dim))
    assert bundle.c_i.shape == (3, (num_characters + 1) * tokens, dim)
    assert [r.name for r in bundle.layout] == ["background"] + [f"character_{k}" for k in range(1, num_characters + 1)]
    assert [(r.start, r.stop) for r in bundle.layout] == [
        (k * tokens, (k + 1) * tokens) for k in range(num_characters + 1)
    ]
    assert torch.equal(bundle.region(0)[0], ppr.e_bg)


def test_resampler_output_arity():
    r = Resampler(in_dim=16, dim=16, num_latents=4, depth=1, dim_head=8, heads=2)
    assert r(torch.randn(2, 1, 16)).shape == (2, 4, 16)
    assert r(torch.randn(2, 16, 16)).shape == (2, 4, 16)
    assert resample(r, FaceEmbedding(torch.randn(3, 16))).shape == (3, 4, 16)
    with pytest.raises(ValidationError):
        r(torch.randn(2, 0, 16))
    with pytest.raises(ValidationError):
        r(torch.randn(2, 3, 8))


def test_resampler_gradient_matches_finite_differences():
    torch.manual_seed(0)
    r = Resampler(in_dim=4, dim=8, num_latents=2, depth=1, dim_head=4, heads=2).double()
    x = torch.randn(1, 4, 4, dtype=torch.float64, requires_grad=True)
    assert_gradient_matches(lambda: r(x).pow(2).sum(), x)


def test_fuse_character_identity_harness():
    ppr = PositionalPerceiverResampler(tiny_model_config())
    dim = ppr.dim
    ppr.fuse_mlp = nn.Sequential(nn.Linear(2 * dim, dim, bias=False))
    with torch.no_grad():
        ppr.e_pos.zero_()
        ppr.fuse_mlp[0].weight.zero_()
        ppr.fuse_mlp[0].weight[:, :dim] = torch.eye(dim)
    e1, e2 = torch.randn(1, 2, dim), torch.randn(1, 2, dim)
    assert torch.allclose(ppr.fuse_character(e1, e2, 0), e1, atol=1e-6)


def test_fuse_character_matches_matrix_oracle():
    torch.manual_seed(1)
    ppr = PositionalPerceiverResampler(tiny_model_config())
    e1, e2 = torch.randn(1, 2, 16), torch.randn(1, 2, 16)
    first, second = ppr.fuse_mlp[0], ppr.fuse_mlp[2]
    x = torch.cat([e1, e2], dim=-1) + ppr.e_pos[1]
    hidden = torch.nn.functional.gelu(x @ first.weight.t() + first.bias)
    expected = hidden @ second.weight.t() + second.bias
    assert torch.allclose(ppr.fuse_character(e1, e2, 1), expected, atol=1e-6)
    assert not torch.allclose(ppr.fuse_character(e1, e2, 0), ppr.fuse_character(e1, e2, 1))
    with pytest.raises(ValidationError):
        ppr.fuse_character(e1, e2, 2)


def test_zero_character_only_acts_through_the_character_path():
    torch.manual_seed(2)
    ppr = PositionalPerceiverResampler(tiny_model_config())
    refs = make_refs(2, 2, 16)
    default = ppr.build_conditioning(refs)
    zeroed = ppr.build_conditioning(refs, zero_character=True)
    assert torch.equal(default.region(0), zeroed.region(0))
    assert not torch.allclose(default.region(1), zeroed.region(1))

    with torch.no_grad():
        ppr.fuse_mlp[0].weight[:, 16:] = 0.0
    assert torch.equal(ppr.build_conditioning(refs).c_i, ppr.build_conditioning(refs, zero_character=True).c_i)

    per_sample = ppr.build_conditioning(refs, zero_character=torch.tensor([True, False]))
    assert per_sample.c_i.shape == default.c_i.shape


def test_background_rows_ignore_the_references():
    torch.manual_seed(3)
    ppr = PositionalPerceiverResampler(tiny_model_config())
    base = ppr.build_conditioning(make_refs(2, 2, 16, seed=0))
    tokens = ppr.tokens_per_region
    for seed in (1, 2):
        other = ppr.build_conditioning(make_refs(2, 2, 16, seed=seed))
        assert torch.equal(other.c_i[:, :tokens], base.c_i[:, :tokens])
        assert not torch.allclose(other.c_i[:, tokens:], base.c_i[:, tokens:])
    single = ppr.build_conditioning(make_refs(1, 2, 16, seed=4))
    assert torch.equal(single.c_i[:, :tokens], base.c_i[:, :tokens])


def test_swapping_references_and_slots_swaps_the_blocks():
    torch.manual_seed(4)
    ppr = PositionalPerceiverResampler(tiny_model_config())
    refs = make_refs(2, 3, 16, seed=5)
    tokens = ppr.tokens_per_region
    before = ppr.build_conditioning(refs)

    with torch.no_grad():
        ppr.e_pos.copy_(ppr.e_pos[[1, 0]].clone())
    after = ppr.build_conditioning(list(reversed(refs)))

    assert torch.equal(after.region(0), before.region(0))
    assert torch.equal(after.region(1), before.region(2))
    assert torch.equal(after.region(2), before.region(1))
    assert after.c_i.shape == before.c_i.shape and after.layout == before.layout

    # without the slot swap only the position embedding tells the blocks apart
    with torch.no_grad():
        ppr.e_pos.copy_(ppr.e_pos[[1, 0]].clone())
    unswapped = ppr.build_conditioning(list(reversed(refs)))
    assert not torch.allclose(unswapped.region(1), before.region(2))


def test_build_conditioning_errors():
    ppr = PositionalPerceiverResampler(tiny_model_config())
    with pytest.raises(ValidationError):
        ppr.build_conditioning([])
    with pytest.raises(ValidationError, match="at most 2"):
        ppr.build_conditioning(make_refs(3, 1, 16))


def test_interpolation_endpoints_and_symmetry():
    layout = make_layout(1, 2)
    a = ConditioningBundle(torch.randn(1, 4, 8), layout, 1, 2, 8)
    b = ConditioningBundle(torch.randn(1, 4, 8), layout, 1, 2, 8)
    assert torch.equal(interpolate_conditioning(a, b, 0.0).c_i, a.c_i)
    assert torch.equal(interpolate_conditioning(a, b, 1.0).c_i, b.c_i)
    negated = a.with_tokens(-a.c_i)
    assert torch.allclose(interpolate_conditioning(a, negated, 0.5).c_i, torch.zeros(1, 4, 8))
    with pytest.raises(ValidationError):
        interpolate_conditioning(a, b, 1.5)
    with pytest.raises(ValidationError):
        interpolate_conditioning(a, ConditioningBundle(torch.randn(1, 6, 8), make_layout(2, 2), 2, 2, 8), 0.5)


def test_bundle_rejects_inconsistent_shapes():
    with pytest.raises(ValidationError):
        ConditioningBundle(torch.randn(1, 5, 8), make_layout(1, 2), 1, 2, 8)
    bundle = ConditioningBundle(torch.randn(1, 4, 8), make_layout(1, 2), 1, 2, 8)
    assert bundle.digest() == bundle.with_tokens(bundle.c_i.clone()).digest()
    assert not bundle.zeros_like().c_i.any()
