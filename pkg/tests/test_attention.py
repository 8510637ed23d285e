import math

import pytest
import torch

from conftest import assert_gradient_matches, row_stochastic
from sprite_story_pkg.attention import (
    DecoupledCrossAttention,
    LoRADelta,
    LoRALinear,
    aggregate_region_maps,
    apply_lora,
    attend,
)
from sprite_story_pkg.errors import NumericFailure, ValidationError
from sprite_story_pkg.ppr import ConditioningBundle, make_layout


def bundle_of(c_i: torch.Tensor, num_characters: int, tokens: int) -> ConditioningBundle:
    return ConditioningBundle(c_i, make_layout(num_characters, tokens), num_characters, tokens, c_i.shape[-1])


def random_layer(seed: int = 0, dtype=torch.float32, lora_rank: int = 2) -> DecoupledCrossAttention:
    torch.manual_seed(seed)
    layer = DecoupledCrossAttention(8, 6, 6, heads=2, head_dim=4, lora_rank=lora_rank)
    with torch.no_grad():
        for linear in layer.modules():
            if isinstance(linear, LoRADelta):
                linear.up.normal_()
    return layer.to(dtype)


def test_hand_oracle_one_query_two_keys():
    layer = DecoupledCrossAttention(2, 2, 2, heads=1, head_dim=2, lora_rank=0)
    eye = torch.eye(2)
    with torch.no_grad():
        for name in ("to_q", "to_k_t", "to_k_i", "to_v_i", "to_out"):
            getattr(layer, name).base.weight.copy_(eye)
        layer.to_v_t.base.weight.zero_()
        layer.to_out.base.bias.zero_()

    z = torch.tensor([[[math.sqrt(2.0), 0.0]]])
    text = torch.tensor([[[1.0, 0.0]]])
    image = bundle_of(torch.tensor([[[0.0, 1.0], [math.log(3.0), 0.0]]]), 1, 1)
    out, record = attend(layer, z, text, image, record=True, hw=(1, 1), layer_id="oracle", gamma=1.0)

    assert torch.allclose(record.P[0, 0], torch.tensor([0.25, 0.75]), atol=1e-6)
    expected = torch.tensor([0.75 * math.log(3.0), 0.25])
    assert torch.allclose(out[0, 0], expected, atol=1e-6)
    assert torch.allclose(record.A[0, :, 0, 0], torch.tensor([0.25, 0.75]), atol=1e-6)


@pytest.mark.parametrize("num_characters", [1, 2])
def test_probabilities_and_region_maps_partition(num_characters):
    layer = random_layer()
    z = torch.randn(2, 16, 8)
    image = bundle_of(torch.randn(2, (num_characters + 1) * 3, 6), num_characters, 3)
    _, record = attend(layer, z, torch.randn(2, 5, 6), image, record=True, hw=(4, 4))
    assert torch.allclose(record.P.sum(dim=-1), torch.ones(2, 16), atol=1e-5)
    assert record.A.shape == (2, num_characters + 1, 4, 4)
    assert torch.allclose(record.A.sum(dim=1), torch.ones(2, 4, 4), atol=1e-5)


def test_gamma_zero_is_text_only_attention():
    layer = random_layer()
    z, text = torch.randn(1, 4, 8), torch.randn(1, 5, 6)
    image = bundle_of(torch.randn(1, 6, 6), 1, 3)
    with_image, _ = attend(layer, z, text, image, gamma=0.0)
    text_only, _ = attend(layer, z, text, None)
    assert torch.equal(with_image, text_only)


def test_zero_lora_deltas_match_the_base_layer():
    torch.manual_seed(3)
    plain = DecoupledCrossAttention(8, 6, 6, heads=2, head_dim=4, lora_rank=0)
    adapted = DecoupledCrossAttention(8, 6, 6, heads=2, head_dim=4, lora_rank=2)
    adapted.load_state_dict(plain.state_dict(), strict=False)
    z, text = torch.randn(1, 4, 8), torch.randn(1, 5, 6)
    image = bundle_of(torch.randn(1, 6, 6), 1, 3)
    assert torch.equal(attend(plain, z, text, image)[0], attend(adapted, z, text, image)[0])


def test_zeroing_image_values_changes_only_the_image_term():
    layer = random_layer()
    z, text = torch.randn(1, 4, 8), torch.randn(1, 5, 6)
    image = bundle_of(torch.randn(1, 6, 6), 1, 3)
    with torch.no_grad():
        layer.to_v_i.base.weight.zero_()
        layer.to_v_i.lora.up.zero_()
    assert torch.allclose(attend(layer, z, text, image)[0], attend(layer, z, text, None)[0], atol=1e-6)


@pytest.mark.parametrize("num_characters,expected", [(1, 0.5), (2, 1.0 / 3.0)])
def test_uniform_probabilities_give_uniform_maps(num_characters, expected):
    columns = (num_characters + 1) * 4
    P = torch.full((1, 9, columns), 1.0 / columns)
    maps = aggregate_region_maps(P, make_layout(num_characters, 4), (3, 3))
    assert torch.allclose(maps, torch.full((1, num_characters + 1, 3, 3), expected))


def test_region_maps_match_brute_force_column_sums():
    P = row_stochastic(16, 12, seed=4)
    layout = make_layout(2, 4)
    maps = aggregate_region_maps(P, layout, (4, 4))
    for k, region in enumerate(layout):
        for pixel in range(16):
            total = sum(float(P[pixel, column]) for column in range(region.start, region.stop))
            assert abs(float(maps[k, pixel // 4, pixel % 4]) - total) < 1e-12
    assert torch.allclose(maps.sum(dim=0), torch.ones(4, 4, dtype=torch.float64))
    with pytest.raises(ValidationError):
        aggregate_region_maps(P, make_layout(1, 4), (4, 4))


def test_apply_lora_oracles():
    W = torch.randn(5, 3, dtype=torch.float64)
    delta = LoRADelta(5, 3, rank=2).double()
    with torch.no_grad():
        delta.up.normal_()
    dense = W.clone()
    for i in range(5):
        for j in range(3):
            dense[i, j] += delta.scale * sum(float(delta.down[i, r] * delta.up[r, j]) for r in range(2))
    assert torch.allclose(apply_lora(W, delta), dense, atol=1e-6)

    unit = LoRADelta(5, 3, rank=1, scale=1.0).double()
    with torch.no_grad():
        unit.down.zero_()
        unit.down[2, 0] = 1.0
        unit.up.zero_()
        unit.up[0, 1] = 0.5
    changed = (apply_lora(W, unit) != W).nonzero().tolist()
    assert changed == [[2, 1]]

    muted = LoRADelta(5, 3, rank=2, scale=0.0).double()
    assert torch.equal(apply_lora(W, muted), W)
    with pytest.raises(ValidationError):
        apply_lora(torch.randn(4, 3, dtype=torch.float64), delta)


def test_lora_linear_uses_the_effective_weight():
    linear = LoRALinear(4, 3, rank=2, bias=True)
    with torch.no_grad():
        linear.lora.up.normal_()
    x = torch.randn(2, 4)
    expected = x @ (linear.base.weight.t() + linear.lora.delta_weight()) + linear.base.bias
    assert torch.allclose(linear(x), expected, atol=1e-6)


def test_non_finite_inputs_raise():
    layer = random_layer()
    z = torch.randn(1, 4, 8)
    z[0, 0, 0] = float("nan")
    with pytest.raises(NumericFailure, match="query"):
        attend(layer, z, torch.randn(1, 5, 6), None)
    with pytest.raises(ValidationError):
        attend(layer, torch.randn(1, 4, 8), torch.randn(1, 5, 6), None, record=True)


class TestAttendGradients:
    def setup_method(self):
        self.layer = random_layer(seed=5, dtype=torch.float64)
        generator = torch.Generator().manual_seed(6)
        self.z = torch.randn(1, 4, 8, dtype=torch.float64, generator=generator)
        self.text = torch.randn(1, 3, 6, dtype=torch.float64, generator=generator)
        self.image = torch.randn(1, 4, 6, dtype=torch.float64, generator=generator)

    def loss(self, z=None, gamma=0.7, image=None):
        c_i = bundle_of(self.image if image is None else image, 1, 2)
        out, _ = attend(self.layer, self.z if z is None else z, self.text, c_i, gamma=gamma)
        return out.pow(2).sum()

    def test_wrt_queries(self):
        z = self.z.clone().requires_grad_(True)
        assert_gradient_matches(lambda: self.loss(z=z), z)

    def test_wrt_gamma(self):
        gamma = torch.tensor(0.7, dtype=torch.float64, requires_grad=True)
        assert_gradient_matches(lambda: self.loss(gamma=gamma), gamma)

    def test_wrt_lora_factors(self):
        for parameter in (self.layer.to_q.lora.down, self.layer.to_k_i.lora.up):
            assert_gradient_matches(self.loss, parameter)

    def test_wrt_image_key_value_weights(self):
        for parameter in (self.layer.to_k_i.base.weight, self.layer.to_v_i.base.weight):
            assert_gradient_matches(self.loss, parameter)

    def test_wrt_image_tokens(self):
        image = self.image.clone().requires_grad_(True)
        assert_gradient_matches(lambda: self.loss(image=image), image)
