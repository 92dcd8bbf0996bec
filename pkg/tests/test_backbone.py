import pytest
import torch
from torch import nn

from dualocc.backbone import Backbone
from dualocc.geometry import ContractError

from .gradcheck import relative_fd_error


def zero_biases(m: nn.Module) -> None:
    for mod in m.modules():
        if isinstance(mod, nn.Conv2d) and mod.bias is not None:
            nn.init.zeros_(mod.bias)


def test_shapes_and_zero_input():
    torch.manual_seed(0)
    net = Backbone()
    zero_biases(net)
    out = net(torch.zeros(1, 2, 3, 64, 128))
    assert sorted(out) == [2, 3]
    assert out[2].shape == (1, 2, 32, 16, 32)
    assert out[3].shape == (1, 2, 32, 8, 16)
    assert all(torch.count_nonzero(v) == 0 for v in out.values())


@pytest.mark.parametrize("hw", [(16, 16), (24, 40), (8, 64)])
def test_shape_contract_for_divisible_sizes(hw):
    out = Backbone(width=8)(torch.rand(2, 1, 3, *hw))
    for s, f in out.items():
        assert f.shape == (2, 1, 8, hw[0] // 2**s, hw[1] // 2**s)


def test_identical_cameras_identical_features():
    torch.manual_seed(1)
    img = torch.rand(1, 1, 3, 32, 32)
    out = Backbone(width=8)(img.expand(1, 2, -1, -1, -1).contiguous())
    for f in out.values():
        torch.testing.assert_close(f[:, 0], f[:, 1], rtol=0, atol=0)


def test_camera_permutation_permutes_output():
    torch.manual_seed(2)
    net = Backbone(width=8)
    img = torch.rand(2, 3, 3, 32, 32)
    perm = torch.tensor([2, 0, 1])
    a, b = net(img), net(img[:, perm])
    for s in a:
        torch.testing.assert_close(a[s][:, perm], b[s])


def test_non_finite_input_rejected():
    img = torch.zeros(1, 1, 3, 16, 16)
    img[0, 0, 0, 3, 3] = float("nan")
    with pytest.raises(ContractError):
        Backbone(width=4)(img)


def test_scales_validated():
    with pytest.raises(ContractError):
        Backbone(num_stages=3, scales=(4,))


def test_weight_gradient_matches_finite_difference():
    torch.manual_seed(3)
    net = Backbone(width=4, num_stages=3, scales=(2, 3)).double()
    img = torch.rand(1, 2, 3, 16, 16, dtype=torch.float64)

    def probe():
        return sum(f.sum() for f in net(img).values())

    for w in (net.stages[0].weight, net.lateral["2"].weight):
        assert relative_fd_error(probe, w) <= 1e-4
