import numpy as np
import pytest
import torch

import oracles
from conftest import t64
from lfs_fewshot import numerics as nx
from lfs_fewshot.backbone import Conv4, ConvBlock, conv_block


@pytest.mark.parametrize("size,out", [(84, 5), (32, 2), (16, 1), (80, 5)])
def test_output_size(size, out):
    assert Conv4.output_size(size) == out
    net = Conv4(channels=8, generator=nx.torch_generator(0))
    assert net(torch.zeros(2, 3, size, size, dtype=nx.DTYPE)).shape == (2, 8, out, out)


def test_block_matches_oracle(rng):
    block = ConvBlock(2, 3, nx.torch_generator(1))
    with torch.no_grad():
        block.bn_gain.copy_(t64([1.5, 0.5, -1.0]))
        block.bn_bias.copy_(t64([0.1, -0.2, 0.3]))
    x = rng.normal(size=(2, 2, 6, 6))
    w = block.weight.detach().numpy()
    conv = np.stack([oracles.conv2d_same(xi, w) for xi in x])
    bn = oracles.batch_norm_train(conv, block.bn_gain.detach().numpy(), block.bn_bias.detach().numpy())
    ref = np.stack([oracles.max_pool(np.maximum(b, 0)) for b in bn])
    out = conv_block(t64(x), block).detach().numpy()
    np.testing.assert_allclose(out, ref, atol=1e-10)


def test_zero_weights_give_relu_bias(rng):
    net = Conv4(channels=4, generator=nx.torch_generator(0))
    with torch.no_grad():
        for block in net.blocks:
            block.weight.zero_()
            block.bn_bias.fill_(0.3)
    out = net(t64(rng.normal(size=(3, 3, 16, 16))))
    np.testing.assert_allclose(out.detach().numpy(), 0.3, atol=1e-12)


def test_seeded_initialisation_is_deterministic(rng):
    x = t64(rng.normal(size=(2, 3, 16, 16)))
    a, b = Conv4(channels=4, generator=nx.torch_generator(7)), Conv4(channels=4, generator=nx.torch_generator(7))
    c = Conv4(channels=4, generator=nx.torch_generator(8))
    assert torch.equal(a(x), b(x))
    assert not torch.equal(a.blocks[0].weight, c.blocks[0].weight)


def test_translation_covariance(rng):
    # zero background with identity running statistics keeps padding consistent
    net = Conv4(channels=4, generator=nx.torch_generator(3)).eval()
    patch = rng.normal(size=(3, 8, 8))
    a = np.zeros((1, 3, 80, 80))
    b = np.zeros((1, 3, 80, 80))
    a[0, :, 24:32, 24:32] = patch
    b[0, :, 40:48, 40:48] = patch
    fa, fb = net(t64(a)), net(t64(b))
    np.testing.assert_allclose(fb[0, :, 1:, 1:].detach().numpy(), fa[0, :, :-1, :-1].detach().numpy(), atol=1e-12)


def test_running_statistics_update(rng):
    net = Conv4(channels=4, generator=nx.torch_generator(0))
    before = net.blocks[0].running_mean.clone()
    net(t64(rng.normal(size=(2, 3, 16, 16)) + 1.0))
    assert not torch.equal(before, net.blocks[0].running_mean)
    frozen = net.blocks[0].running_mean.clone()
    net.eval()
    net(t64(rng.normal(size=(2, 3, 16, 16))))
    assert torch.equal(frozen, net.blocks[0].running_mean)


def test_gradients(rng):
    net = Conv4(channels=3, generator=nx.torch_generator(5))
    x = t64(rng.normal(size=(3, 3, 16, 16)))
    target = t64(rng.normal(size=(3, 3, 1, 1)))

    def loss():
        return ((net(x) - target) ** 2).sum()

    state = {k: v.clone() for k, v in net.named_buffers()}

    def reset_then_loss():
        # running buffers are not parameters; keep them fixed across probes
        for k, v in net.named_buffers():
            v.copy_(state[k])
        return loss()

    assert nx.grad_check(reset_then_loss, dict(net.named_parameters())) < 1e-4
