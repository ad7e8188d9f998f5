import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from iter_sgg import layers


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def test_softmax_rejects_non_finite():
    with pytest.raises(ValueError, match="finite"):
        layers.softmax(torch.tensor([0.0, math.inf]))
    torch.testing.assert_close(layers.softmax(torch.zeros(4)), torch.full((4,), 0.25))


def test_weighted_cross_entropy_is_weighted_mean():
    logits = torch.randn(5, 3, dtype=torch.float64)
    target = torch.tensor([0, 2, 1, 2, 2])
    weight = torch.tensor([1.0, 3.0, 0.1], dtype=torch.float64)
    nll = -torch.log_softmax(logits, -1)[torch.arange(5), target]
    expected = (weight[target] * nll).sum() / weight[target].sum()
    torch.testing.assert_close(layers.cross_entropy(logits, target, weight), expected)
    torch.testing.assert_close(layers.cross_entropy(logits, target), nll.mean())


@pytest.mark.parametrize(
    "target, weight, match",
    [
        (torch.tensor([0, 3]), None, "out of range"),
        (torch.tensor([0, 1, 2]), None, "does not match logits"),
        (torch.tensor([0, 1]), torch.ones(2), "class weight shape"),
    ],
)
def test_cross_entropy_validation(target, weight, match):
    with pytest.raises(ValueError, match=match):
        layers.cross_entropy(torch.zeros(2, 3), target, weight)


def test_linear_and_attention_shape_checks():
    with pytest.raises(ValueError, match="input width"):
        layers.linear(torch.zeros(2, 3), torch.zeros(4, 5))
    with pytest.raises(ValueError, match="not divisible"):
        layers.AttentionSpec(10, 3)
    attn = layers.MultiHeadAttention(layers.AttentionSpec(8, 2))
    with pytest.raises(ValueError, match="empty key set"):
        attn(torch.zeros(1, 3, 8), torch.zeros(1, 0, 8), torch.zeros(1, 0, 8))
    assert attn(torch.zeros(1, 3, 8), torch.zeros(1, 5, 8), torch.zeros(1, 5, 8)).shape == (1, 3, 8)


def test_zero_init_feed_forward_is_zero():
    ff = layers.FeedForward(8, 16)
    layers.zero_init(ff.down_proj)
    assert torch.count_nonzero(ff(torch.randn(3, 8))) == 0


def test_grad_check_catches_wrong_gradient():
    x = torch.randn(3, dtype=torch.float64, requires_grad=True)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return (x**2).sum()

        @staticmethod
        def backward(ctx, grad):
            return grad * torch.ones(3, dtype=torch.float64)

    assert layers.grad_check(lambda: Wrong.apply(x), [x]) > 1e-1
    assert layers.grad_check(lambda: (x**2).sum(), [x]) < 1e-6


def _params(*shapes):
    return [torch.randn(*s, dtype=torch.float64, requires_grad=True) for s in shapes]


def test_grad_functional_ops():
    x, w, b = _params((3, 4), (5, 4), (5,))
    assert layers.grad_check(lambda: layers.linear(x, w, b).tanh().sum(), [x, w, b]) < 1e-3
    assert layers.grad_check(lambda: (layers.layernorm(x) * w[0]).sum(), [x]) < 1e-3
    assert layers.grad_check(lambda: (layers.softmax(x) * w[:3, :4]).sum(), [x]) < 1e-3
    target = torch.tensor([0, 3, 1])
    weight = torch.tensor([1.0, 2.0, 0.5, 4.0], dtype=torch.float64)
    assert layers.grad_check(lambda: layers.cross_entropy(x, target, weight), [x]) < 1e-3


def test_grad_box_losses():
    a = (torch.rand(4, 4, dtype=torch.float64) * 0.4 + 0.2).requires_grad_()
    b = torch.rand(4, 4, dtype=torch.float64) * 0.4 + 0.2
    assert layers.grad_check(lambda: layers.giou_loss(a, b), [a]) < 1e-3
    assert layers.grad_check(lambda: layers.l1(a, b + 0.5), [a]) < 1e-3


def test_grad_attention_and_feed_forward():
    attn = layers.MultiHeadAttention(layers.AttentionSpec(8, 2)).double()
    ff = layers.FeedForward(8, 16).double()
    q, kv = _params((1, 3, 8), (1, 4, 8))
    params = [q, kv, *attn.parameters(), *ff.parameters()]
    fn = lambda: ff(attn(q, kv, kv)).pow(2).sum()  # noqa: E731
    assert layers.grad_check(fn, params, max_components=8) < 1e-3


def _attention():
    return layers.MultiHeadAttention(layers.AttentionSpec(8, 2)).double()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.permutations(range(5)))
def test_attention_invariant_to_joint_key_value_permutation(seed, perm):
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    attn = _attention()
    q, k, v = (torch.randn(1, n, 8, dtype=torch.float64, generator=gen) for n in (3, 5, 5))
    with torch.no_grad():
        torch.testing.assert_close(attn(q, k[:, perm], v[:, perm]), attn(q, k, v))


def test_attention_over_identical_keys_averages_values():
    attn = _attention()
    k = torch.randn(1, 1, 8, dtype=torch.float64).expand(1, 4, 8)
    v = torch.randn(1, 4, 8, dtype=torch.float64)
    with torch.no_grad():
        a = attn(torch.randn(1, 3, 8, dtype=torch.float64), k, v)
        b = attn(torch.randn(1, 3, 8, dtype=torch.float64) * 5, k, v)
        expected = attn.out_proj(attn.v_proj(v).mean(1, keepdim=True)).expand(1, 3, 8)
    torch.testing.assert_close(a, expected)
    torch.testing.assert_close(b, expected)


def test_attention_with_one_key_returns_its_value():
    attn = _attention()
    k, v = torch.randn(2, 1, 8, dtype=torch.float64), torch.randn(2, 1, 8, dtype=torch.float64)
    with torch.no_grad():
        out = attn(torch.randn(2, 6, 8, dtype=torch.float64), k, v)
        expected = attn.out_proj(attn.v_proj(v)).expand(2, 6, 8)
    torch.testing.assert_close(out, expected)
