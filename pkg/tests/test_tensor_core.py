import numpy as np
import pytest

from lanesmith import tensor as T
from lanesmith.tensor import checkpoint
from lanesmith.tensor.gradcheck import check_gradients
from lanesmith.tensor.nn import Attention, Linear, TransformerBlock, AdaLNZeroBlock


def leaf(rng, *shape):
    return T.Tensor(rng.standard_normal(shape), requires_grad=True)


def test_matmul_identity_and_hand_case():
    eye = T.Tensor(np.eye(2))
    np.testing.assert_array_equal((eye @ eye).data, np.eye(2))
    out = T.Tensor([[1.0, 2.0], [3.0, 4.0]]) @ T.Tensor([[0.0], [1.0]])
    np.testing.assert_array_equal(out.data, [[2.0], [4.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_matmul_gradient_vs_finite_differences():
    rng = np.random.default_rng(0)
    a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
    w = rng.standard_normal((3, 2))
    err = check_gradients(lambda: (T.matmul(a, b) * w).sum(), [a, b])
    assert err < 1e-6


def test_softmax_values():
    np.testing.assert_allclose(T.softmax(T.Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
    out = T.softmax(T.Tensor([1000.0, 0.0])).data
    assert abs(out[0] - 1.0) < 1e-12 and out[1] < 1e-12
    rows = T.softmax(T.Tensor(np.random.default_rng(1).standard_normal((5, 7))), axis=1).data
    np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-12)


def test_layer_norm_values():
    np.testing.assert_allclose(T.layer_norm(T.Tensor([[4.0, 4.0, 4.0]])).data, 0.0, atol=1e-12)
    # eps=1e-5 shifts the two-point case by ~5e-6
    np.testing.assert_allclose(T.layer_norm(T.Tensor([[1.0, 3.0]])).data, [[-1.0, 1.0]], atol=1e-5)


@pytest.mark.parametrize("shape", [(3, 4), (2, 3, 5), (4, 1, 6)])
@pytest.mark.parametrize(
    "op",
    [
        lambda x: T.softmax(x, axis=-1),
        lambda x: T.log_softmax(x, axis=-1),
        lambda x: T.layer_norm(x),
        T.gelu,
        T.silu,
        T.tanh,
        T.sigmoid,
        T.exp,
        lambda x: T.log(x * x + 1.0),
        lambda x: T.sqrt(x * x + 1.0),
        lambda x: x.transpose(tuple(reversed(range(x.ndim)))),
        lambda x: x.reshape(-1),
        lambda x: x[..., 1:],
        lambda x: T.concat([x, x * 2.0], axis=-1),
        lambda x: x / (x * x + 2.0),
        lambda x: x.mean(axis=-1),
    ],
)
def test_op_gradients_random_shapes(shape, op):
    rng = np.random.default_rng(hash(shape) % 2**32)
    x = leaf(rng, *shape)
    probe = T.Tensor(rng.standard_normal(op(T.Tensor(x.data)).shape))
    err = check_gradients(lambda: (op(x) * probe).sum(), [x])
    assert err < 1e-5


def test_layer_norm_affine_gradient():
    rng = np.random.default_rng(3)
    x, g, b = leaf(rng, 4, 6), leaf(rng, 6), leaf(rng, 6)
    probe = rng.standard_normal((4, 6))
    assert check_gradients(lambda: (T.layer_norm(x, g, b) * probe).sum(), [x, g, b]) < 1e-5


def test_cross_entropy_gradient_and_mask():
    rng = np.random.default_rng(4)
    logits = leaf(rng, 5, 4)
    targets = rng.integers(0, 4, size=5)
    weights = np.array([1.0, 0.0, 1.0, 1.0, 0.0])
    assert check_gradients(lambda: T.cross_entropy(logits, targets, weights), [logits]) < 1e-6
    full = T.cross_entropy(T.Tensor(logits.data[[0, 2, 3]]), targets[[0, 2, 3]]).item()
    assert abs(T.cross_entropy(T.Tensor(logits.data), targets, weights).item() - full) < 1e-12


def test_nonfinite_detection():
    with pytest.raises(T.NonFiniteError):
        T.log(T.Tensor([-1.0]))


def _attn(rng, d=8, heads=2, edge_dim=None):
    return Attention(d, d, heads, rng, edge_dim=edge_dim)


def test_attention_single_key_returns_projected_value():
    rng = np.random.default_rng(5)
    attn = _attn(rng)
    x = T.Tensor(rng.standard_normal((1, 1, 8)))
    out = attn(x, x).data
    expected = (x.data @ attn.wv.weight.data + attn.wv.bias.data) @ attn.wo.weight.data + attn.wo.bias.data
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_attention_permutation_equivariance_with_edges():
    rng = np.random.default_rng(6)
    attn = _attn(rng, edge_dim=3)
    q = T.Tensor(rng.standard_normal((1, 4, 8)))
    kv = rng.standard_normal((1, 5, 8))
    edge = rng.standard_normal((1, 4, 5, 3))
    perm = rng.permutation(5)
    base = attn(q, T.Tensor(kv), edge=T.Tensor(edge)).data
    permuted = attn(q, T.Tensor(kv[:, perm]), edge=T.Tensor(edge[:, :, perm])).data
    np.testing.assert_allclose(base, permuted, atol=1e-12)


def test_attention_two_token_hand_formula():
    rng = np.random.default_rng(7)
    d, heads = 4, 1
    attn = Attention(d, d, heads, rng, edge_dim=2)
    x = rng.standard_normal((1, 2, d))
    e = rng.standard_normal((1, 2, 2, 2))
    out = attn(T.Tensor(x), T.Tensor(x), edge=T.Tensor(e)).data[0]

    def lin(layer, v):
        y = v @ layer.weight.data
        return y + layer.bias.data if layer.bias is not None else y

    q, k, v = lin(attn.wq, x[0]), lin(attn.wk, x[0]), lin(attn.wv, x[0])
    expected = np.zeros((2, d))
    for i in range(2):
        keys = [k[j] + lin(attn.we_k, e[0, i, j]) for j in range(2)]
        vals = [v[j] + lin(attn.we_v, e[0, i, j]) for j in range(2)]
        s = np.array([q[i] @ keys[j] / np.sqrt(d) for j in range(2)])
        w = np.exp(s - s.max())
        w /= w.sum()
        expected[i] = lin(attn.wo, w[0] * vals[0] + w[1] * vals[1])
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_attention_key_mask_blocks_padding_and_empty_context():
    rng = np.random.default_rng(8)
    attn = _attn(rng)
    q = T.Tensor(rng.standard_normal((2, 3, 8)))
    kv = rng.standard_normal((2, 4, 8))
    mask = np.array([[True, True, False, False], [False, False, False, False]])
    out = attn(q, T.Tensor(kv), key_mask=mask).data
    kv2 = kv.copy()
    kv2[0, 2:] = 100.0
    out2 = attn(q, T.Tensor(kv2), key_mask=mask).data
    np.testing.assert_allclose(out, out2, atol=1e-12)
    # no valid key: the update reduces to the output bias
    np.testing.assert_allclose(out[1], np.broadcast_to(attn.wo.bias.data, (3, 8)), atol=1e-12)


def test_attention_gradients():
    rng = np.random.default_rng(9)
    attn = _attn(rng, edge_dim=3)
    q, kv, e = leaf(rng, 2, 3, 8), leaf(rng, 2, 4, 8), leaf(rng, 2, 3, 4, 3)
    mask = np.array([[True, True, True, False], [True, False, True, True]])
    probe = rng.standard_normal((2, 3, 8))
    params = [q, kv, e, attn.wq.weight, attn.we_k.weight, attn.we_v.weight]
    assert check_gradients(lambda: (attn(q, kv, edge=e, key_mask=mask) * probe).sum(), params) < 1e-5


def test_blocks_gradients():
    rng = np.random.default_rng(10)
    block = TransformerBlock(8, 2, rng, d_ctx=6)
    dit = AdaLNZeroBlock(8, 2, 5, rng)
    dit.modulation.weight.data = rng.standard_normal(dit.modulation.weight.shape) * 0.1
    x, ctx, c = leaf(rng, 2, 3, 8), leaf(rng, 2, 4, 6), leaf(rng, 2, 5)
    probe = rng.standard_normal((2, 3, 8))
    assert check_gradients(lambda: (block(x, ctx) * probe).sum(), [x, ctx, block.attn.wk.weight]) < 1e-5
    assert check_gradients(lambda: (dit(x, c) * probe).sum(), [x, c, dit.modulation.weight]) < 1e-5


def test_adaln_zero_block_is_identity_at_init():
    rng = np.random.default_rng(11)
    dit = AdaLNZeroBlock(8, 2, 5, rng)
    x = rng.standard_normal((2, 3, 8))
    np.testing.assert_array_equal(dit(T.Tensor(x), T.Tensor(rng.standard_normal((2, 5)))).data, x)


def test_adam_step_properties():
    p = [np.array([1.0, -2.0])]
    out, _ = T.adam_step(p, [np.zeros(2)], {}, lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(out[0], p[0])
    x, state = [np.array([1.0])], {}
    x, state = T.adam_step(x, [2 * x[0]], state, lr=0.1)
    assert x[0][0] < 1.0


def test_adamw_converges_on_quadratic():
    w = T.Tensor(np.array([3.0, -2.0]), requires_grad=True)
    scale = np.array([1.0, 4.0])
    opt = T.AdamW([w], lr=0.1)
    for _ in range(200):
        opt.zero_grad()
        loss = (w * w * scale).sum()
        loss.backward()
        opt.step()
    grad = 2 * scale * w.data
    assert np.linalg.norm(grad) < 1e-3


def test_ema_matches_closed_form():
    decay = 0.9
    traj = [np.array([float(i), -float(i) ** 2]) for i in range(1, 8)]
    ema = T.EMA({"w": np.zeros(2)}, decay=decay)
    for p in traj:
        ema.update({"w": p})
    n = len(traj)
    expected = sum((1 - decay) * decay ** (n - 1 - i) * traj[i] for i in range(n))
    np.testing.assert_allclose(ema.shadow["w"], expected, atol=1e-12)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(12)
    params = {"a.weight": rng.standard_normal((3, 4)), "b": rng.standard_normal(5), "scalar": np.array(2.5)}
    path = tmp_path / "m.lsmt"
    checkpoint.save(path, params)
    blob = path.read_bytes()
    assert blob[:5] == b"LSMT1"
    loaded = checkpoint.load(path)
    assert list(loaded) == list(params)
    for k in params:
        np.testing.assert_array_equal(loaded[k], params[k])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(b"XXXX" + blob[5:])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(blob[:-3])


def test_forward_is_deterministic():
    a = Linear(4, 3, np.random.default_rng(0))
    b = Linear(4, 3, np.random.default_rng(0))
    x = T.Tensor(np.ones((2, 4)))
    np.testing.assert_array_equal(a(x).data, b(x).data)
