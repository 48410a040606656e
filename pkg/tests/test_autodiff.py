import threading

import numpy as np
import pytest

import autodiff as ad
from autodiff import Tensor, Tape


def naive_conv2d(x, w, stride, padding):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for b in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[b, o, i, j] = np.sum(patch * w[o])
    return out

def naive_deconv2d(x, w, stride, padding):
    n, c, h, wd = x.shape
    _, f, kh, kw = w.shape
    full = np.zeros((n, f, (h - 1) * stride + kh, (wd - 1) * stride + kw))
    for b in range(n):
        for ci in range(c):
            for i in range(h):
                for j in range(wd):
                    full[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw] += x[b, ci, i, j] * w[ci]
    return full[:, :, padding : full.shape[2] - padding, padding : full.shape[3] - padding]


def naive_gram(features):
    flat = features[0].reshape(features.shape[1], -1)
    return np.array([[np.dot(a, b) for b in flat] for a in flat]) / features[0].size


# === Forward values ===
def test_conv2d_matches_naive_loop(rng):
    x = rng.normal(size=(2, 3, 7, 7))
    w = rng.normal(size=(4, 3, 3, 3))
    for stride, padding in [(1, 0), (1, 1), (2, 1)]:
        out = ad.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding)
        assert np.max(np.abs(out.data - naive_conv2d(x, w, stride, padding))) <= 1e-12


def test_conv2d_bias_is_added_per_filter(rng):
    x = rng.normal(size=(1, 2, 4, 4))
    w = rng.normal(size=(3, 2, 1, 1))
    b = np.array([1.0, -2.0, 0.5])
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b))
    assert np.allclose(out.data - b[None, :, None, None], naive_conv2d(x, w, 1, 0))


def test_deconv2d_doubles_size_and_is_adjoint_of_conv(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    w = rng.normal(size=(3, 5, 4, 4))
    y = rng.normal(size=(2, 5, 8, 8))
    up = ad.deconv2d(Tensor(x), Tensor(w), stride=2, padding=1)
    assert up.shape == (2, 5, 8, 8)
    down = ad.conv2d(Tensor(y), Tensor(w), stride=2, padding=1)
    assert down.shape == x.shape
    assert np.isclose(np.sum(up.data * y), np.sum(x * down.data))


def test_conv2d_oracle_on_random_instances(rng):
    for _ in range(100):
        c, f = rng.integers(1, 4, size=2)
        x = rng.normal(size=(1, c, 5, 5))
        w = rng.normal(size=(f, c, 3, 3))
        stride, padding = [(1, 0), (1, 1), (2, 1)][rng.integers(3)]
        out = ad.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding)
        assert np.max(np.abs(out.data - naive_conv2d(x, w, stride, padding))) <= 1e-12


def test_deconv2d_oracle_on_random_instances(rng):
    for _ in range(100):
        c, f = rng.integers(1, 4, size=2)
        x = rng.normal(size=(1, c, 3, 3))
        w = rng.normal(size=(c, f, 4, 4))
        out = ad.deconv2d(Tensor(x), Tensor(w), stride=2, padding=1)
        assert out.shape == (1, f, 6, 6)
        assert np.max(np.abs(out.data - naive_deconv2d(x, w, 2, 1))) <= 1e-12


def test_deconv2d_rejects_non_doubling_geometry(rng):
    with pytest.raises(ValueError, match="double"):
        ad.deconv2d(Tensor(rng.normal(size=(1, 1, 4, 4))), Tensor(rng.normal(size=(1, 1, 3, 3))), stride=2, padding=1)


def test_softmax_rows_sum_to_one_even_for_large_logits():
    logits = Tensor(np.array([[1000.0, 999.0, -1000.0], [0.0, 0.0, 0.0]]))
    y = ad.softmax(logits).data
    assert np.allclose(y.sum(axis=-1), 1.0)
    assert np.all(np.isfinite(y))
    assert np.allclose(y[1], 1.0 / 3.0)


def test_softplus_is_stable_at_extremes():
    y = ad.softplus(Tensor(np.array([-800.0, 0.0, 800.0]))).data
    assert y[0] == pytest.approx(0.0, abs=1e-300)
    assert y[1] == pytest.approx(np.log(2.0))
    assert y[2] == pytest.approx(800.0)


def test_relu_never_produces_negative_zero():
    y = ad.relu(Tensor(np.array([-1.0, -0.0, 2.0]))).data
    assert not np.any(np.signbit(y))


def test_gram_matrix_normalisation():
    features = np.ones((1, 2, 3, 3))
    gram = ad.gram_matrix(Tensor(features)).data
    assert np.allclose(gram, 9.0 / (2 * 3 * 3))


def test_gram_matrix_matches_flattened_outer_products(rng):
    for _ in range(100):
        features = rng.normal(size=(1, 3, 4, 4))
        gram = ad.gram_matrix(Tensor(features)).data[0]
        assert np.max(np.abs(gram - naive_gram(features))) <= 1e-12
        assert np.max(np.abs(gram - gram.T)) <= 1e-14
        assert np.linalg.eigvalsh(gram).min() >= -1e-10


def test_gram_matrix_zero_map_and_disjoint_support(rng):
    assert not np.any(ad.gram_matrix(Tensor(np.zeros((1, 3, 4, 4)))).data)
    features = np.zeros((1, 2, 4, 4))
    features[0, 0, :, :2] = rng.uniform(0.1, 1.0, size=(4, 2))
    features[0, 1, :, 2:] = rng.uniform(0.1, 1.0, size=(4, 2))
    gram = ad.gram_matrix(Tensor(features)).data[0]
    assert gram[0, 1] == 0.0 and gram[1, 0] == 0.0
    assert gram[0, 0] > 0.0 and gram[1, 1] > 0.0


def test_global_avg_pool_and_channel_scale(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    pooled = ad.global_avg_pool(Tensor(x)).data
    assert np.allclose(pooled, x.mean(axis=(2, 3)))
    weights = rng.uniform(size=(2, 3))
    scaled = ad.channel_scale(Tensor(x), Tensor(weights)).data
    assert np.allclose(scaled, x * weights[:, :, None, None])


def test_shape_mismatch_fails_loudly():
    with pytest.raises(ValueError, match="shape mismatch"):
        ad.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
    with pytest.raises(ValueError, match="channels"):
        ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ValueError, match="spatial"):
        ad.channel_concat([Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2)))])


# === Gradients ===
@pytest.mark.parametrize(
    "f",
    [
        lambda x: ad.sum(ad.mul(x, x)),
        lambda x: ad.mean(ad.sigmoid(x)),
        lambda x: ad.sum(ad.tanh(ad.scale(x, 0.7))),
        lambda x: ad.sum(ad.softplus(x)),
        lambda x: ad.sum(ad.mul(ad.softmax(x), Tensor(np.arange(12.0).reshape(3, 4)))),
        lambda x: ad.sum(ad.mul(ad.transpose(x), ad.transpose(x))),
        lambda x: ad.sum(ad.matmul(x, ad.transpose(x))),
    ],
    ids=["square", "sigmoid", "tanh", "softplus", "softmax", "transpose", "matmul"],
)
def test_elementwise_and_dense_gradients(f, rng):
    assert ad.grad_check(f, rng.normal(size=(3, 4))) < 1e-4


def test_conv2d_gradients(rng):
    x0 = rng.normal(size=(2, 2, 5, 5))
    w0 = rng.normal(size=(3, 2, 3, 3))
    b0 = rng.normal(size=3)
    cotangent = Tensor(rng.normal(size=(2, 3, 3, 3)))
    assert ad.grad_check(lambda x: ad.sum(ad.mul(ad.conv2d(x, Tensor(w0), Tensor(b0), 2, 1), cotangent)), x0) < 1e-4
    assert ad.grad_check(lambda w: ad.sum(ad.mul(ad.conv2d(Tensor(x0), w, Tensor(b0), 2, 1), cotangent)), w0) < 1e-4
    assert ad.grad_check(lambda b: ad.sum(ad.mul(ad.conv2d(Tensor(x0), Tensor(w0), b, 2, 1), cotangent)), b0) < 1e-4


def test_deconv2d_gradients(rng):
    x0 = rng.normal(size=(1, 2, 3, 3))
    w0 = rng.normal(size=(2, 3, 4, 4))
    cotangent = Tensor(rng.normal(size=(1, 3, 6, 6)))
    assert ad.grad_check(lambda x: ad.sum(ad.mul(ad.deconv2d(x, Tensor(w0)), cotangent)), x0) < 1e-4
    assert ad.grad_check(lambda w: ad.sum(ad.mul(ad.deconv2d(Tensor(x0), w), cotangent)), w0) < 1e-4


def test_pooling_gram_and_attention_gradients(rng):
    x0 = rng.normal(size=(2, 3, 4, 4))
    weights = Tensor(rng.uniform(size=(2, 3)))
    assert ad.grad_check(lambda x: ad.sum(ad.mul(ad.gram_matrix(x), ad.gram_matrix(x))), x0) < 1e-4
    assert ad.grad_check(lambda x: ad.sum(ad.mul(ad.global_avg_pool(x), weights)), x0) < 1e-4
    assert ad.grad_check(lambda x: ad.sum(ad.mul(ad.channel_scale(x, weights), ad.channel_scale(x, weights))), x0) < 1e-4


def test_fully_connected_gradients(rng):
    x0 = rng.normal(size=(4, 5))
    w0 = rng.normal(size=(5, 3))
    b = Tensor(rng.normal(size=3))
    cotangent = Tensor(rng.normal(size=(4, 3)))
    assert ad.grad_check(lambda w: ad.sum(ad.mul(ad.fully_connected(Tensor(x0), w, b), cotangent)), w0) < 1e-4
    assert ad.grad_check(lambda x: ad.sum(ad.mul(ad.fully_connected(x, Tensor(w0), b), cotangent)), x0) < 1e-4


def test_l1_and_leaky_relu_gradients_away_from_kinks(rng):
    target = Tensor(rng.normal(size=(2, 3)))
    x0 = target.data + rng.choice([-1.0, 1.0], size=(2, 3)) * rng.uniform(0.1, 1.0, size=(2, 3))
    assert ad.grad_check(lambda x: ad.l1_distance(x, target), x0) < 1e-4
    y0 = rng.choice([-1.0, 1.0], size=(3, 3)) * rng.uniform(0.1, 1.0, size=(3, 3))
    assert ad.grad_check(lambda x: ad.sum(ad.mul(ad.leaky_relu(x, 0.2), ad.leaky_relu(x, 0.2))), y0) < 1e-4


def test_channel_concat_routes_gradients(rng):
    other = Tensor(rng.normal(size=(1, 2, 3, 3)))
    cotangent = Tensor(rng.normal(size=(1, 5, 3, 3)))
    assert ad.grad_check(lambda x: ad.sum(ad.mul(ad.channel_concat([x, other]), cotangent)), rng.normal(size=(1, 3, 3, 3))) < 1e-4


def test_sum_gradient_is_exact_at_zero():
    assert ad.grad_check(ad.sum, np.zeros((2, 2))) == 0.0


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([3.0]), requires_grad=True)
    with Tape():
        y = ad.add(ad.mul(x, x), x)
        ad.backward(ad.sum(y))
    assert np.allclose(x.grad, 2 * 3.0 + 1.0)


# === Tape semantics ===
def test_ops_outside_a_tape_are_not_recorded():
    x = Tensor(np.ones(3), requires_grad=True)
    y = ad.mul(x, x)
    assert y.is_leaf and not y.requires_grad


def test_detach_cuts_the_gradient_path():
    x = Tensor(np.array([2.0]), requires_grad=True)
    with Tape():
        y = ad.add(ad.mul(ad.detach(x), x), ad.scale(x, 0.0))
        ad.backward(ad.sum(y))
    assert np.allclose(x.grad, 2.0)


def test_frozen_leaves_receive_no_gradient():
    frozen = Tensor(np.array([1.0, 2.0]))
    trained = Tensor(np.array([3.0, 4.0]), requires_grad=True)
    with Tape():
        ad.backward(ad.sum(ad.mul(frozen, trained)))
    assert frozen.grad is None
    assert np.allclose(trained.grad, [1.0, 2.0])


def test_item_needs_a_single_element():
    assert Tensor(np.array([[2.5]])).item() == 2.5
    with pytest.raises(ValueError, match="single-element"):
        Tensor(np.zeros(3)).item()


def test_backward_rejects_non_scalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        y = ad.scale(x, 2.0)
        with pytest.raises(ValueError, match="scalar"):
            ad.backward(y)


def test_tapes_are_thread_local():
    seen = {}

    def worker():
        seen["tape"] = ad._active_tape()

    with Tape():
        thread = threading.Thread(target=worker)
        thread.start()
        thread.join()
    assert seen["tape"] is None


# === Optimisation ===
def test_adam_minimises_a_quadratic():
    x = Tensor(np.array([5.0, -3.0]), requires_grad=True)
    opt = ad.Adam([x], lr=0.05, beta1=0.9)
    for _ in range(1000):
        opt.zero_grad()
        with Tape():
            ad.backward(ad.sum(ad.mul(x, x)))
        opt.step()
    assert np.all(np.abs(x.data) < 0.1)


def test_adam_skips_parameters_without_gradient():
    x = Tensor(np.array([1.0]), requires_grad=True)
    opt = ad.Adam([x])
    opt.step()
    assert x.data[0] == 1.0
