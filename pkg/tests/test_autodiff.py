import math

import numpy as np
import pytest

from adhocloc import autodiff as ad
from adhocloc.autodiff import ParamStore, ShapeError, Tensor

from gradcheck import numeric_grad, rel_error


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def check_op(build, *arrays, tol=1e-4, seed=0):
    """Compare backward() against finite differences of sum(out * w) for random w."""
    rng = np.random.default_rng(seed)
    leaves = [leaf(a) for a in arrays]
    out = build(*leaves)
    w = rng.standard_normal(out.shape)

    def value():
        return float((build(*[Tensor(l.data) for l in leaves]).data * w).sum())

    loss = ad.total(ad.mul(out, w))
    loss.backward()
    numeric = numeric_grad(value, [l.data for l in leaves])
    for l, n in zip(leaves, numeric):
        assert rel_error(l.grad, n) < tol


RNG = np.random.default_rng(42)


def r(*shape):
    return RNG.standard_normal(shape)


@pytest.mark.parametrize("name, build, arrays", [
    ("matmul", ad.matmul, (r(3, 4), r(4, 2))),
    ("matmul_batched", ad.matmul, (r(2, 3, 4), r(4, 5))),
    ("add_broadcast", ad.add, (r(3, 4), r(4))),
    ("mul", ad.mul, (r(2, 3), r(2, 3))),
    ("scale", lambda a: ad.scale(a, -2.5), (r(3, 2),)),
    ("linear", ad.linear, (r(2, 3, 5), r(5, 4), r(4))),
    ("relu", ad.relu, (r(4, 5) + 0.05,)),
    ("concat", lambda a, b: ad.concat([a, b], axis=1), (r(2, 3), r(2, 4))),
    ("mean", lambda a: ad.mean(a, axis=1), (r(3, 4, 2),)),
    ("mean_all", lambda a: ad.mean(a), (r(3, 4),)),
    ("softmax", lambda a: ad.softmax(a, axis=-1), (r(3, 5),)),
    ("softmax_axis0", lambda a: ad.softmax(a, axis=0), (r(4, 3),)),
    ("layer_norm", ad.layer_norm, (r(3, 6), 1 + 0.1 * r(6), r(6))),
    ("reshape", lambda a: ad.reshape(a, (6, 2)), (r(3, 4),)),
    ("transpose", lambda a: ad.transpose(a, (2, 0, 1)), (r(2, 3, 4),)),
    ("expand", lambda a: ad.expand(a, (4, 2, 3)), (r(1, 3),)),
])
def test_primitive_gradients(name, build, arrays):
    check_op(build, *[a.copy() for a in arrays])


def test_cross_entropy_gradient():
    logits = r(4, 5)
    target = np.eye(5)[2]
    leaf_logits = leaf(logits)

    def value():
        return ad.cross_entropy(ad.softmax(Tensor(leaf_logits.data), axis=-1), target).data

    ad.cross_entropy(ad.softmax(leaf_logits, axis=-1), target).backward()
    (num,) = numeric_grad(value, [leaf_logits.data])
    assert rel_error(leaf_logits.grad, num) < 1e-4


def test_relu_example():
    x = leaf([-1.0, 2.0])
    y = ad.relu(x)
    assert y.data.tolist() == [0, 2]
    ad.total(y).backward()
    assert x.grad.tolist() == [0, 1]


def test_softmax_symmetric():
    assert ad.softmax(np.zeros(2)).data.tolist() == [0.5, 0.5]


def test_matmul_ones():
    out = ad.matmul(np.ones((2, 3)), np.ones((3, 2)))
    np.testing.assert_array_equal(out.data, np.full((2, 2), 3.0))


def test_shape_errors_name_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        ad.add(np.ones((2, 3)), np.ones(4))
    with pytest.raises(ShapeError):
        ad.concat([np.ones((2, 3)), np.ones((3, 3))], axis=1)


@pytest.mark.parametrize("probs, target, expected", [
    (np.eye(4)[[1, 1, 1]], np.eye(4)[1], 0.0),
    (np.full((1, 4), 0.25), np.eye(4)[0], math.log(4)),
    (np.array([[0.5, 0.5, 0.0, 0.0], [0.25, 0.25, 0.25, 0.25]]), np.eye(4)[0],
     (math.log(2) + math.log(4)) / 2),
])
def test_cross_entropy_values(probs, target, expected):
    assert float(ad.cross_entropy(probs, target).data) == pytest.approx(expected, abs=1e-12)


def test_cross_entropy_floor_and_errors():
    loss = ad.cross_entropy(np.array([[1.0, 0.0]]), np.array([0.0, 1.0]))
    assert float(loss.data) == pytest.approx(-math.log(1e-12))
    with pytest.raises(ShapeError):
        ad.cross_entropy(np.full((2, 3), 1 / 3), np.eye(4)[0])
    with pytest.raises(ValueError, match="sum to 1"):
        ad.cross_entropy(np.full((2, 3), 0.5), np.eye(3)[0])


def test_backward_square():
    x = leaf(3.0)
    ad.mul(x, x).backward()
    assert float(x.grad) == 6.0


def test_backward_sum_of_w_v():
    w = leaf(np.arange(6.0).reshape(2, 3))
    v = Tensor(np.ones((3, 1)))
    ad.total(ad.matmul(w, v)).backward()
    np.testing.assert_array_equal(w.grad, np.ones((2, 3)))
    assert v.grad is None


def test_backward_requires_scalar():
    x = leaf(np.ones(3))
    with pytest.raises(ShapeError):
        ad.relu(x).backward()


def test_random_graph_against_finite_differences():
    rng = np.random.default_rng(5)
    for seed in range(5):
        a, b, c = rng.standard_normal((3, 4)), rng.standard_normal((4, 3)), rng.standard_normal(3)

        def build(a, b, c):
            h = ad.relu(ad.linear(a, b, c))
            return ad.mean(ad.layer_norm(ad.add(h, ad.softmax(h, axis=0))), axis=0)
        check_op(build, a, b, c, seed=seed)


def test_softmax_and_layer_norm_properties():
    x = r(5, 7) * 4
    p = ad.softmax(x, axis=-1).data
    assert (p > 0).all()
    np.testing.assert_allclose(p.sum(-1), 1, atol=1e-6)
    y = ad.layer_norm(x).data
    assert np.abs(y.mean(-1)).max() < 1e-6
    np.testing.assert_allclose(y.var(-1), 1, atol=1e-4)


def test_adam_first_step():
    store = ParamStore(np.float64)
    p = store.add("p", 0.0)
    p.grad = np.array(1.0)
    ad.adam_step(store, lr=0.1)
    assert float(p.data) == pytest.approx(-0.1, rel=1e-6)
    assert p.grad is None
    assert store.adam_t["p"] == 1


def test_adam_zero_gradient():
    store = ParamStore(np.float64)
    p = store.add("p", [1.0, -2.0])
    p.grad = np.zeros(2)
    ad.adam_step(store, lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert store.adam_t["p"] == 1


def test_adam_constant_gradient_approaches_lr():
    store = ParamStore(np.float64)
    p = store.add("p", 0.0)
    prev = 0.0
    for _ in range(2000):
        p.grad = np.array(-3.0)
        ad.adam_step(store, lr=0.01)
        step, prev = float(p.data) - prev, float(p.data)
    assert step == pytest.approx(0.01, rel=1e-4)


def test_adam_missing_gradient():
    store = ParamStore()
    store.add("a", 1.0)
    with pytest.raises(ValueError, match="no gradient for a"):
        ad.adam_step(store)


def test_duplicate_names_rejected():
    store = ParamStore()
    store.add("w", np.zeros(2))
    with pytest.raises(KeyError):
        store.add("w", np.zeros(2))


def test_checkpoint_round_trip(tmp_path):
    store = ParamStore()
    store.add("enc.w", np.arange(6, dtype=np.float32).reshape(2, 3))
    store.add("b", np.array([0.5], dtype=np.float32))
    for t in store.params.values():
        t.grad = np.ones_like(t.data)
    ad.adam_step(store, lr=0.01)
    path = tmp_path / "model.ckpt"
    ad.save_checkpoint(store, path)
    assert ad.adam_state_path(path).exists()
    raw = path.read_bytes()
    assert raw[:4] == b"ADHC"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 2

    loaded = ad.load_checkpoint(path)
    for k in store:
        np.testing.assert_array_equal(loaded[k].data, store[k].data)
        np.testing.assert_array_equal(loaded.adam_m[k], store.adam_m[k])
        assert loaded.adam_t[k] == 1


def test_checkpoint_mismatch_and_corruption(tmp_path):
    store = ParamStore()
    store.add("w", np.zeros((2, 2)))
    path = tmp_path / "m.ckpt"
    ad.save_checkpoint(store, path, with_optimizer=False)
    other = ParamStore()
    other.add("w", np.zeros((3, 2)))
    with pytest.raises(ValueError, match="shape"):
        ad.load_checkpoint(path, other)
    path.write_bytes(path.read_bytes()[:20])
    with pytest.raises(ValueError, match="corrupt"):
        ad.load_checkpoint(path)
    (tmp_path / "junk").write_bytes(b"nope")
    with pytest.raises(ValueError, match="not a checkpoint"):
        ad.load_checkpoint(tmp_path / "junk")
