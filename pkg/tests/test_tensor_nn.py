import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aedf.tensor_nn import (
    ContractError,
    DimensionError,
    ParamStore,
    Tensor,
    adam_step,
    backward,
    build_tape,
    float64_mode,
    functional as F,
    load_tensors,
    no_grad,
    save_tensors,
    seeded_init,
)
from aedf.tensor_nn.checkpoint import CheckpointFormatError, decode_tensors, encode_tensors
from aedf.tensor_nn.gradcheck import check_gradients

from fd_cases import PRIMITIVES


# naive oracles -------------------------------------------------------------


def conv_loop(x, k, b):
    c_in, h, w = x.shape
    c_out = k.shape[0]
    out = np.zeros((c_out, h, w))
    for o in range(c_out):
        for i in range(h):
            for j in range(w):
                acc = b[o]
                for c in range(c_in):
                    for di in range(3):
                        for dj in range(3):
                            ii, jj = i + di - 1, j + dj - 1
                            if 0 <= ii < h and 0 <= jj < w:
                                acc += x[c, ii, jj] * k[o, c, di, dj]
                out[o, i, j] = acc
    return out


def pool_loop(x, ph, pw):
    c, h, w = x.shape
    out = np.zeros((c, h // ph, w // pw))
    for ch in range(c):
        for i in range(h // ph):
            for j in range(w // pw):
                out[ch, i, j] = max(
                    x[ch, i * ph + a, j * pw + bb] for a in range(ph) for bb in range(pw)
                )
    return out


def dense_loop(x, w, b):
    return np.array([b[m] + sum(w[m, n] * x[n] for n in range(len(x))) for m in range(w.shape[0])])


# conv2d_same ---------------------------------------------------------------


def test_conv_ones_center_is_nine():
    x = Tensor(np.ones((1, 3, 3)))
    k = Tensor(np.ones((1, 1, 3, 3)))
    out = F.conv2d_same(x, k, Tensor(np.zeros(1)))
    assert out.shape == (1, 3, 3)
    assert out.data[0, 1, 1] == 9.0


def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 6, 7)).astype(np.float32)
    k = np.zeros((2, 2, 3, 3), dtype=np.float32)
    k[0, 0, 1, 1] = k[1, 1, 1, 1] = 1.0
    out = F.conv2d_same(Tensor(x), Tensor(k), Tensor(np.zeros(2)))
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("seed", range(5))
def test_conv_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    x, k, b = rng.normal(size=(2, 5, 5)), rng.normal(size=(4, 2, 3, 3)), rng.normal(size=4)
    with float64_mode():
        out = F.conv2d_same(Tensor(x), Tensor(k), Tensor(b))
    np.testing.assert_allclose(out.data, conv_loop(x, k, b), atol=1e-6)


def test_conv_batched_equals_per_item():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 2, 6, 5)).astype(np.float32)
    k, b = Tensor(rng.normal(size=(4, 2, 3, 3))), Tensor(rng.normal(size=4))
    batched = F.conv2d_same(Tensor(x), k, b).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], F.conv2d_same(Tensor(x[i]), k, b).data, atol=1e-5)


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        F.conv2d_same(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), Tensor(np.zeros(1)))


# maxpool2d -----------------------------------------------------------------


def test_maxpool_2x2():
    out = F.maxpool2d(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), 2, 2)
    np.testing.assert_array_equal(out.data, [[[4.0]]])


def test_maxpool_identity():
    x = np.random.default_rng(1).normal(size=(2, 4, 5)).astype(np.float32)
    np.testing.assert_array_equal(F.maxpool2d(Tensor(x), 1, 1).data, x)


@pytest.mark.parametrize("seed", range(5))
def test_maxpool_matches_loop_oracle(seed):
    x = np.random.default_rng(seed).normal(size=(3, 7, 9))
    with float64_mode():
        out = F.maxpool2d(Tensor(x), 2, 3)
    np.testing.assert_allclose(out.data, pool_loop(x, 2, 3), atol=1e-6)


def test_maxpool_tie_grad_goes_to_first():
    x = Tensor(np.ones((1, 2, 2)), requires_grad=True)
    backward(F.sum(F.maxpool2d(x, 2, 2)))
    np.testing.assert_array_equal(x.grad, [[[1.0, 0.0], [0.0, 0.0]]])


def test_maxpool_tie_after_smaller_first():
    # row-major first among the maxima, not the first row's winner
    x = Tensor(np.array([[[0.0, 5.0, 1.0], [5.0, 1.0, 5.0]]]), requires_grad=True)
    backward(F.sum(F.maxpool2d(x, 2, 3)))
    np.testing.assert_array_equal(x.grad, [[[0.0, 1.0, 0.0], [0.0, 0.0, 0.0]]])


def test_maxpool_too_large():
    with pytest.raises(DimensionError):
        F.maxpool2d(Tensor(np.ones((1, 2, 2))), 3, 1)


# activations and dense -----------------------------------------------------


def test_leaky_relu_values():
    assert F.leaky_relu(Tensor(0.0), 0.01).item() == 0.0
    np.testing.assert_allclose(F.leaky_relu(Tensor([-2.0, 3.0]), 0.01).data, [-0.02, 3.0], rtol=1e-6)
    np.testing.assert_array_equal(F.leaky_relu(Tensor([-5.0, 5.0]), 0.0).data, [0.0, 5.0])


def test_dense_examples():
    np.testing.assert_array_equal(
        F.dense(Tensor([1.0, 1.0]), Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([0.0, 0.0])).data, [3.0, 7.0]
    )
    x = Tensor([0.3, -1.2, 5.0])
    np.testing.assert_array_equal(F.dense(x, Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x.data)
    np.testing.assert_array_equal(
        F.dense(x, Tensor(np.zeros((2, 3))), Tensor([4.0, -1.0])).data, [4.0, -1.0]
    )
    with pytest.raises(DimensionError):
        F.dense(x, Tensor(np.zeros((2, 4))), Tensor(np.zeros(2)))


@pytest.mark.parametrize("seed", range(5))
def test_dense_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=16), rng.normal(size=(9, 16)), rng.normal(size=9)
    with float64_mode():
        out = F.dense(Tensor(x), Tensor(w), Tensor(b))
    np.testing.assert_allclose(out.data, dense_loop(x, w, b), atol=1e-6)


def test_sigmoid_gap_concat():
    assert F.sigmoid(Tensor(0.0)).item() == 0.5
    x = np.stack([np.full((2, 2), 3.0), np.full((2, 2), 5.0)])
    np.testing.assert_array_equal(F.global_avg_pool(Tensor(x)).data, [3.0, 5.0])
    a, b = Tensor(np.ones((16, 4, 22))), Tensor(np.zeros((16, 4, 22)))
    m = F.concat_last_axis(a, b)
    assert m.shape == (16, 4, 44)
    with pytest.raises(DimensionError):
        F.concat_last_axis(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((2, 2, 4))))


@settings(max_examples=50, deadline=None)
@given(
    st.integers(1, 4), st.integers(1, 5), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1)
)
def test_concat_and_flatten_roundtrip(c, f, t1, t2, seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(c, f, t1)))
    b = Tensor(rng.normal(size=(c, f, t2)))
    m = F.concat_last_axis(a, b)
    np.testing.assert_array_equal(m.data[..., :t1], a.data)
    np.testing.assert_array_equal(m.data[..., t1:], b.data)
    np.testing.assert_array_equal(F.unflatten(F.flatten(m), m.shape).data, m.data)


# autodiff ------------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)), requires_grad=True)
    backward(F.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward(F.sum(x * x))
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_grads_accumulate_until_zeroed():
    x = Tensor([1.0, -1.0], requires_grad=True)
    backward(F.sum(x))
    backward(F.sum(x))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_tape_is_topological_and_unique():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = x * x
    z = F.sum(y + y * x)
    tape = build_tape(z)
    assert len({id(n) for n in tape}) == len(tape)
    pos = {id(n): i for i, n in enumerate(tape)}
    for node in tape:
        for parent in node._parents:
            if parent.requires_grad:
                assert pos[id(parent)] < pos[id(node)]


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("seed", range(10))
def test_primitive_gradients_match_finite_differences(name, seed):
    rng = np.random.default_rng(1000 + seed)
    with float64_mode():
        inputs, op = PRIMITIVES[name](rng)
        # random projection makes every output element matter
        probe = rng.normal(size=op(*inputs).shape)
        errs = check_gradients(lambda: F.sum(op(*inputs) * Tensor(probe)), inputs)
    assert max(errs) < 1e-3, errs


# optimiser and init --------------------------------------------------------


def test_adam_zero_grad_leaves_params():
    store = ParamStore()
    w = store.add("w", Tensor([1.0, -2.0]))
    w.grad = np.zeros(2, dtype=np.float32)
    adam_step(store, lr=0.1)
    np.testing.assert_array_equal(w.data, [1.0, -2.0])


def test_adam_first_step_has_magnitude_lr():
    store = ParamStore()
    w = store.add("w", Tensor(0.0, dtype=np.float64))
    w.grad = np.array(1.0)
    adam_step(store, lr=0.1)
    assert abs(w.data - (-0.1)) < 1e-8
    assert store.adam["w"].step == 1


def test_adam_converges_on_quadratic():
    store = ParamStore()
    w = store.add("w", Tensor(0.0, dtype=np.float64))
    for _ in range(500):
        store.zero_grad()
        d = w - 3.0
        backward(d * d)
        adam_step(store, lr=0.05)
    assert abs(w.item() - 3.0) < 0.01


def test_adam_missing_grad():
    store = ParamStore()
    store.add("w", Tensor([1.0]))
    with pytest.raises(ContractError):
        adam_step(store, lr=0.1)


def test_duplicate_param_name():
    store = ParamStore()
    store.add("a.w", Tensor([1.0]))
    with pytest.raises(KeyError):
        store.add("a.w", Tensor([2.0]))


def test_seeded_init_properties():
    a = seeded_init((64, 32), fan_in=32, rng_seed=11)
    b = seeded_init((64, 32), fan_in=32, rng_seed=11)
    assert a.data.tobytes() == b.data.tobytes()
    assert np.all(np.abs(a.data) <= np.sqrt(6 / 32))
    big = seeded_init((100_000,), fan_in=10, rng_seed=5)
    assert abs(float(big.data.mean())) < 0.01


# checkpoint format ---------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"theta_u.block0.kernel": rng.normal(size=(16, 1, 3, 3)).astype(np.float32),
               "classifier.b": np.array([0.5], dtype=np.float32),
               "scalar": np.float32(2.0)}
    path = tmp_path / "model.ckpt"
    save_tensors(path, tensors)
    back = load_tensors(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].tobytes() == np.asarray(tensors[k], dtype=np.float32).tobytes()
    blob = path.read_bytes()
    assert blob[:4] == b"AEDF" and blob[4:6] == b"\x01\x00"


def test_checkpoint_truncated_reports_offset():
    blob = encode_tensors({"w": np.ones((4, 4), dtype=np.float32)})
    with pytest.raises(CheckpointFormatError, match="offset"):
        decode_tensors(blob[:-3])
    with pytest.raises(CheckpointFormatError):
        decode_tensors(b"RIFF" + blob[4:])
