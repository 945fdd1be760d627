import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geoprior.diffcore import (ConfigError, ContractError, DimensionError, EvaluationError, MlpBlock,
                               ParamStore, ResNetFC, Tensor, adamw_step, check_gradients,
                               load_checkpoint, load_store, save_checkpoint, save_store)
from geoprior.diffcore import tensor as T
from geoprior.diffcore.tensor import _make


def hand_mlp(x, Ws, bs, slope=0.01):
    # explicit-loop oracle for a leaky-relu MLP
    h = np.array(x, dtype=float)
    for li, (W, b) in enumerate(zip(Ws, bs)):
        out = np.zeros((h.shape[0], W.shape[1]))
        for n in range(h.shape[0]):
            for j in range(W.shape[1]):
                acc = b[j]
                for i in range(W.shape[0]):
                    acc += h[n, i] * W[i, j]
                out[n, j] = acc
        if li < len(Ws) - 1:
            out = np.where(out > 0, out, slope * out)
        h = out
    return h


class TestForwardMlp:
    def test_zero_weights_give_zero(self, rng):
        st_ = ParamStore(0)
        blk = MlpBlock(st_, "m", [4, 5, 3])
        for layer in blk.layers:
            layer.W.data[:] = 0
        out = blk(Tensor(rng.normal(size=(6, 4))))
        assert np.all(out.data == 0)

    def test_identity_layer(self, rng):
        st_ = ParamStore(0)
        blk = MlpBlock(st_, "m", [3, 3], activation="linear")
        blk.layers[0].W.data = np.eye(3)
        x = rng.normal(size=(5, 3))
        np.testing.assert_array_equal(blk(Tensor(x)).data, x)

    def test_matches_loop_oracle(self, rng):
        st_ = ParamStore(3)
        blk = MlpBlock(st_, "m", [4, 6, 2])
        for layer in blk.layers:
            layer.b.data = rng.normal(size=layer.b.shape)
        x = rng.normal(size=(7, 4))
        want = hand_mlp(x, [l.W.data for l in blk.layers], [l.b.data for l in blk.layers])
        np.testing.assert_allclose(blk(Tensor(x)).data, want, atol=1e-12, rtol=0)

    def test_width_mismatch(self):
        blk = MlpBlock(ParamStore(0), "m", [4, 2])
        with pytest.raises(DimensionError):
            blk(Tensor(np.zeros((2, 3))))

    def test_residual_needs_equal_widths(self):
        with pytest.raises(DimensionError):
            MlpBlock(ParamStore(0), "m", [4, 8, 3], residual=True)

    def test_residual_zero_inner_is_identity(self, rng):
        blk = MlpBlock(ParamStore(0), "m", [5, 7, 5], residual=True, zero_last=True)
        x = rng.normal(size=(4, 5))
        np.testing.assert_array_equal(blk(Tensor(x)).data, x)


class TestBackward:
    def test_linear_outer_product(self, rng):
        W = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        x = rng.normal(size=(4, 1))
        T.tsum(W @ x).backward()
        np.testing.assert_allclose(W.grad, np.outer(np.ones(3), x[:, 0]), atol=1e-15)

    def test_constant_loss_zero_grad(self):
        store = ParamStore(0)
        w = store.uniform("w", (3,), 3)
        loss = T.tsum(w * 0.0)
        loss.backward()
        assert np.all(w.grad == 0)

    def test_non_scalar_is_contract_error(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            (w * 2).backward()

    def test_unreachable_param_keeps_no_grad(self):
        store = ParamStore(0)
        a = store.uniform("a", (2,), 2)
        b = store.uniform("b", (2,), 2)
        T.tsum(a * a).backward()
        assert b.grad is None

    def test_shared_node_accumulates(self):
        w = Tensor(np.array([2.0]), requires_grad=True)
        y = w * w
        T.tsum(y + y).backward()
        np.testing.assert_allclose(w.grad, [8.0])

    def test_bit_identical_repeat(self, rng):
        store = ParamStore(5)
        net = ResNetFC(store, "r", 4, 3, hidden=8)
        x = Tensor(rng.normal(size=(6, 4)))
        grads = []
        for _ in range(2):
            store.zero_grad()
            T.tsum(T.square(net(x))).backward()
            grads.append({k: p.grad.copy() for k, p in store.items()})
        for k in grads[0]:
            assert grads[0][k].tobytes() == grads[1][k].tobytes()


class TestCheckGradients:
    def test_quadratic(self, rng):
        store = ParamStore(0)
        store.add("theta", rng.normal(size=(5,)))
        rep = check_gradients(lambda: T.tsum(T.square(store["theta"])), store, 1e-6)
        assert rep.ok and rep.worst < 1e-6

    def test_softmax_mlp_chain(self, rng):
        store = ParamStore(1)
        blk = MlpBlock(store, "m", [3, 4, 3])
        x = Tensor(rng.normal(size=(2, 3)))
        tgt = rng.normal(size=(2, 3))
        f = lambda: T.tsum(T.softmax(blk(x), axis=-1) * tgt)
        rep = check_gradients(f, store, 1e-3)
        assert rep.ok, str(rep)
        assert set(rep.passed) == set(store.params)

    def test_corrupted_rule_fails(self, rng):
        store = ParamStore(0)
        store.add("w", rng.normal(size=(4,)))

        def bad_square(a):
            return _make(a.data ** 2, (a,), lambda g: (g * 3.0 * a.data,))  # should be 2a

        rep = check_gradients(lambda: T.tsum(bad_square(store["w"])), store, 1e-3)
        assert not rep.ok

    def test_non_finite_raises(self):
        store = ParamStore(0)
        store.add("w", np.array([-1.0]))
        with pytest.raises(EvaluationError), np.errstate(invalid="ignore"):
            check_gradients(lambda: T.tsum(T.log(store["w"])), store)


class TestAdamW:
    def test_zero_grad_zero_decay_is_noop(self, rng):
        store = ParamStore(0)
        w = store.add("w", rng.normal(size=(3,)))
        before = w.data.copy()
        w.grad = np.zeros(3)
        adamw_step(store, 1e-2, weight_decay=0.0)
        np.testing.assert_array_equal(w.data, before)

    def test_moves_against_gradient(self):
        store = ParamStore(0)
        w = store.add("w", np.array([0.5]))
        for _ in range(20):
            w.grad = np.array([1.5])
            adamw_step(store, 1e-2, weight_decay=0.0)
        assert w.data[0] < 0.5

    def test_hand_computed_step(self):
        # one update on known state, evaluated by hand
        store = ParamStore(0)
        w = store.add("w", np.array([0.8]))
        store.state["w"] = {"m": np.array([0.1]), "v": np.array([0.02]), "step": 3}
        w.grad = np.array([-0.4])
        lr, wd, b1, b2, eps = 1e-3, 0.01, 0.9, 0.999, 1e-8
        adamw_step(store, lr, wd)
        theta = 0.8 * (1 - lr * wd)
        m = b1 * 0.1 + (1 - b1) * -0.4
        v = b2 * 0.02 + (1 - b2) * 0.16
        mhat, vhat = m / (1 - b1 ** 4), v / (1 - b2 ** 4)
        theta -= lr * mhat / (np.sqrt(vhat) + eps)
        assert abs(w.data[0] - theta) < 1e-12
        assert store.state["w"]["step"] == 4

    def test_rejects_non_positive_lr(self):
        with pytest.raises(ConfigError):
            adamw_step(ParamStore(0), 0.0)

    def test_skips_params_without_grad(self):
        store = ParamStore(0)
        w = store.add("w", np.array([1.0]))
        adamw_step(store, 1e-2)
        assert w.data[0] == 1.0 and "w" not in store.state


class TestSegments:
    def test_segment_sum_and_exclusive_cumsum(self):
        a = Tensor(np.array([1.0, 2.0, 3.0, 4.0, 5.0]))
        seg = np.array([0, 0, 2, 2, 2])
        np.testing.assert_array_equal(T.segment_sum(a, seg, 3).data, [3.0, 0.0, 12.0])
        np.testing.assert_array_equal(T.segment_exclusive_cumsum(a, seg).data, [0, 1, 0, 3, 7])

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(0, 4), min_size=1, max_size=30))
    def test_exclusive_cumsum_matches_loop(self, labels):
        seg = np.sort(np.array(labels))
        vals = np.arange(len(seg), dtype=float) * 0.5 + 1
        got = T.segment_exclusive_cumsum(Tensor(vals), seg).data
        want = np.zeros_like(vals)
        for i in range(1, len(seg)):
            want[i] = want[i - 1] + vals[i - 1] if seg[i] == seg[i - 1] else 0.0
        np.testing.assert_allclose(got, want, atol=1e-12)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        store = ParamStore(0)
        ResNetFC(store, "r", 3, 2, hidden=4)
        save_store(tmp_path / "c.npz", store, {"step": 7})
        other = ParamStore(99)
        ResNetFC(other, "r", 3, 2, hidden=4)
        meta = load_store(tmp_path / "c.npz", other)
        assert other.digest() == store.digest()
        assert meta["step"] == 7

    def test_arrays_and_meta(self, tmp_path):
        save_checkpoint(tmp_path / "a.npz", {"x.y": np.arange(6.0).reshape(2, 3)}, {"k": 1})
        arrays, meta = load_checkpoint(tmp_path / "a.npz")
        np.testing.assert_array_equal(arrays["x.y"], np.arange(6.0).reshape(2, 3))
        assert meta["k"] == 1

    def test_shape_mismatch(self, tmp_path):
        a = ParamStore(0)
        a.add("w", np.zeros((2, 2)))
        save_store(tmp_path / "a.npz", a)
        b = ParamStore(0)
        b.add("w", np.zeros((3,)))
        with pytest.raises(DimensionError):
            load_store(tmp_path / "a.npz", b)


def test_duplicate_param_id():
    store = ParamStore(0)
    store.add("w", np.zeros(2))
    with pytest.raises(KeyError):
        store.add("w", np.zeros(2))


def test_grad_shape_matches_data(rng):
    store = ParamStore(0)
    net = MlpBlock(store, "m", [3, 4, 2])
    T.tsum(net(Tensor(rng.normal(size=(5, 3))))).backward()
    for _, p in store.items():
        assert p.grad.shape == p.data.shape
