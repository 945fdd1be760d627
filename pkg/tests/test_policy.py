import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geoprior.camera import Observation, look_at
from geoprior.diffcore import ConfigError, ContractError, ParamStore, Tensor, check_gradients
from geoprior.diffcore import tensor as T
from geoprior.policy import (LAMBDA_SCHEDULE, ActionHead, LatentDynamics, Policy, PolicyEncoder,
                             TrajectoryFrame, ZeroNormCounter, collapse_adjacent, cosine_loss,
                             decode_action, distill_loss, encode_policy, fixed_projection,
                             keyframe_candidates, lambda_at, lambda_boundaries, latent_dynamics,
                             patch_pool, policy_loss, reference_tokens, select_keyframes)
from geoprior.volumetric import DenseVolume

QUAT = np.array([1.0, 0, 0, 0])
B = np.array([-0.375, -0.5, 0.6, 1.0, 0.5, 1.6])


def frames(positions, gripper):
    return [TrajectoryFrame(None, np.r_[p, QUAT], int(g), 0, None) for p, g in zip(positions, gripper)]


def literal_keyframes(positions, gripper, thr):
    """Predicate evaluated frame by frame, then runs collapsed to their last index."""
    n = len(positions)
    cand = []
    for t in range(n):
        fire = t == n - 1
        if t >= 1:
            fire = fire or gripper[t] != gripper[t - 1]
            fire = fire or float(np.sqrt(np.sum((positions[t] - positions[t - 1]) ** 2))) < thr
        if fire:
            cand.append(t)
    return [c for c in cand if c + 1 not in cand]


def random_trajectory(rng, n):
    pos = [rng.uniform(-0.3, 0.3, 3)]
    grip = [int(rng.integers(2))]
    for _ in range(n - 1):
        step = 0.0 if rng.random() < 0.2 else rng.uniform(0.002, 0.05)
        d = rng.normal(size=3)
        pos.append(pos[-1] + step * d / np.linalg.norm(d))
        grip.append(1 - grip[-1] if rng.random() < 0.1 else grip[-1])
    return np.array(pos), grip


def obs(rng, n=16):
    cam = look_at([0, -1, 1], [0, 0, 1], n, n)
    return Observation(rng.random((n, n, 3)), rng.uniform(0.5, 2, (n, n)), cam)


class TestFrame:
    def test_validation(self):
        with pytest.raises(ValueError):
            TrajectoryFrame(None, np.r_[0, 0, 0, 2.0, 0, 0, 0], 0, 0, None)
        with pytest.raises(ValueError):
            TrajectoryFrame(None, np.r_[0, 0, 0, QUAT], 2, 0, None)

    def test_proprio(self):
        f = TrajectoryFrame(None, np.r_[1, 2, 3, QUAT], 1, 0, None)
        np.testing.assert_array_equal(f.proprio, [1, 2, 3, 1, 0, 0, 0, 1])


class TestKeyframes:
    def test_constant_velocity(self):
        pos = np.linspace(0, 1, 20)[:, None] * [1, 0, 0]
        assert select_keyframes(frames(pos, [0] * 20)) == [19]

    def test_toggle(self):
        pos = np.linspace(0, 1, 20)[:, None] * [1, 0, 0]
        assert 5 in select_keyframes(frames(pos, [0] * 5 + [1] * 15))

    def test_pause_and_toggle(self):
        x = np.r_[np.linspace(0, 0.5, 10), [0.5, 0.5, 0.5], np.linspace(0.55, 1, 7)]
        pos = x[:, None] * [1, 0, 0]
        grip = [0] * 12 + [1] * 8
        got = select_keyframes(frames(pos, grip))
        assert got == literal_keyframes(pos, grip, 1e-3) == [12, 19]

    def test_empty(self):
        with pytest.raises(ContractError):
            select_keyframes([])

    def test_collapse(self):
        assert collapse_adjacent([1, 2, 3, 7, 9, 10]) == [3, 7, 10]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 100_000), st.integers(2, 40))
    def test_matches_literal_oracle(self, seed, n):
        pos, grip = random_trajectory(np.random.default_rng(seed), n)
        k = select_keyframes(frames(pos, grip), 1e-3)
        assert k == literal_keyframes(pos, grip, 1e-3)
        assert k == sorted(set(k)) and k[-1] == n - 1 and set(k) <= set(range(n))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 100_000), st.integers(2, 40))
    def test_fixed_point(self, seed, n):
        pos, grip = random_trajectory(np.random.default_rng(seed), n)
        k = select_keyframes(frames(pos, grip), 1e-3)
        fired = set(keyframe_candidates(pos, grip, 1e-3))
        assert set(k) <= fired
        assert collapse_adjacent(k) == k


class TestEncoder:
    def test_deterministic_shape(self, rng):
        enc = PolicyEncoder(ParamStore(0), num_latents=5, channels=6, patch=4)
        o = obs(rng)
        a, b = encode_policy(o, enc).data, encode_policy(o, enc).data
        np.testing.assert_array_equal(a, b)
        assert a.shape == (5, 6)
        assert encode_policy(obs(rng, 24), enc).shape == (5, 6)

    def test_too_small_image(self, rng):
        enc = PolicyEncoder(ParamStore(0), num_latents=2, channels=4, patch=32)
        with pytest.raises(ConfigError):
            encode_policy(obs(rng), enc)

    def test_gradients(self, rng):
        store = ParamStore(2)
        enc = PolicyEncoder(store, num_latents=3, channels=4, patch=4, blocks=2)
        o = obs(rng, 8)
        w = rng.normal(size=(3, 4))
        names = ["enc.embed.b", "enc.latents", "enc.blk0.q.W", "enc.blk1.v.b", "enc.blk0.k.b"]
        rep = check_gradients(lambda: T.tsum(encode_policy(o, enc) * w), store, 1e-3, names=names)
        assert rep.ok, str(rep)


class TestReferenceTokens:
    def test_patch_pool_loop_oracle(self, rng):
        D, p, C = 4, 2, 3
        vals = rng.normal(size=(D ** 3, C))
        got = patch_pool(Tensor(vals), D, p).data
        exp = np.zeros((8, C))
        cnt = np.zeros(8)
        for i in range(D):
            for j in range(D):
                for k in range(D):
                    b = ((i // p) * 2 + j // p) * 2 + k // p
                    exp[b] += vals[(i * D + j) * D + k]
                    cnt[b] += 1
        np.testing.assert_allclose(got, exp / cnt[:, None], atol=1e-15)

    def test_zero_volume(self):
        vol = DenseVolume(4, B, Tensor(np.zeros((64, 3))))
        tok = reference_tokens(vol, 2, 5, fixed_projection(3, 6))
        assert tok.shape == (5, 6) and np.all(tok.data == 0)

    def test_top_norm_in_patch_order(self, rng):
        vol = DenseVolume(4, B, Tensor(rng.normal(size=(64, 3))))
        tok = reference_tokens(vol, 2, 3, np.eye(3)).data
        pooled = patch_pool(Tensor(vol.values.data), 4, 2).data
        keep = np.sort(np.argsort(-np.linalg.norm(pooled, axis=1), kind="stable")[:3])
        np.testing.assert_array_equal(tok, pooled[keep])

    def test_errors(self, rng):
        vol = DenseVolume(4, B, Tensor(rng.normal(size=(64, 3))))
        with pytest.raises(ConfigError):
            reference_tokens(vol, 3, 1, np.eye(3))
        with pytest.raises(ConfigError):
            reference_tokens(vol, 2, 9, np.eye(3))

    def test_projection_orthonormal(self):
        P = fixed_projection(5, 3, seed=1)
        np.testing.assert_allclose(P.T @ P, np.eye(3), atol=1e-12)

    def test_no_gradient_into_extractor(self, rng):
        store = ParamStore(0)
        v = store.add("vol", rng.normal(size=(64, 3)))
        vol = DenseVolume(4, B, v * 2.0)
        ref = reference_tokens(vol, 2, 4, np.eye(3))
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        total, _, _ = distill_loss(x, ref, x * 1.0, ref)
        total.backward()
        assert v.grad is None or np.all(v.grad == 0)
        assert x.grad is not None and np.any(x.grad != 0)


class TestDynamicsAndHead:
    def test_identity_init(self, rng):
        dyn = LatentDynamics(ParamStore(0), channels=4, num_tasks=3, embed=5, hidden=7)
        x = Tensor(rng.normal(size=(6, 4)))
        np.testing.assert_array_equal(latent_dynamics(x, np.zeros(8), 0, dyn).data, x.data)

    def test_task_sensitivity(self, rng):
        store = ParamStore(0)
        dyn = LatentDynamics(store, channels=4, num_tasks=3, embed=5, hidden=7)
        dyn.mlp.layers[-1].W.data[:] = rng.normal(size=dyn.mlp.layers[-1].W.shape)
        x = Tensor(rng.normal(size=(6, 4)))
        outs = [latent_dynamics(x, np.ones(8), t, dyn).data for t in range(3)]
        assert not np.allclose(outs[0], outs[1]) and not np.allclose(outs[1], outs[2])
        with pytest.raises(ContractError):
            latent_dynamics(x, np.ones(8), 3, dyn)

    def test_dynamics_gradients(self, rng):
        store = ParamStore(1)
        dyn = LatentDynamics(store, channels=3, num_tasks=2, embed=2, hidden=4)
        dyn.mlp.layers[-1].W.data[:] = rng.normal(size=dyn.mlp.layers[-1].W.shape) * 0.5
        x = Tensor(rng.normal(size=(2, 3)))
        w = rng.normal(size=(2, 3))
        rep = check_gradients(lambda: T.tsum(latent_dynamics(x, rng_p, 1, dyn) * w), store, 1e-3)
        assert rep.ok, str(rep)

    def test_zero_head(self, rng):
        store = ParamStore(0)
        head = ActionHead(store, 4, 6)
        for n in store:
            store[n].data[:] = 0
        a = decode_action(Tensor(rng.normal(size=(5, 4))), head).data
        np.testing.assert_array_equal(a, [0, 0, 0, 1, 0, 0, 0, 0.5])

    def test_head_unit_quaternion_and_gradients(self, rng):
        store = ParamStore(3)
        head = ActionHead(store, 3, 4)
        x = Tensor(rng.normal(size=(2, 3)))
        a = decode_action(x, head).data
        assert a.shape == (8,) and abs(np.linalg.norm(a[3:7]) - 1) < 1e-12 and 0 < a[7] < 1
        w = rng.normal(size=8)
        rep = check_gradients(lambda: T.tsum(decode_action(x, head) * w), store, 1e-3)
        assert rep.ok, str(rep)

    def test_policy_shapes(self, rng):
        pol = Policy(ParamStore(0), num_latents=4, channels=6, num_tasks=2, patch=4, hidden=8)
        x, xn, a = pol(obs(rng), np.r_[0, 0, 0, QUAT, 0], 1)
        assert x.shape == xn.shape == (4, 6) and a.shape == (8,)


rng_p = np.array([0.1, -0.2, 0.3, 1.0, 0, 0, 0, 1.0])


class TestLosses:
    def test_distill_examples(self, rng):
        x = rng.normal(size=(5, 4))
        assert abs(distill_loss(Tensor(x), x, Tensor(x), x)[0].data) < 1e-15
        assert abs(distill_loss(Tensor(-x), x, Tensor(-x), x)[0].data - 4.0) < 1e-12
        assert abs(distill_loss(Tensor(-x), x, Tensor(-x), x, multi_step=False)[0].data - 2.0) < 1e-12

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_scale_invariance(self, seed):
        r = np.random.default_rng(seed)
        a, b = r.normal(size=(6, 3)), r.normal(size=(6, 3))
        s = r.uniform(0.1, 10, size=(6, 1))
        l1 = cosine_loss(Tensor(a), b).data
        assert abs(cosine_loss(Tensor(a * s), b).data - l1) < 1e-12
        assert abs(cosine_loss(Tensor(a * 10), b).data - l1) < 1e-12
        assert 0 <= l1 <= 2

    def test_zero_norm_counted(self):
        c = ZeroNormCounter()
        a = np.array([[0.0, 0, 0], [1, 0, 0]])
        b = np.array([[1.0, 0, 0], [1, 0, 0]])
        assert cosine_loss(Tensor(a), b, c).data == 0.5
        assert c.count == 1

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            cosine_loss(Tensor(np.ones((2, 3))), np.ones((3, 3)))

    def test_distill_gradient(self, rng):
        store = ParamStore(0)
        store.add("x", rng.normal(size=(3, 4)))
        store.add("y", rng.normal(size=(3, 4)))
        r1, r2 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        rep = check_gradients(lambda: distill_loss(store["x"], r1, store["y"], r2)[0], store, 1e-3)
        assert rep.ok, str(rep)

    def test_policy_loss_arithmetic(self):
        a = np.array([1.0, 0, 0, 1, 0, 0, 0, 1])
        e = np.array([0.0, 0, 0, 1, 0, 0, 0, 0])
        loss, bc = policy_loss(Tensor(a), e, Tensor(0.5), 0.3)
        assert bc.data == 2.0 and abs(loss.data - 2.15) < 1e-15
        assert policy_loss(Tensor(e), e, Tensor(0.0), 1.0)[0].data == 0.0
        assert policy_loss(Tensor(a), e, Tensor(7.0), 0.0)[0].data == 2.0
        with pytest.raises(ValueError):
            policy_loss(Tensor(a), e, Tensor(0.1), -1.0)


class TestLambdaSchedule:
    def test_boundaries(self):
        assert lambda_boundaries(2000) == [0, 334, 667, 1000, 1334, 1667]

    @pytest.mark.parametrize("steps", [6, 7, 100, 2000, 12_000])
    def test_takes_each_value_on_equal_segments(self, steps):
        vals = [lambda_at(s, steps) for s in range(steps)]
        assert sorted(set(vals), reverse=True) == list(LAMBDA_SCHEDULE)
        runs = [vals.count(v) for v in LAMBDA_SCHEDULE]
        assert max(runs) - min(runs) <= 1
        assert vals == sorted(vals, reverse=True)
