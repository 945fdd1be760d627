import numpy as np
import pytest

from geoprior.diffcore import MlpBlock, ParamStore, Tensor, check_gradients
from geoprior.diffcore import tensor as T
from geoprior.seedgen import (AttentionProj, DeformableAttnParams, SeedGenerator, VoxelQuerySet,
                              avg_pool_volume, coarse_cross_attention, decode_seeds,
                              deformable_cross_attention, deformable_offsets, full_cross_attention,
                              lattice, pool_windows, to_world)
from geoprior.volumetric import DenseVolume, FetchCounter, sample_trilinear

B = np.array([-0.375, -0.5, 0.6, 1.0, 0.5, 1.6])


def volume(rng, D=6, C=4):
    return DenseVolume(D, B, Tensor(rng.normal(size=(D ** 3, C))))


class TestPooling:
    def test_unequal_windows(self):
        w = pool_windows(100, 7)
        sizes = np.diff(w)
        assert w[0] == 0 and w[-1] == 100
        assert set(sizes) <= {14, 15}

    def test_matches_loop(self, rng):
        D, d = 7, 3
        vals = rng.normal(size=(D ** 3, 2))
        got = avg_pool_volume(Tensor(vals), D, d).data
        g = vals.reshape(D, D, D, 2)
        w = pool_windows(D, d)
        for i in range(d):
            for j in range(d):
                for k in range(d):
                    blk = g[w[i]:w[i + 1], w[j]:w[j + 1], w[k]:w[k + 1]].reshape(-1, 2).mean(0)
                    np.testing.assert_allclose(got[(i * d + j) * d + k], blk, atol=1e-12)


class TestCoarse:
    def setup_method(self):
        self.store = ParamStore(0)
        self.q = VoxelQuerySet.create(self.store, 3, 4)
        self.proj = AttentionProj(self.store, "c", 4)

    def test_uniform_volume_uniform_rows(self):
        vol = DenseVolume(6, B, Tensor(np.ones((216, 4)) * 0.7))
        _, w = coarse_cross_attention(self.q, vol, self.proj)
        np.testing.assert_allclose(w.data, 1 / 27, atol=1e-12)

    def test_rows_sum_to_one(self, rng):
        _, w = coarse_cross_attention(self.q, volume(rng), self.proj)
        assert np.all(w.data >= 0)
        np.testing.assert_allclose(w.data.sum(1), 1.0, atol=1e-9)

    def test_dominant_logit(self, rng):
        bias = np.zeros((27, 27))
        bias[:, 5] = 50.0
        _, w = coarse_cross_attention(self.q, volume(rng), self.proj, bias)
        assert np.all(w.data[:, 5] > 0.999)

    def test_lattice_regular(self):
        ref = lattice(4)
        assert ref.shape == (64, 3)
        assert set(np.round(ref[:, 0] * 8).astype(int)) == {1, 3, 5, 7}


class TestDeformable:
    def make(self, C=4, Np=8, seed=0):
        store = ParamStore(seed)
        return store, DeformableAttnParams(store, "dca", C, Np, hidden=6, cpb_hidden=4)

    def test_degenerate_sampling_gives_value_feature(self, rng):
        store, p = self.make()
        for layer in p.offsets.layers:
            layer.W.data[:] = 0
            layer.b.data[:] = 0
        p.proj.q.W.data[:] = 0  # uniform logits
        vol = volume(rng)
        ref = lattice(2)
        q = Tensor(rng.normal(size=(8, 4)))
        out, w, loc = deformable_cross_attention(q, vol, p, ref)
        feat = sample_trilinear(vol, to_world(ref, B))
        np.testing.assert_allclose(out.data, p.proj.v(feat).data, atol=1e-12)
        np.testing.assert_allclose(w.data, 1 / 8, atol=1e-15)

    def test_fetch_law(self, rng):
        store, p = self.make()
        proj = AttentionProj(store, "full", 4)
        q = Tensor(rng.normal(size=(27, 4)))
        for D in (4, 6, 8):
            c1, c2 = FetchCounter(), FetchCounter()
            vol = volume(rng, D)
            deformable_cross_attention(q, vol, p, lattice(3), c1)
            full_cross_attention(q, vol, proj, c2)
            assert c1.count == 27 * 8
            assert c2.count == 27 * D ** 3

    def test_offsets_bounded_and_locations_inside(self, rng):
        store, p = self.make()
        for layer in p.offsets.layers:
            layer.W.data = rng.normal(scale=5.0, size=layer.W.shape)
        ext = B[3:] - B[:3]
        q = Tensor(rng.normal(size=(27, 4)))
        off = deformable_offsets(q, p, ext).data
        assert np.all(np.abs(off) <= 0.25 * ext + 1e-15)
        _, w, loc = deformable_cross_attention(q, volume(rng), p, lattice(3))
        assert np.all(loc.data >= B[:3]) and np.all(loc.data <= B[3:])
        np.testing.assert_allclose(w.data.sum(1), 1.0, atol=1e-9)

    def test_zero_cpb_equals_no_cpb(self, rng):
        _, p = self.make()
        q = Tensor(rng.normal(size=(8, 4)))
        vol = volume(rng)
        a = deformable_cross_attention(q, vol, p, lattice(2), use_cpb=True)[0]
        b = deformable_cross_attention(q, vol, p, lattice(2), use_cpb=False)[0]
        assert a.data.tobytes() == b.data.tobytes()

    def test_offset_init_radius(self):
        _, p = self.make()
        init = np.tanh(p.offsets.layers[-1].b.data.reshape(8, 3)) * 0.25
        np.testing.assert_allclose(np.linalg.norm(init, axis=1), 0.1, atol=1e-12)


class TestDecode:
    def test_zero_decoder_centre(self, rng):
        dec = MlpBlock(ParamStore(0), "d", [4, 5, 3], zero_last=True)
        seeds = decode_seeds(Tensor(rng.normal(size=(10, 4))), dec, B)
        np.testing.assert_allclose(seeds.data, np.tile((B[:3] + B[3:]) / 2, (10, 1)))

    def test_shape_d7(self, rng):
        store = ParamStore(0)
        gen = SeedGenerator(store, channels=8, d=7, n_points=4, hidden=8)
        seeds, tokens = gen(volume(rng, 8, 8))
        assert seeds.shape == (343, 3) and tokens.shape == (343, 8)

    def test_inside_bounds_random_decoders(self, rng):
        tokens = Tensor(rng.normal(size=(20, 4)))
        for s in range(1000):
            dec = MlpBlock(ParamStore(s), "d", [4, 3])
            dec.layers[0].W.data *= 20.0
            p = decode_seeds(tokens, dec, B).data
            assert np.all(p >= B[:3]) and np.all(p <= B[3:])


class TestSeedGradients:
    def test_coarse(self, rng):
        store = ParamStore(2)
        q = VoxelQuerySet.create(store, 2, 3)
        proj = AttentionProj(store, "c", 3)
        vol = volume(rng, 4, 3)
        w = rng.normal(size=(8, 3))
        rep = check_gradients(lambda: T.tsum(coarse_cross_attention(q, vol, proj)[0][:, :3] * w),
                              store, 1e-3, names=["seed.queries", "c.q.W", "c.v.b"])
        assert rep.ok, str(rep)

    def test_deformable_offsets_and_cpb(self, rng):
        store = ParamStore(4)
        p = DeformableAttnParams(store, "dca", 3, 2, hidden=3, cpb_hidden=3)
        for layer in p.cpb.layers:
            layer.W.data = rng.normal(scale=0.5, size=layer.W.shape)
        q = store.add("q", rng.normal(size=(2, 3)))
        vol = volume(rng, 4, 3)
        w = rng.normal(size=(2, 3))
        f = lambda: T.tsum(deformable_cross_attention(q, vol, p, lattice(2)[[0, 7]])[0] * w)
        names = ["dca.offset.1.W", "dca.offset.1.b", "dca.cpb.0.W", "dca.cpb.1.W", "q"]
        rep = check_gradients(f, store, 1e-3, names=names)
        assert rep.ok, str(rep)
