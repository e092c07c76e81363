"""Network forward/backward, Huber, Adam, gradient checks, checkpoints."""

import numpy as np
import pytest

from pushgrasp import qfunc
from pushgrasp.config import ArchConfig, OptimConfig

TINY = ArchConfig(encoder_channels=(6, 8, 10), decoder_channels=(4, 4, 4))


def tiny_params(seed=0, dtype=np.float64):
    return qfunc.init_params(seed, TINY, dtype=dtype)


class TestInit:
    def test_deterministic(self):
        a = qfunc.init_params(3, TINY)
        b = qfunc.init_params(3, TINY)
        for x, y in zip(a.flatten(), b.flatten()):
            assert np.array_equal(x, y)

    def test_seed_changes_weights(self):
        a = qfunc.init_params(3, TINY)
        b = qfunc.init_params(4, TINY)
        assert not np.array_equal(a.flatten()[0], b.flatten()[0])

    def test_degenerate_arch_rejected(self):
        with pytest.raises(qfunc.ArchError):
            qfunc.init_params(0, ArchConfig(encoder_channels=()))
        with pytest.raises(qfunc.ArchError):
            qfunc.init_params(0, ArchConfig(encoder_channels=(4, 0, 8)))

    def test_default_param_count_below_200k(self):
        arch = ArchConfig()
        n = qfunc.count_params(arch)
        # independent arithmetic over the layer plan
        expect = 0
        e1, e2, e3 = arch.encoder_channels
        d1, d2, d3 = arch.decoder_channels
        for cin, cout, k in [(4, e1, 3), (e1, e2, 3), (e2, e3, 3)]:
            expect += cout * cin * k * k + cout
        for cin, cout, k in [(e3 + e2, d1, 3), (d1 + e1, d2, 3),
                             (d2 + 4, d3, 3), (d3, 1, 1)]:
            expect += 2 * (cout * cin * k * k + cout)
        assert n == expect
        assert n < 200_000

    def test_head_structures_identical(self):
        p = tiny_params()
        for g, h in zip(p.grasp, p.push):
            assert g.w.shape == h.w.shape
            assert g.b.shape == h.b.shape


class TestForward:
    def test_zero_params_zero_input(self):
        p = tiny_params()
        for arr in p.flatten():
            arr[:] = 0
        g, u, _ = qfunc.forward(p, np.zeros((1, 4, 16, 16)))
        assert not g.any() and not u.any()

    @pytest.mark.parametrize("size", [32, 64, 128])
    def test_output_matches_input_resolution(self, size):
        p = tiny_params(dtype=np.float32)
        x = np.zeros((1, 4, size, size), dtype=np.float32)
        g, u, _ = qfunc.forward(p, x)
        assert g.shape == (1, size, size)
        assert u.shape == (1, size, size)

    def test_deterministic(self):
        p = tiny_params(dtype=np.float32)
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 4, 16, 16)).astype(np.float32)
        g1, u1, _ = qfunc.forward(p, x)
        g2, u2, _ = qfunc.forward(p, x)
        assert np.array_equal(g1, g2) and np.array_equal(u1, u2)

    def test_shape_mismatch_rejected(self):
        p = tiny_params()
        with pytest.raises(ValueError):
            qfunc.forward(p, np.zeros((1, 3, 16, 16)))
        with pytest.raises(ValueError):
            qfunc.forward(p, np.zeros((1, 4, 20, 20)))   # not divisible by 8

    def test_perturbation_stays_in_receptive_field(self):
        p = tiny_params(dtype=np.float64)
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 4, 64, 64))
        g0, u0, _ = qfunc.forward(p, x)
        x2 = x.copy()
        x2[0, 3, 32, 32] += 1.0
        g1, u1, _ = qfunc.forward(p, x2)
        # encoder RF 15 px + decoder 3x3 stages at strides 4/2/1 and nearest
        # upsampling alignment: radius stays well under 24
        ii, jj = np.nonzero(np.abs(g1[0] - g0[0]) > 1e-12)
        assert len(ii) > 0
        rad = np.max(np.maximum(np.abs(ii - 32), np.abs(jj - 32)))
        assert rad <= 24
        near = np.abs(g1[0, 30:35, 30:35] - g0[0, 30:35, 30:35])
        assert near.max() > 0


class TestBackward:
    def test_zero_seed_zero_grads(self):
        p = tiny_params()
        x = np.random.default_rng(0).standard_normal((1, 4, 16, 16))
        _, _, tr = qfunc.forward(p, x)
        g = qfunc.backward(p, tr, ("grasp", 4, 4), 0.0)
        assert all(not a.any() for a in g.arrays)

    def test_push_action_leaves_grasp_head_untouched(self):
        p = tiny_params()
        x = np.random.default_rng(0).standard_normal((1, 4, 16, 16))
        _, _, tr = qfunc.forward(p, x)
        g = qfunc.backward(p, tr, ("push", 3, 5), 1.0)
        n_enc = 2 * len(p.encoder)
        n_head = 2 * len(p.grasp)
        grasp_slice = slice(n_enc, n_enc + n_head)
        assert not any(g.active[grasp_slice])
        assert all(not a.any() for a in g.arrays[grasp_slice])
        # encoder and push head do receive gradient
        assert any(a.any() for a in g.arrays[:n_enc])

    def test_out_of_bounds_pixel_rejected(self):
        p = tiny_params()
        x = np.zeros((1, 4, 16, 16))
        _, _, tr = qfunc.forward(p, x)
        with pytest.raises(ValueError):
            qfunc.backward(p, tr, ("grasp", 16, 0), 1.0)

    def test_gradients_match_finite_differences(self):
        p = tiny_params(seed=11)
        x = np.random.default_rng(2).standard_normal((1, 4, 16, 16))
        err = qfunc.grad_check(p, x, ("grasp", 5, 9), eps=1e-4, d_loss_d_q=1.3)
        assert err < 1e-4

    def test_corrupted_gradient_detected(self):
        # the finite-difference harness must notice a broken gradient
        p = tiny_params(seed=7)
        x = np.random.default_rng(3).standard_normal((1, 4, 16, 16))
        action = ("push", 6, 6)
        _, _, tr = qfunc.forward(p, x)
        grads = qfunc.backward(p, tr, action, 1.0)
        flat = p.flatten()
        ai = next(i for i, on in enumerate(grads.active) if grads.arrays[i].any())
        arr = flat[ai]
        idx = np.unravel_index(int(np.abs(grads.arrays[ai]).argmax()), arr.shape)
        corrupted = float(grads.arrays[ai][idx]) * 3.0 + 0.1
        orig = arr[idx]
        eps = 1e-4

        def loss(params):
            gq, pq, _ = qfunc.forward(params, x)
            return float(pq[0, 6, 6])

        arr[idx] = orig + eps
        lp = loss(p)
        arr[idx] = orig - eps
        lm = loss(p)
        arr[idx] = orig
        num = (lp - lm) / (2 * eps)
        rel = abs(num - corrupted) / max(abs(num), abs(corrupted), 1e-6)
        assert rel > 1e-2


class TestHuber:
    def test_zero(self):
        assert qfunc.huber(0.0, 1.0) == (0.0, 0.0)

    def test_boundary(self):
        loss, dl = qfunc.huber(1.0, 1.0)
        assert loss == pytest.approx(0.5)
        assert dl == pytest.approx(1.0)

    def test_linear_region(self):
        loss, dl = qfunc.huber(2.0, 1.0)
        assert loss == pytest.approx(1.5)
        assert dl == 1.0
        loss_n, dl_n = qfunc.huber(-2.0, 1.0)
        assert loss_n == pytest.approx(1.5)
        assert dl_n == -1.0

    def test_bad_kappa(self):
        with pytest.raises(ValueError):
            qfunc.huber(1.0, 0.0)


class TestAdam:
    def setup_method(self):
        self.p = tiny_params(seed=5, dtype=np.float32)
        self.state = qfunc.AdamState.zeros(self.p)
        self.cfg = OptimConfig(lr=1e-3)

    def zero_grads(self, active=True):
        g = qfunc.Grads([np.zeros_like(a) for a in self.p.flatten()],
                        [active] * len(self.p.flatten()))
        return g

    def test_zero_grads_from_zero_state(self):
        p2, s2 = qfunc.adam_step(self.p, self.zero_grads(), self.state, self.cfg)
        for a, b in zip(self.p.flatten(), p2.flatten()):
            assert np.array_equal(a, b)
        assert all(not m.any() for m in s2.m)

    def test_first_step_closed_form(self):
        grads = self.zero_grads()
        g0 = np.random.default_rng(0).standard_normal(
            grads.arrays[0].shape).astype(np.float32)
        grads.arrays[0][:] = g0
        p2, s2 = qfunc.adam_step(self.p, grads, self.state, self.cfg)
        # t=1: mhat = g, vhat = g^2 -> update = -lr * g / (|g| + eps)
        expect = self.p.flatten()[0] - np.float32(self.cfg.lr) * g0 / (
            np.abs(g0) + np.float32(self.cfg.eps))
        assert np.allclose(p2.flatten()[0], expect, rtol=1e-5, atol=1e-7)
        assert s2.t[0] == 1

    def test_deterministic(self):
        grads = self.zero_grads()
        grads.arrays[2][:] = 0.3
        a1, s1 = qfunc.adam_step(self.p, grads, self.state, self.cfg)
        a2, s2 = qfunc.adam_step(self.p, grads, self.state, self.cfg)
        for x, y in zip(a1.flatten(), a2.flatten()):
            assert np.array_equal(x, y)
        assert s1.t == s2.t

    def test_inactive_arrays_untouched(self):
        grads = self.zero_grads(active=False)
        grads.arrays[0][:] = 1.0    # nonzero but inactive
        p2, s2 = qfunc.adam_step(self.p, grads, self.state, self.cfg)
        assert np.array_equal(p2.flatten()[0], self.p.flatten()[0])
        assert s2.t[0] == 0


class TestCheckpointBlob:
    def test_round_trip_bytes(self):
        p = qfunc.init_params(1, TINY, dtype=np.float32)
        state = qfunc.AdamState.zeros(p)
        state.m[0][:] = 0.25
        state.t[0] = 7
        blob = qfunc.params_to_blob(p, state)
        p2, s2 = qfunc.params_from_blob(blob)
        assert qfunc.params_to_blob(p2, s2) == blob
        for a, b in zip(p.flatten(), p2.flatten()):
            assert np.array_equal(a, b)
        assert s2.t[0] == 7

    def test_truncated(self):
        blob = qfunc.params_to_blob(qfunc.init_params(1, TINY, dtype=np.float32))
        with pytest.raises(qfunc.CheckpointError):
            qfunc.params_from_blob(blob[:50])

    def test_bad_magic(self):
        with pytest.raises(qfunc.CheckpointError):
            qfunc.params_from_blob(b"XXXX" + b"\0" * 100)
