"""Masked selection, Double DQN targets, prioritized replay, learn steps."""

import numpy as np
import pytest

from pushgrasp import agent, percept, qfunc, world
from pushgrasp.config import AgentConfig, ArchConfig, OptimConfig, PerceptConfig, WorldConfig

ACFG = AgentConfig()
H = 16


def qmaps(rng=None, h=H, fill=None):
    if fill is not None:
        g = np.full((16, h, h), fill, dtype=np.float32)
        p = np.full((16, h, h), fill, dtype=np.float32)
    else:
        g = rng.standard_normal((16, h, h)).astype(np.float32)
        p = rng.standard_normal((16, h, h)).astype(np.float32)
    return agent.QMaps(grasp=g, push=p)


def full_mask(h=H):
    return np.ones((h, h), dtype=bool)


class TestMaskedQmaps:
    def test_full_mask_keeps_values(self):
        rng = np.random.default_rng(0)
        q = qmaps(rng)
        m = agent.masked_qmaps(q, full_mask(), None, push_dilate_radius=0)
        valid = agent.rotation_validity(H, H)
        assert np.array_equal(m.grasp[valid], q.grasp[valid])
        assert (m.grasp[~valid] == -np.inf).all()

    def test_single_pixel_goal_pins_argmax(self):
        rng = np.random.default_rng(1)
        q = qmaps(rng)
        goal = np.zeros((H, H), dtype=bool)
        goal[5, 7] = True
        m = agent.masked_qmaps(q, full_mask(), goal, push_dilate_radius=0)
        prim, k, u, v, _ = agent.argmax_qmaps(m)
        assert (u, v) == (5, 7)

    def test_goal_argmax_inside_regions(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            q = qmaps(rng)
            goal = rng.random((H, H)) < 0.15
            if not goal.any():
                continue
            m = agent.masked_qmaps(q, full_mask(), goal, push_dilate_radius=2)
            prim, k, u, v, _ = agent.argmax_qmaps(m)
            region = goal if prim == "grasp" else percept.dilate(goal, 2)
            assert region[u, v]

    def test_hierarchical_selector_property(self):
        # goal-masked argmax == unmasked argmax restricted to goal pixels
        rng = np.random.default_rng(3)
        for _ in range(50):
            q = qmaps(rng)
            goal = rng.random((H, H)) < 0.2
            if not goal.any():
                continue
            m = agent.masked_qmaps(q, full_mask(), goal, push_dilate_radius=0)
            k, u, v, value = agent.argmax_single(m.grasp)
            valid = agent.rotation_validity(H, H)
            restricted = np.where(valid & goal[None], q.grasp, -np.inf)
            assert value == restricted.max()

    def test_empty_goal_raises(self):
        rng = np.random.default_rng(4)
        with pytest.raises(agent.EmptySelectionError):
            agent.masked_qmaps(qmaps(rng), full_mask(),
                               np.zeros((H, H), dtype=bool))


class TestSelectAction:
    def test_dominant_grasp_selected(self):
        q = qmaps(fill=0.0)
        q.grasp[3, 4, 5] = 0.9
        q.push[1, 2, 2] = 0.3
        m = agent.masked_qmaps(q, full_mask(), None, 0)
        (prim, k, u, v), explored, val = agent.select_action(
            m, "agnostic", ACFG, np.random.default_rng(0), 0.0, full_mask(), None)
        assert (prim, k, u, v) == ("grasp", 3, 4, 5)
        assert not explored and val == pytest.approx(0.9)

    def test_forced_push_below_threshold(self):
        # oriented mode: weak grasp map forces a push even if its max is lower
        q = qmaps(fill=0.0)
        q.grasp[0, 3, 3] = 0.2          # below q_push_threshold = 0.5
        q.push[5, 8, 8] = 0.1
        m = agent.masked_qmaps(q, full_mask(), full_mask(), 0)
        (prim, k, u, v), _, val = agent.select_action(
            m, "oriented", ACFG, np.random.default_rng(0), 0.0,
            full_mask(), full_mask())
        assert prim == "push"
        assert (k, u, v) == (5, 8, 8)

    def test_agnostic_mode_never_forces(self):
        q = qmaps(fill=0.0)
        q.grasp[0, 3, 3] = 0.2
        q.push[5, 8, 8] = 0.1
        m = agent.masked_qmaps(q, full_mask(), None, 0)
        (prim, *_), _, _ = agent.select_action(
            m, "agnostic", ACFG, np.random.default_rng(0), 0.0, full_mask(), None)
        assert prim == "grasp"

    def test_tie_breaks_lexicographically(self):
        q = qmaps(fill=0.0)
        q.grasp[2, 5, 5] = 1.0
        q.push[2, 5, 5] = 1.0
        q.grasp[7, 1, 1] = 1.0
        m = agent.masked_qmaps(q, full_mask(), None, 0)
        prim, k, u, v, _ = agent.argmax_qmaps(m)
        # push sorts before grasp; within a primitive, lowest (k, u, v)
        assert (prim, k, u, v) == ("push", 2, 5, 5)

    def test_epsilon_one_always_explores(self):
        q = qmaps(fill=0.0)
        m = agent.masked_qmaps(q, full_mask(), None, 0)
        _, explored, _ = agent.select_action(
            m, "agnostic", ACFG, np.random.default_rng(1), 1.0, full_mask(), None)
        assert explored


class TestExplore:
    def test_single_pixel_always_chosen(self):
        mask = np.zeros((H, H), dtype=bool)
        mask[4, 9] = True
        rng = np.random.default_rng(0)
        for _ in range(20):
            prim, k, u, v = agent.explore_action(mask, None, rng, 0)
            assert (u, v) == (4, 9)

    def test_two_pixel_frequencies(self):
        mask = np.zeros((H, H), dtype=bool)
        mask[2, 2] = mask[9, 9] = True
        rng = np.random.default_rng(7)
        n = 10_000
        hits = 0
        for _ in range(n):
            _, _, u, v = agent.explore_action(mask, None, rng, 0)
            assert (u, v) in ((2, 2), (9, 9))
            hits += (u, v) == (2, 2)
        # binomial 3 sigma around p = 0.5
        sigma = np.sqrt(n * 0.25)
        assert abs(hits - n / 2) < 3 * sigma

    def test_never_outside_mask(self):
        rng = np.random.default_rng(3)
        mask = rng.random((H, H)) < 0.1
        mask[0, 0] = True
        for _ in range(200):
            prim, k, u, v = agent.explore_action(mask, None, rng, 0)
            region = mask if prim == "grasp" else percept.dilate(mask, 0)
            assert region[u, v]

    def test_empty_mask_raises(self):
        with pytest.raises(agent.EmptySelectionError):
            agent.explore_action(np.zeros((H, H), dtype=bool), None,
                                 np.random.default_rng(0), 0)


class TestTdTarget:
    def test_terminal_returns_reward(self):
        rng = np.random.default_rng(0)
        q = qmaps(rng)
        assert agent.td_target(1.0, q, q, full_mask(), None, True, 0.5) == 1.0

    def test_bellman_value(self):
        online = qmaps(fill=0.0)
        target = qmaps(fill=0.0)
        online.grasp[2, 3, 3] = 1.0     # online argmax
        target.grasp[2, 3, 3] = 0.8     # priced by the target net
        y = agent.td_target(0.5, online, target, full_mask(), None, False, 0.5,
                            push_dilate_radius=0)
        assert y == pytest.approx(0.5 + 0.5 * 0.8)

    def test_double_dqn_decoupling(self):
        # online and target disagree: read the target value at the online argmax
        online = qmaps(fill=0.0)
        target = qmaps(fill=0.0)
        online.grasp[1, 2, 2] = 1.0     # online's pick
        target.grasp[1, 2, 2] = 0.1     # what target thinks of it
        target.grasp[9, 9, 9] = 5.0     # target's own (ignored) maximum
        y = agent.td_target(0.0, online, target, full_mask(), None, False, 0.5,
                            push_dilate_radius=0)
        assert y == pytest.approx(0.05)

    def test_gamma_zero_returns_reward(self):
        rng = np.random.default_rng(1)
        q = qmaps(rng)
        y = agent.td_target(0.7, q, q, full_mask(), None, False, 0.0)
        assert y == pytest.approx(0.7)


class TestReplay:
    def make_tr(self, reward=0.0):
        z32 = np.zeros((4, 4), dtype=np.float32)
        z8 = np.zeros((4, 4), dtype=np.uint8)
        z16 = np.zeros((4, 4), dtype=np.int16)
        return agent.Transition(z32, z8, z16, None, ("grasp", 0, 1, 1),
                                reward, z32, z8, z16, True)

    def test_alpha_zero_is_uniform(self):
        buf = agent.ReplayBuffer(10, alpha=0.0, priority_eps=1e-3)
        for _ in range(3):
            buf.insert(self.make_tr())
        buf.priorities[:3] = [9.0, 1.0, 0.1]
        rng = np.random.default_rng(0)
        counts = np.zeros(3)
        n = 30_000
        for _ in range(n // 100):
            _, _, idx = buf.sample(100, beta=0.4, rng=rng)
            for i in idx:
                counts[i] += 1
        sigma = np.sqrt(n * (1 / 3) * (2 / 3))
        assert (np.abs(counts - n / 3) < 3 * sigma).all()

    def test_proportional_frequencies(self):
        buf = agent.ReplayBuffer(10, alpha=1.0, priority_eps=1e-3)
        for _ in range(2):
            buf.insert(self.make_tr())
        buf.priorities[:2] = [3.0, 1.0]
        rng = np.random.default_rng(1)
        n = 100_000
        hits = 0
        for _ in range(n // 100):
            _, _, idx = buf.sample(100, beta=0.4, rng=rng)
            hits += (idx == 0).sum()
        sigma = np.sqrt(n * 0.75 * 0.25)
        assert abs(hits - 0.75 * n) < 3 * sigma

    def test_uniform_priorities_unit_weights_at_beta_one(self):
        buf = agent.ReplayBuffer(8, alpha=0.6, priority_eps=1e-3)
        for _ in range(5):
            buf.insert(self.make_tr())
        _, weights, _ = buf.sample(16, beta=1.0, rng=np.random.default_rng(0))
        assert np.allclose(weights, 1.0)

    def test_new_transitions_get_max_priority(self):
        buf = agent.ReplayBuffer(8, alpha=0.6, priority_eps=1e-3)
        buf.insert(self.make_tr())
        buf.priorities[0] = 4.2
        buf.insert(self.make_tr())
        assert buf.priorities[1] == 4.2

    def test_fifo_eviction(self):
        buf = agent.ReplayBuffer(2, alpha=0.6, priority_eps=1e-3)
        a, b, c = (self.make_tr(r) for r in (1.0, 2.0, 3.0))
        buf.insert(a)
        buf.insert(b)
        buf.insert(c)          # evicts the oldest (a)
        rewards = {tr.reward for tr in buf.items}
        assert rewards == {2.0, 3.0}

    def test_empty_buffer_raises(self):
        buf = agent.ReplayBuffer(4, alpha=0.6, priority_eps=1e-3)
        with pytest.raises(agent.AgentError):
            buf.sample(2, beta=0.4, rng=np.random.default_rng(0))

    def test_update_sets_abs_error_plus_eps(self):
        buf = agent.ReplayBuffer(4, alpha=0.6, priority_eps=1e-3)
        buf.insert(self.make_tr())
        buf.update(np.array([0]), np.array([-0.5]))
        assert buf.priorities[0] == pytest.approx(0.501)


class TestSchedules:
    def test_epsilon_linear(self):
        cfg = AgentConfig(epsilon_initial=0.5, epsilon_final=0.1,
                          epsilon_decay_steps=100)
        assert agent.epsilon_at(0, cfg) == 0.5
        assert agent.epsilon_at(50, cfg) == pytest.approx(0.3)
        assert agent.epsilon_at(100, cfg) == pytest.approx(0.1)
        assert agent.epsilon_at(1000, cfg) == pytest.approx(0.1)

    def test_beta_linear(self):
        cfg = AgentConfig(replay_beta_initial=0.4, replay_beta_final=1.0,
                          replay_beta_steps=200)
        assert agent.beta_at(0, cfg) == pytest.approx(0.4)
        assert agent.beta_at(200, cfg) == pytest.approx(1.0)


class TestSyncTarget:
    def test_copy_isolated(self):
        p = qfunc.init_params(0, ArchConfig(encoder_channels=(6, 8, 10),
                                            decoder_channels=(4, 4, 4)),
                              dtype=np.float32)
        t = agent.sync_target(p)
        p.flatten()[0][:] += 1.0
        assert not np.array_equal(t.flatten()[0], p.flatten()[0])


class TestRotatedPixel:
    def test_matches_inverse_rotation(self):
        rng = np.random.default_rng(0)
        g = rng.standard_normal((32, 32)).astype(np.float32)
        for k in range(16):
            inv = percept.inverse_rotate_map(g, k)
            for (u, v) in [(5, 7), (16, 16), (20, 3)]:
                ur, vr, ok = agent.rotated_pixel(u, v, k, 32, 32)
                if ok:
                    assert inv[u, v] == g[ur, vr]


class TestLearnStep:
    def build(self, n=1, reward=1.0, terminal=True):
        arch = ArchConfig(encoder_channels=(6, 8, 10), decoder_channels=(4, 4, 4))
        pcfg = PerceptConfig(grid=16, resolution=0.028)
        params = qfunc.init_params(0, arch, dtype=np.float32)
        buf = agent.ReplayBuffer(16, alpha=0.6, priority_eps=1e-3)
        wcfg = WorldConfig()
        scene = world.Scene([world.ObjectSpec(
            1, np.array([[-0.05, -0.05], [0.05, -0.05], [0.05, 0.05], [-0.05, 0.05]]),
            (0.224, 0.224, 0.0), 2, False)], (0.448, 0.448))
        hmap, seg = percept.render(scene, pcfg.resolution)
        for _ in range(n):
            buf.insert(agent.Transition(
                hmap.height, hmap.color, seg.ids, None, ("grasp", 0, 8, 8),
                reward, hmap.height, hmap.color, seg.ids, terminal))
        return params, buf, pcfg

    def test_single_transition_always_sampled(self):
        params, buf, pcfg = self.build()
        _, _, idx = buf.sample(4, 0.4, np.random.default_rng(0))
        assert (idx == 0).all()

    def test_loss_decreases_on_frozen_transition(self):
        params, buf, pcfg = self.build(reward=1.0, terminal=True)
        target = params.copy()
        adam = qfunc.AdamState.zeros(params)
        acfg = AgentConfig(batch_size=2)
        ocfg = OptimConfig(lr=3e-3)
        rng = np.random.default_rng(0)
        losses = []
        for step in range(50):
            params, adam, loss = agent.learn_step(
                params, target, adam, buf, acfg, ocfg, pcfg, rng, step)
            losses.append(loss)
        assert np.mean(losses[-10:]) < 0.25 * max(np.mean(losses[:5]), 1e-9)

    def test_zero_td_error_leaves_params(self):
        params, buf, pcfg = self.build(terminal=True)
        # set the stored reward to the net's own prediction -> zero error
        hmap = percept.Heightmap(buf.items[0].height, buf.items[0].color,
                                 pcfg.resolution)
        x = percept.rotate_map(percept.net_input(hmap), 0)[None]
        gq, _, _ = qfunc.forward(params, x)
        buf.items[0] = agent.Transition(
            buf.items[0].height, buf.items[0].color, buf.items[0].seg, None,
            ("grasp", 0, 8, 8), float(gq[0, 8, 8]),
            buf.items[0].next_height, buf.items[0].next_color,
            buf.items[0].next_seg, True)
        adam = qfunc.AdamState.zeros(params)
        p2, _, loss = agent.learn_step(
            params, params.copy(), adam, buf, AgentConfig(batch_size=2),
            OptimConfig(), pcfg, np.random.default_rng(0), 0)
        assert loss == pytest.approx(0.0, abs=1e-12)
        for a, b in zip(params.flatten(), p2.flatten()):
            assert np.array_equal(a, b)


class TestWorldAgentGeometry:
    def test_rotation_index_matches_world_grasp(self):
        # a rectangle elongated along x is graspable with the gripper at
        # theta = 0 (closing across y) and not at theta = pi/2
        wcfg = WorldConfig()
        shape = np.array([[-0.04, -0.012], [0.04, -0.012],
                          [0.04, 0.012], [-0.04, 0.012]])
        scene = world.Scene([world.ObjectSpec(1, shape, (0.224, 0.224, 0.0), 1)],
                            (0.448, 0.448))
        ok0 = world.apply_grasp(scene, (0.224, 0.224), 0.0, wcfg)
        ok4 = world.apply_grasp(scene, (0.224, 0.224), np.pi / 2, wcfg)
        assert ok0.success and not ok4.success
        act = agent.make_action("grasp", 4, 3, 5,
                                percept.Heightmap(np.zeros((64, 64), np.float32),
                                                  np.zeros((64, 64), np.uint8),
                                                  0.007),
                                wcfg)
        assert act.world[3] == pytest.approx(np.pi / 2)
