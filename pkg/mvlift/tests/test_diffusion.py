# coding=UTF-8

import math
import os
import shutil
import tempfile
import unittest

import numpy as np
import torch
from torch import nn

from mvlift.base import DTYPE, make_rng, make_generator, InvalidArgumentError, CheckpointError
from mvlift.denoiser import DenoiserConfig, LineConditionedDenoiser, init_params
from mvlift.diffusion import (make_schedule, q_sample, x0_to_eps, line_matching_loss, training_loss, sample,
                              TrainingConfig, save_checkpoint, load_checkpoint, DESK_PROFILE)
from mvlift.geometry import point_line_distance, normalize_lines


class ScheduleTest(unittest.TestCase):

    def test_default_schedule_reaches_noise(self):
        sched = make_schedule(1000, 1e-4, 0.02)
        self.assertLess(float(sched.alpha_bar[-1]), 0.01)
        self.assertEqual(float(sched.alpha_bar[0]), 1.0)

    def test_desk_profile(self):
        sched = make_schedule(**DESK_PROFILE)
        self.assertLess(float(sched.alpha_bar[-1]), 1e-4)

    def test_single_step(self):
        sched = make_schedule(1, 0.3, 0.3)
        self.assertAlmostEqual(float(sched.alpha_bar[1]), 0.7, places=15)

    def test_monotone_and_unit_variance(self):
        sched = make_schedule(200, 1e-3, 0.05)
        self.assertTrue(bool(torch.all(sched.alpha_bar[1:] < sched.alpha_bar[:-1])))
        total = torch.sqrt(sched.alpha_bar) ** 2 + torch.sqrt(1.0 - sched.alpha_bar) ** 2
        self.assertLess(float(torch.max(torch.abs(total - 1.0))), 1e-12)
        np.testing.assert_allclose(sched.sigma[1:].numpy(), np.sqrt(sched.beta[1:].numpy()))

    def test_invalid(self):
        with self.assertRaises(InvalidArgumentError):
            make_schedule(0)
        with self.assertRaises(InvalidArgumentError):
            make_schedule(10, 0.02, 0.01)
        with self.assertRaises(InvalidArgumentError):
            make_schedule(10, 0.0, 0.01)


class ForwardProcessTest(unittest.TestCase):

    def setUp(self):
        self.sched = make_schedule(100, 1e-3, 0.2)
        self.rng = make_rng(1)
        self.x0 = torch.tensor(self.rng.uniform(-1, 1, size=(4, 3, 2)), dtype=DTYPE)

    def test_step_zero(self):
        eps = torch.randn(4, 3, 2, dtype=DTYPE)
        self.assertTrue(torch.equal(q_sample(self.x0, 0, eps, self.sched), self.x0))

    def test_zero_noise(self):
        x_n = q_sample(self.x0, 30, torch.zeros_like(self.x0), self.sched)
        torch.testing.assert_close(x_n, torch.sqrt(self.sched.alpha_bar[30]) * self.x0, rtol=0, atol=1e-15)

    def test_out_of_range(self):
        with self.assertRaises(InvalidArgumentError):
            q_sample(self.x0, 101, torch.zeros_like(self.x0), self.sched)

    def test_moments(self):
        n = 40
        generator = make_generator(5)
        eps = torch.randn((10000,) + tuple(self.x0.shape), generator=generator, dtype=DTYPE)
        draws = q_sample(self.x0.expand_as(eps), n, eps, self.sched)
        alpha_bar = float(self.sched.alpha_bar[n])
        mean = draws.mean(dim=0)
        variance = draws.var(dim=0)
        standard_error = math.sqrt((1.0 - alpha_bar) / 10000)
        self.assertLess(float(torch.max(torch.abs(mean - math.sqrt(alpha_bar) * self.x0))), 4.5 * standard_error)
        variance_error = (1.0 - alpha_bar) * math.sqrt(2.0 / 9999)
        self.assertLess(float(torch.max(torch.abs(variance - (1.0 - alpha_bar)))), 4.5 * variance_error)

    def test_batched_steps(self):
        x0 = self.x0.expand(3, 4, 3, 2)
        eps = torch.randn(3, 4, 3, 2, dtype=DTYPE)
        steps = torch.tensor([0, 10, 99])
        batched = q_sample(x0, steps, eps, self.sched)
        for b, n in enumerate([0, 10, 99]):
            torch.testing.assert_close(batched[b], q_sample(x0[b], n, eps[b], self.sched), rtol=0, atol=1e-15)

    def test_x0_to_eps_inverse(self):
        eps = torch.randn(4, 3, 2, dtype=DTYPE)
        for n in (1, 17, 100):
            x_n = q_sample(self.x0, n, eps, self.sched)
            self.assertLess(float(torch.max(torch.abs(x0_to_eps(self.x0, x_n, n, self.sched) - eps))), 1e-12)

    def test_x0_to_eps_zero(self):
        x_n = torch.randn(4, 3, 2, dtype=DTYPE)
        eps = x0_to_eps(x_n / torch.sqrt(self.sched.alpha_bar[12]), x_n, 12, self.sched)
        self.assertLess(float(torch.max(torch.abs(eps))), 1e-12)

    def test_x0_to_eps_step_zero(self):
        with self.assertRaises(InvalidArgumentError):
            x0_to_eps(self.x0, self.x0, 0, self.sched)


class LineLossTest(unittest.TestCase):

    def test_on_line(self):
        pred = torch.tensor([[[0.3, 0.0], [0.7, 0.0]]], dtype=DTYPE)
        lines = torch.tensor([[[0.0, 1.0, 0.0], [0.0, 1.0, 0.0]]], dtype=DTYPE)
        self.assertEqual(float(line_matching_loss(pred, lines)), 0.0)

    def test_single_joint(self):
        pred = torch.tensor([[[0.3, 0.5]]], dtype=DTYPE)
        lines = torch.tensor([[[0.0, 1.0, 0.0]]], dtype=DTYPE)
        self.assertAlmostEqual(float(line_matching_loss(pred, lines)), 0.5, places=15)

    def test_matches_geometric_distance(self):
        rng = make_rng(3)
        for _ in range(1000):
            pred = rng.uniform(-1, 1, size=(3, 2, 2))
            lines = normalize_lines(rng.normal(size=(3, 2, 3)))
            oracle = 0.0
            for point, line in zip(pred.reshape(-1, 2), lines.reshape(-1, 3)):
                # foot of the perpendicular
                normal = line[:2]
                foot = point - (normal @ point + line[2]) * normal
                oracle += np.linalg.norm(point - foot)
            self.assertAlmostEqual(float(line_matching_loss(pred, lines)), oracle, delta=1e-12)
            self.assertAlmostEqual(float(np.sum(point_line_distance(pred, lines))), oracle, delta=1e-12)

    def test_rotation_invariance(self):
        rng = make_rng(4)
        pred = rng.uniform(-1, 1, size=(5, 4, 2))
        lines = normalize_lines(rng.normal(size=(5, 4, 3)))
        angle = 0.7
        rotation = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
        rotated_lines = np.concatenate([lines[..., :2] @ rotation.T, lines[..., 2:]], axis=-1)
        self.assertAlmostEqual(float(line_matching_loss(pred @ rotation.T, rotated_lines)),
                               float(line_matching_loss(pred, lines)), delta=1e-9)

    def test_shape_mismatch(self):
        with self.assertRaises(InvalidArgumentError):
            line_matching_loss(np.zeros((2, 3, 2)), np.zeros((2, 4, 3)))


class TrainingLossTest(unittest.TestCase):

    def setUp(self):
        self.sched = make_schedule(10, 1e-3, 0.2)

    def test_oracle_on_lines(self):
        x0 = torch.tensor([[[0.2, 0.0], [0.5, 0.0]]], dtype=DTYPE)
        lines = torch.tensor([[[0.0, 1.0, 0.0], [0.0, 1.0, 0.0]]], dtype=DTYPE)
        terms = training_loss(x0, 5, lines, lambda x_n, n, L: x0, torch.randn(1, 2, 2, dtype=DTYPE), self.sched, TrainingConfig())
        self.assertEqual(float(terms.total), 0.0)

    def test_no_line_weight(self):
        x0 = torch.zeros(2, 2, 2, dtype=DTYPE)
        lines = torch.tensor([[[0.0, 1.0, -0.5]] * 2] * 2, dtype=DTYPE)
        denoiser = lambda x_n, n, L: x0 + 0.25
        terms = training_loss(x0, 3, lines, denoiser, torch.zeros_like(x0), self.sched, TrainingConfig(lambda_line=0.0))
        self.assertEqual(float(terms.total), float(terms.recon))
        self.assertGreater(float(terms.line), 0.0)

    def test_hand_case(self):
        x0 = torch.tensor([[[0.2, 0.2]]], dtype=DTYPE)
        lines = torch.tensor([[[0.0, 1.0, 0.0]]], dtype=DTYPE)
        denoiser = lambda x_n, n, L: torch.tensor([[[0.5, 0.6]]], dtype=DTYPE)
        terms = training_loss(x0, 1, lines, denoiser, torch.zeros_like(x0), self.sched, TrainingConfig(lambda_line=1.0))
        self.assertAlmostEqual(float(terms.recon), 0.35, places=12)
        self.assertAlmostEqual(float(terms.line), 0.6, places=12)
        self.assertAlmostEqual(float(terms.total), 0.95, places=12)

    def test_negative_weight(self):
        with self.assertRaises(InvalidArgumentError):
            TrainingConfig(lambda_line=-1.0)


class SamplerTest(unittest.TestCase):

    def test_constant_denoiser_fixed_point(self):
        sched = make_schedule(50, 1e-3, 0.2)
        target = torch.tensor(make_rng(0).uniform(-1, 1, size=(6, 3, 2)), dtype=DTYPE)
        lines = torch.zeros(6, 3, 3, dtype=DTYPE)
        out = sample(lambda x_n, n, L: target, lines, sched, make_generator(1), noise_scale=0.0)
        self.assertLess(float(torch.max(torch.abs(out - target))), 1e-9)

    def test_shape_contract(self):
        sched = make_schedule(5, 1e-3, 0.2)
        lines = torch.zeros(7, 4, 3, dtype=DTYPE)
        out = sample(lambda x_n, n, L: torch.zeros_like(x_n), lines, sched, make_generator(2))
        self.assertEqual(tuple(out.shape), (7, 4, 2))

    def test_deterministic(self):
        config = DenoiserConfig(d_model=16, n_layers=1, n_heads=2, max_T=8, joint_count=3, n_steps=20)
        model = init_params(LineConditionedDenoiser(config), 0)
        sched = make_schedule(20, 1e-3, 0.3)
        lines = torch.tensor(normalize_lines(make_rng(1).normal(size=(8, 3, 3))), dtype=DTYPE)
        first = sample(model, lines, sched, make_generator(9))
        second = sample(model, lines, sched, make_generator(9))
        self.assertTrue(torch.equal(first, second))

    def test_two_cluster_toy(self):
        # exact posterior-mean denoiser of a two-point mixture at +-0.8
        sched = make_schedule(100, 1e-3, 0.2)
        centers = torch.tensor([-0.8, 0.8], dtype=DTYPE)

        def denoiser(x_n, n, L):
            alpha_bar = sched.alpha_bar[n]
            logits = -(x_n[..., None] - torch.sqrt(alpha_bar) * centers) ** 2 / (2.0 * (1.0 - alpha_bar))
            weights = torch.softmax(logits, dim=-1)
            return (weights * centers).sum(dim=-1)

        out = sample(denoiser, torch.zeros(2000, 1, 1, 3, dtype=DTYPE), sched, make_generator(3))
        values = out.reshape(-1)
        near = torch.min(torch.abs(values[:, None] - centers[None, :]), dim=1).values < 0.15
        self.assertGreaterEqual(float(near.double().mean()), 0.95)
        self.assertGreater(float((values > 0).double().mean()), 0.4)
        self.assertLess(float((values > 0).double().mean()), 0.6)

    def test_two_cluster_toy_trained(self):
        sched = make_schedule(50, 1e-3, 0.2)
        centers, spread = np.array([-0.8, 0.8]), 0.05
        torch.manual_seed(0)
        net = nn.Sequential(nn.Linear(3, 64), nn.SiLU(), nn.Linear(64, 64), nn.SiLU(), nn.Linear(64, 2)).to(DTYPE)

        def denoiser(x_n, n, L):
            steps = torch.as_tensor(n, dtype=DTYPE) / sched.N
            steps = steps.reshape(steps.shape + (1,) * (x_n.dim() - steps.dim())).expand(x_n.shape[:-1] + (1,))
            return net(torch.cat([x_n, steps], dim=-1))

        optimizer = torch.optim.Adam(net.parameters(), lr=3e-3)
        cfg = TrainingConfig(lambda_line=0.0)
        lines = torch.zeros(256, 1, 1, 3, dtype=DTYPE)
        for step in range(1500):
            rng = make_rng((11, step))
            generator = make_generator((11, step))
            x0 = np.zeros((256, 1, 1, 2))
            x0[..., 0] = centers[rng.integers(2, size=(256, 1, 1))] + spread * rng.normal(size=(256, 1, 1))
            n = torch.randint(1, sched.N + 1, (256,), generator=generator)
            eps = torch.randn(x0.shape, generator=generator, dtype=DTYPE)
            optimizer.zero_grad()
            training_loss(torch.as_tensor(x0), n, lines, denoiser, eps, sched, cfg).total.backward()
            optimizer.step()

        out = sample(denoiser, torch.zeros(1000, 1, 1, 3, dtype=DTYPE), sched, make_generator(4))
        values = out[..., 0].reshape(-1).numpy()
        near = np.min(np.abs(values[:, None] - centers[None, :]), axis=1) < 3 * spread
        self.assertGreaterEqual(near.mean(), 0.95)
        self.assertGreater((values > 0).mean(), 0.3)
        self.assertLess((values > 0).mean(), 0.7)


class CheckpointTest(unittest.TestCase):

    def setUp(self):
        self.test_dir = tempfile.mkdtemp()
        self.path = os.path.join(self.test_dir, 'model.pt')
        self.config = DenoiserConfig(d_model=16, n_layers=1, n_heads=2, max_T=8, joint_count=3, n_steps=10)
        self.sched = make_schedule(10, 1e-3, 0.2)

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def test_round_trip(self):
        model = init_params(LineConditionedDenoiser(self.config), 4)
        save_checkpoint(self.path, model, self.sched, step=7)
        loaded = load_checkpoint(self.path)
        self.assertEqual(loaded.step, 7)
        self.assertEqual(loaded.schedule.N, 10)
        for (name, value), (_, other) in zip(model.state_dict().items(), loaded.model.state_dict().items()):
            self.assertTrue(torch.equal(value, other), name)

    def test_shape_mismatch_names_parameter(self):
        model = init_params(LineConditionedDenoiser(self.config), 4)
        save_checkpoint(self.path, model, self.sched)
        other = DenoiserConfig(d_model=16, n_layers=1, n_heads=2, max_T=8, joint_count=4, n_steps=10)
        with self.assertRaises(CheckpointError) as context:
            load_checkpoint(self.path, expected_config=other)
        self.assertIn('input_proj.weight', str(context.exception))

    def test_foreign_file(self):
        torch.save({'weights': torch.zeros(3)}, self.path)
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path)


if __name__ == '__main__':
    unittest.main()
