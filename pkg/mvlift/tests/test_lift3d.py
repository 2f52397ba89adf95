# coding=UTF-8

import os
import shutil
import tempfile
import unittest

import numpy as np

from mvlift.base import (make_rng, InsufficientViewsError, InvalidArgumentError, DegenerateGeometryError,
                         EmptyDatasetError)
from mvlift.geometry import build_circular_rig
from mvlift.lift3d import (LiftOptions, recover_3d, enforce_bone_lengths, build_mv_dataset, save_mv_dataset,
                           load_mv_dataset, epipolar_residual, constant_depth_lift)
from mvlift.motion import (Pose2DSequence, Pose3DSequence, SyntheticMotionSpec, default_skeleton, bone_lengths,
                           generate_synthetic_motion, project_sequence)


def mean_joint_error(a, b):
    return float(np.mean(np.linalg.norm(np.asarray(a) - np.asarray(b), axis=-1)))


def synthetic(seed, duration=12, **overrides):
    spec = SyntheticMotionSpec(duration=duration, **overrides)
    return generate_synthetic_motion(spec, make_rng(seed), seq_id='seq{}'.format(seed))


class RecoverTest(unittest.TestCase):

    def setUp(self):
        self.rig = build_circular_rig(6, 60.0)

    def views_of(self, seq):
        return [project_sequence(seq, self.rig, k) for k in range(self.rig.n_views)]

    def test_exact_inverse(self):
        seq = synthetic(0)
        result = recover_3d(self.views_of(seq), self.rig, LiftOptions(smoothness=0.0, bone=0.0))
        np.testing.assert_allclose(result.sequence.frames, seq.frames, atol=1e-6)
        self.assertTrue(result.converged)
        self.assertLess(float(np.max(result.joint_residuals)), 1e-8)
        self.assertEqual(result.joint_residuals.shape, (8,))

    def test_exact_inverse_with_regularizers(self):
        seq = synthetic(1, duration=4, frequency_range=(0.1, 0.2), amplitude=0.1)
        result = recover_3d(self.views_of(seq), self.rig, LiftOptions(smoothness=0.0, bone=1.0), parents=seq.parents)
        np.testing.assert_allclose(result.sequence.frames, seq.frames, atol=1e-6)
        self.assertEqual(result.sequence.parents, seq.parents)

    def test_smoothness_reduces_noise(self):
        seq = synthetic(2, duration=24, amplitude=0.2, frequency_range=(0.2, 0.4))
        rng = make_rng(2)
        noisy = [np.asarray(v) + rng.normal(scale=1e-3, size=(24, 8, 2)) for v in self.views_of(seq)]
        plain = recover_3d(noisy, self.rig, LiftOptions(smoothness=0.0, bone=0.0))
        smooth = recover_3d(noisy, self.rig, LiftOptions(smoothness=1.0, bone=0.0))
        self.assertLess(mean_joint_error(smooth.sequence, seq), mean_joint_error(plain.sequence, seq))

    def test_cost_history_non_increasing(self):
        seq = synthetic(3, duration=8)
        rng = make_rng(3)
        noisy = [np.asarray(v) + rng.normal(scale=5e-3, size=(8, 8, 2)) for v in self.views_of(seq)]
        result = recover_3d(noisy, self.rig, LiftOptions(), parents=seq.parents)
        history = np.array(result.cost_history)
        self.assertTrue(np.all(np.diff(history) <= 0))

    def test_single_frame_single_joint(self):
        point = Pose3DSequence(np.array([[[0.1, -0.2, 0.3]]]))
        views = [project_sequence(point, self.rig, k) for k in range(6)]
        result = recover_3d(views, self.rig)
        np.testing.assert_allclose(result.sequence.frames, point.frames, atol=1e-6)

    def test_two_views(self):
        rig = build_circular_rig(2, 90.0)
        seq = synthetic(4, duration=3)
        views = [project_sequence(seq, rig, k) for k in range(2)]
        result = recover_3d(views, rig, LiftOptions(smoothness=0.0, bone=0.0))
        np.testing.assert_allclose(result.sequence.frames, seq.frames, atol=1e-6)

    def test_insufficient_views(self):
        seq = synthetic(5, duration=3)
        with self.assertRaises(InsufficientViewsError):
            recover_3d([project_sequence(seq, self.rig, 0)], self.rig.subset([0]))

    def test_view_count_must_match_rig(self):
        seq = synthetic(6, duration=3)
        with self.assertRaises(InvalidArgumentError):
            recover_3d(self.views_of(seq)[:4], self.rig)

    def test_negative_weight_rejected(self):
        with self.assertRaises(InvalidArgumentError):
            LiftOptions(smoothness=-1.0)

    def test_zero_iterations_returns_triangulation(self):
        seq = synthetic(7, duration=3)
        result = recover_3d(self.views_of(seq), self.rig, LiftOptions(max_iterations=0))
        self.assertEqual(result.iterations, 0)
        self.assertEqual(len(result.cost_history), 1)
        np.testing.assert_allclose(result.sequence.frames, seq.frames, atol=1e-6)


class BoneLengthTest(unittest.TestCase):

    def setUp(self):
        self.skeleton = default_skeleton()
        self.seq = synthetic(10, duration=6)

    def test_identity_on_exact_skeleton(self):
        np.testing.assert_allclose(enforce_bone_lengths(self.seq, self.skeleton).frames, self.seq.frames, atol=1e-12)

    def test_projects_noisy_bones(self):
        noisy = self.seq.replace(frames=self.seq.frames + make_rng(10).normal(scale=0.02, size=(6, 8, 3)))
        fixed = enforce_bone_lengths(noisy, self.skeleton)
        lengths = bone_lengths(fixed.frames, self.skeleton.parents)
        np.testing.assert_allclose(lengths, np.tile(self.skeleton.bone_length_array(), (6, 1)), atol=1e-12)
        np.testing.assert_array_equal(fixed.root_trajectory, noisy.root_trajectory)
        again = enforce_bone_lengths(fixed, self.skeleton)
        np.testing.assert_allclose(again.frames, fixed.frames, atol=1e-12)

    def test_coincident_joint(self):
        frames = np.array(self.seq.frames)
        frames[2, 3] = frames[2, 2]
        with self.assertRaises(DegenerateGeometryError):
            enforce_bone_lengths(Pose3DSequence(frames), self.skeleton)


class MVDatasetTest(unittest.TestCase):

    def setUp(self):
        self.rig4 = build_circular_rig(4, 90.0)
        self.seqs = [synthetic(seed, duration=5) for seed in range(3)]
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_consistent_views(self):
        dataset = build_mv_dataset(self.seqs, self.rig4)
        self.assertEqual(len(dataset), 3)
        self.assertEqual(dataset.as_array().shape, (3, 4, 5, 8, 2))
        for entry in dataset.entries:
            self.assertLess(epipolar_residual(entry.views, self.rig4), 1e-9)
        self.assertEqual(dataset.entries[1].views[2].seq_id, 'seq1/view2')

    def test_skips_sequence_behind_camera(self):
        behind = self.seqs[0].replace(frames=self.seqs[0].frames + np.array([4.0, 0.0, 0.0]), seq_id='behind')
        with self.assertLogs('mvlift.lift3d', level='WARNING'):
            dataset = build_mv_dataset([behind] + self.seqs[1:], self.rig4)
        self.assertEqual([entry.seq_id for entry in dataset.entries], ['seq1', 'seq2'])

    def test_empty(self):
        behind = self.seqs[0].replace(frames=self.seqs[0].frames + np.array([4.0, 0.0, 0.0]))
        with self.assertRaises(EmptyDatasetError):
            build_mv_dataset([behind], self.rig4)

    def test_save_and_load(self):
        dataset = build_mv_dataset(self.seqs, self.rig4)
        path = os.path.join(self.tmp, 'mv.jsonl')
        save_mv_dataset(path, dataset)
        self.assertTrue(os.path.exists(os.path.join(self.tmp, 'rig4.txt')))
        loaded = load_mv_dataset(path)
        self.assertEqual([entry.seq_id for entry in loaded.entries], ['seq0', 'seq1', 'seq2'])
        np.testing.assert_allclose(loaded.as_array(), dataset.as_array(), rtol=1e-8, atol=1e-12)
        for pair, F in dataset.rig.fundamental.items():
            np.testing.assert_allclose(loaded.rig.fundamental[pair], F, atol=1e-9)


class ConstantDepthTest(unittest.TestCase):

    def test_reprojects_onto_input(self):
        rig = build_circular_rig(6, 60.0)
        seq = synthetic(20, duration=4)
        view = project_sequence(seq, rig, 0)
        lifted = constant_depth_lift(view, rig)
        np.testing.assert_allclose(project_sequence(lifted, rig, 0).frames, view.frames, atol=1e-12)
        depth = np.asarray(lifted) @ rig.views[0].rotation.T + rig.views[0].translation
        np.testing.assert_allclose(depth[..., 2], 3.0, atol=1e-12)

    def test_rejects_bad_depth(self):
        rig = build_circular_rig(2, 90.0)
        with self.assertRaises(InvalidArgumentError):
            constant_depth_lift(Pose2DSequence(np.zeros((1, 1, 2))), rig, depth=0.0)


if __name__ == '__main__':
    unittest.main()
