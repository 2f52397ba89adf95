# coding=UTF-8

import os
import shutil
import tempfile
import unittest

import numpy as np

from mvlift.base import make_rng, InvalidArgumentError, ParseError, SchemaError, BehindCameraError
from mvlift.geometry import build_circular_rig, homogeneous
from mvlift.motion import (Pose2DSequence, Pose3DSequence, SkeletonDef, SyntheticMotionSpec, ROOT_PATHS,
                           default_skeleton, bone_lengths, estimate_skeleton, generate_synthetic_motion,
                           project_sequence, normalize, denormalize, load_dataset, save_dataset)


class SkeletonTest(unittest.TestCase):

    def test_default_skeleton(self):
        skeleton = default_skeleton()
        self.assertEqual(skeleton.joint_count, 8)
        self.assertEqual(skeleton.root_index, 0)
        order = skeleton.order
        for j in range(8):
            self.assertLessEqual(order.index(skeleton.parents[j]), order.index(j))

    def test_cycle_rejected(self):
        with self.assertRaises(InvalidArgumentError):
            SkeletonDef(parents=(0, 2, 1), bone_lengths=(0.0, 1.0, 1.0))

    def test_zero_bone_rejected(self):
        with self.assertRaises(InvalidArgumentError):
            SkeletonDef(parents=(0, 0), bone_lengths=(0.0, 0.0))

    def test_estimate_skeleton(self):
        spec = SyntheticMotionSpec(duration=10)
        seq = generate_synthetic_motion(spec, make_rng(1))
        estimated = estimate_skeleton(seq, seq.parents)
        np.testing.assert_allclose(estimated.bone_lengths, spec.skeleton.bone_lengths, atol=1e-9)


class SyntheticMotionTest(unittest.TestCase):

    def test_zero_motion(self):
        spec = SyntheticMotionSpec(amplitude=0.0, root_path='static', duration=5)
        seq = generate_synthetic_motion(spec, make_rng(0))
        for t in range(1, 5):
            np.testing.assert_array_equal(seq.frames[t], seq.frames[0])
        np.testing.assert_allclose(bone_lengths(seq.frames, seq.parents)[0], spec.skeleton.bone_lengths, atol=1e-12)

    def test_bone_lengths_conserved(self):
        rng = make_rng(4)
        for path in ROOT_PATHS:
            spec = SyntheticMotionSpec(root_path=path, amplitude=0.8)
            seq = generate_synthetic_motion(spec, rng)
            lengths = bone_lengths(seq.frames, seq.parents)
            self.assertLess(np.max(np.abs(lengths - np.array(spec.skeleton.bone_lengths))), 1e-9)

    def test_deterministic(self):
        spec = SyntheticMotionSpec(root_path='figure8')
        first = generate_synthetic_motion(spec, make_rng(17))
        second = generate_synthetic_motion(spec, make_rng(17))
        self.assertEqual(first.frames.tobytes(), second.frames.tobytes())

    def test_invalid_spec(self):
        with self.assertRaises(InvalidArgumentError):
            SyntheticMotionSpec(duration=1)
        with self.assertRaises(InvalidArgumentError):
            SyntheticMotionSpec(amplitude=-0.1)
        with self.assertRaises(InvalidArgumentError):
            SyntheticMotionSpec(root_path='spiral')

    def test_root_trajectory(self):
        seq = generate_synthetic_motion(SyntheticMotionSpec(root_path='circle'), make_rng(3))
        np.testing.assert_array_equal(seq.root_trajectory, seq.frames[:, 0])
        np.testing.assert_allclose(np.linalg.norm(seq.root_trajectory[:, :2], axis=1), 0.4, atol=1e-12)


class ProjectSequenceTest(unittest.TestCase):

    def setUp(self):
        self.rig = build_circular_rig(6, 60.0)

    def test_static_sequence(self):
        seq = generate_synthetic_motion(SyntheticMotionSpec(amplitude=0.0, root_path='static', duration=4), make_rng(0))
        projected = project_sequence(seq, self.rig, 2)
        for t in range(1, 4):
            np.testing.assert_array_equal(projected.frames[t], projected.frames[0])

    def test_pairwise_epipolar_residual(self):
        rng = make_rng(8)
        for _ in range(5):
            seq = generate_synthetic_motion(SyntheticMotionSpec(root_path='line'), rng)
            views = [project_sequence(seq, self.rig, k).frames for k in range(6)]
            for (v, w), F in self.rig.fundamental.items():
                residual = np.einsum('tji,ik,tjk->tj', homogeneous(views[w]), F, homogeneous(views[v]))
                self.assertLess(np.max(np.abs(residual)), 1e-9)

    def test_single_point_on_axis(self):
        seq = Pose3DSequence(np.zeros((1, 1, 3)))
        np.testing.assert_allclose(project_sequence(seq, self.rig, 0).frames, np.zeros((1, 1, 2)), atol=1e-12)

    def test_behind_camera(self):
        frames = np.zeros((2, 2, 3))
        frames[1, 1] = [5.0, 0.0, 0.0]
        with self.assertRaises(BehindCameraError) as context:
            project_sequence(Pose3DSequence(frames), self.rig, 0)
        self.assertEqual((context.exception.frame, context.exception.joint), (1, 1))


class NormalizeTest(unittest.TestCase):

    def test_corners(self):
        seq = normalize(np.array([[[0.0, 0.0], [50.0, 50.0]]]), 100, 100)
        np.testing.assert_allclose(seq.frames[0], [[-1.0, -1.0], [0.0, 0.0]])

    def test_round_trip(self):
        rng = make_rng(5)
        pixels = rng.uniform(0, 1920, size=(20, 8, 2))
        back = denormalize(normalize(pixels, 1920, 1080), 1920, 1080)
        self.assertLess(np.max(np.abs(back - pixels)), 1e-12 * 1920)

    def test_invalid_size(self):
        with self.assertRaises(InvalidArgumentError):
            normalize(np.zeros((1, 1, 2)), 0, 100)
        with self.assertRaises(InvalidArgumentError):
            denormalize(np.zeros((1, 1, 2)), 100, -1)


class DatasetTest(unittest.TestCase):

    def setUp(self):
        self.test_dir = tempfile.mkdtemp()
        self.path = os.path.join(self.test_dir, 'data.jsonl')

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def test_empty_file(self):
        open(self.path, 'w').close()
        self.assertEqual(load_dataset(self.path), [])

    def test_round_trip_2d(self):
        rng = make_rng(6)
        sequences = [Pose2DSequence(rng.uniform(-1, 1, size=(int(rng.integers(2, 10)), 5, 2)), seq_id='s{}'.format(i))
                     for i in range(100)]
        save_dataset(self.path, sequences)
        loaded = load_dataset(self.path)
        self.assertEqual([s.seq_id for s in loaded], [s.seq_id for s in sequences])
        for original, copy in zip(sequences, loaded):
            self.assertLess(np.max(np.abs(original.frames - copy.frames)), 1e-9)

    def test_round_trip_3d(self):
        seq = generate_synthetic_motion(SyntheticMotionSpec(duration=6), make_rng(2), seq_id='gt0')
        save_dataset(self.path, [seq])
        loaded = load_dataset(self.path)[0]
        self.assertIsInstance(loaded, Pose3DSequence)
        self.assertEqual(loaded.parents, seq.parents)
        np.testing.assert_allclose(loaded.frames, seq.frames, rtol=1e-8, atol=1e-9)

    def test_wrong_joint_count(self):
        with open(self.path, 'w') as handle:
            handle.write('{"id": "a", "joints": 2, "frames": [[[0, 0], [1, 1]]]}\n')
            handle.write('{"id": "b", "joints": 2, "frames": [[[0, 0], [1, 1]], [[0, 0]]]}\n')
        with self.assertRaises(SchemaError) as context:
            load_dataset(self.path)
        self.assertEqual(context.exception.line, 2)
        self.assertIn('line 2', str(context.exception))

    def test_malformed_record(self):
        with open(self.path, 'w') as handle:
            handle.write('{"id": "a", "joints": 1, "frames": [[[0, 0]]]}\n\n{"id": "b", \n')
        with self.assertRaises(ParseError) as context:
            load_dataset(self.path)
        self.assertEqual(context.exception.line, 3)

    def test_invalid_utf8(self):
        with open(self.path, 'wb') as handle:
            handle.write(b'{"id": "a", "joints": 1, "frames": [[[0, 0]]]}\n')
            handle.write(b'{"id": "a\xff", "joints": 1, "frames": [[[0, 0]]]}\n')
        with self.assertRaises(ParseError) as context:
            load_dataset(self.path)
        self.assertEqual(context.exception.line, 2)

    def test_non_numeric_fields(self):
        for extra in ('"fps": "fast"', '"fps": null', '"width": "wide", "height": 2'):
            with open(self.path, 'w') as handle:
                handle.write('{"id": "a", "joints": 1, "frames": [[[0, 0]]], ' + extra + '}\n')
            with self.assertRaises(SchemaError) as context:
                load_dataset(self.path)
            self.assertEqual(context.exception.line, 1, extra)
        with open(self.path, 'w') as handle:
            handle.write('{"id": "a", "joints": 1, "frames": [[[0, 0, 0]]], "root_index": "hips"}\n')
        with self.assertRaises(SchemaError):
            load_dataset(self.path)


if __name__ == '__main__':
    unittest.main()
