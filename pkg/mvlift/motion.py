# -*- coding: utf-8 -*-
"""Pose sequences, skeletons, the synthetic motion oracle and dataset files.

A dataset file is UTF-8 text with one JSON record per line::

    {"id": "seq0003", "fps": 30.0, "joints": 8, "frames": [[[x, y], ...], ...]}

2D records may carry ``width`` and ``height`` when they were normalized from
pixels. 3D records hold T x J x 3 frames plus ``root_index`` and ``parents``.
Floats are written with `mvlift.base.SERIAL_DIGITS` significant digits.
"""
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from mvlift.base import ROOT_INDEX, SERIAL_DIGITS, InvalidArgumentError, ParseError, SchemaError
from mvlift.geometry import project_points

logger = logging.getLogger(__name__)

ROOT_PATHS = ('static', 'line', 'circle', 'figure8')
"""tuple: Parametric root curves understood by `generate_synthetic_motion`"""

DEFAULT_FPS = 30.0


def _frozen_array(values, dims, what):
    array = np.array(values, dtype=float)
    if array.ndim != 3 or array.shape[-1] != dims:
        raise InvalidArgumentError("{} frames must have shape (T, J, {}), got {}".format(what, dims, array.shape))
    if not np.all(np.isfinite(array)):
        raise InvalidArgumentError("{} frames contain non-finite values".format(what))
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Pose2DSequence(object):
    """T x J grid of 2D joints in normalized image coordinates."""
    frames: np.ndarray
    seq_id: str = ''
    fps: float = DEFAULT_FPS
    width: float = None
    height: float = None

    def __post_init__(self):
        object.__setattr__(self, 'frames', _frozen_array(self.frames, 2, 'Pose2DSequence'))

    @property
    def frame_count(self):
        return self.frames.shape[0]

    @property
    def joint_count(self):
        return self.frames.shape[1]

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.frames, dtype=dtype)

    def __len__(self):
        return self.frame_count

    def replace(self, frames=None, seq_id=None):
        """Copy with new frames and/or id, keeping the other fields."""
        return Pose2DSequence(self.frames if frames is None else frames,
                              self.seq_id if seq_id is None else seq_id,
                              self.fps, self.width, self.height)


@dataclass(frozen=True, eq=False)
class Pose3DSequence(object):
    """T x J world-space joint positions; the root joint carries the global trajectory."""
    frames: np.ndarray
    seq_id: str = ''
    fps: float = DEFAULT_FPS
    root_index: int = ROOT_INDEX
    parents: tuple = None

    def __post_init__(self):
        object.__setattr__(self, 'frames', _frozen_array(self.frames, 3, 'Pose3DSequence'))
        if not 0 <= self.root_index < self.frames.shape[1]:
            raise InvalidArgumentError("root_index {} outside 0..{}".format(self.root_index, self.frames.shape[1] - 1))
        if self.parents is not None:
            object.__setattr__(self, 'parents', tuple(int(p) for p in self.parents))
            if len(self.parents) != self.frames.shape[1]:
                raise InvalidArgumentError("parents lists {} joints, frames have {}".format(len(self.parents), self.frames.shape[1]))

    @property
    def frame_count(self):
        return self.frames.shape[0]

    @property
    def joint_count(self):
        return self.frames.shape[1]

    @property
    def root_trajectory(self):
        """World positions of the root joint, shape (T, 3)."""
        return self.frames[:, self.root_index]

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.frames, dtype=dtype)

    def __len__(self):
        return self.frame_count

    def replace(self, frames=None, seq_id=None):
        return Pose3DSequence(self.frames if frames is None else frames,
                              self.seq_id if seq_id is None else seq_id,
                              self.fps, self.root_index, self.parents)


@dataclass(frozen=True)
class SkeletonDef(object):
    """Kinematic tree.

    Attributes
    ----------
    parents : tuple of int
        Parent index per joint; the root is its own parent.
    bone_lengths : tuple of float
        Length of the edge from each joint to its parent (0 for the root).
    names : tuple of str
    rest_directions : tuple, optional
        Unit bone direction per joint in the rest pose, needed for forward kinematics.
    """
    parents: tuple
    bone_lengths: tuple
    names: tuple = None
    rest_directions: tuple = None

    def __post_init__(self):
        parents = tuple(int(p) for p in self.parents)
        lengths = tuple(float(l) for l in self.bone_lengths)
        object.__setattr__(self, 'parents', parents)
        object.__setattr__(self, 'bone_lengths', lengths)
        if len(lengths) != len(parents):
            raise InvalidArgumentError("bone_lengths must list one value per joint")
        roots = [j for j, p in enumerate(parents) if p == j]
        if len(roots) != 1:
            raise InvalidArgumentError("a skeleton needs exactly one root, found {}".format(roots))
        for j, p in enumerate(parents):
            if not 0 <= p < len(parents):
                raise InvalidArgumentError("joint {} has invalid parent {}".format(j, p))
            if p != j and not lengths[j] > 0:
                raise InvalidArgumentError("bone {}->{} must have positive length".format(p, j))
        # raises on cycles
        self.order
        if self.names is None:
            object.__setattr__(self, 'names', tuple('joint{}'.format(j) for j in range(len(parents))))
        if self.rest_directions is not None:
            directions = np.asarray(self.rest_directions, dtype=float).reshape(len(parents), 3)
            norms = np.linalg.norm(directions, axis=1, keepdims=True)
            norms[norms == 0] = 1.0
            object.__setattr__(self, 'rest_directions', tuple(map(tuple, directions / norms)))

    @property
    def joint_count(self):
        return len(self.parents)

    @property
    def root_index(self):
        return next(j for j, p in enumerate(self.parents) if p == j)

    @property
    def order(self):
        """Joint indices with every parent listed before its children."""
        order = [self.root_index]
        placed = set(order)
        while len(order) < len(self.parents):
            added = [j for j, p in enumerate(self.parents) if j not in placed and p in placed]
            if not added:
                raise InvalidArgumentError("skeleton parents do not form a tree")
            order.extend(added)
            placed.update(added)
        return tuple(order)

    def bone_length_array(self):
        return np.array(self.bone_lengths)


def default_skeleton():
    """Desk-scale 8-joint skeleton: root, spine, neck, head and two 2-joint arms."""
    arm_left = (0.0, 1.0, -0.3)
    arm_right = (0.0, -1.0, -0.3)
    return SkeletonDef(parents=(0, 0, 1, 2, 2, 4, 2, 6),
                       bone_lengths=(0.0, 0.25, 0.2, 0.12, 0.25, 0.22, 0.25, 0.22),
                       names=('root', 'spine', 'neck', 'head', 'l_elbow', 'l_hand', 'r_elbow', 'r_hand'),
                       rest_directions=((0.0, 0.0, 1.0), (0.0, 0.0, 1.0), (0.0, 0.0, 1.0), (0.0, 0.0, 1.0),
                                        arm_left, arm_left, arm_right, arm_right))


def bone_lengths(frames, parents):
    """Per-frame edge lengths |X_j - X_parent(j)|, shape (T, J); zero at the root."""
    frames = np.asarray(frames, dtype=float)
    return np.linalg.norm(frames - frames[:, list(parents)], axis=-1)


def estimate_skeleton(seq, parents, names=None):
    """Skeleton whose bone lengths are the per-edge medians over the frames of `seq`."""
    lengths = np.median(bone_lengths(np.asarray(seq), parents), axis=0)
    return SkeletonDef(parents=tuple(parents), bone_lengths=tuple(lengths), names=names)


@dataclass(frozen=True)
class SyntheticMotionSpec(object):
    """Parameters of one synthetic motion draw."""
    skeleton: SkeletonDef = field(default_factory=default_skeleton)
    duration: int = 64
    fps: float = DEFAULT_FPS
    amplitude: float = 0.4
    frequency_range: tuple = (0.3, 1.5)
    root_path: str = 'circle'
    speed: float = 0.3
    path_scale: float = 0.4
    root_height: float = 0.4

    def __post_init__(self):
        if self.duration < 2:
            raise InvalidArgumentError("duration must be at least 2 frames, got {}".format(self.duration))
        if self.amplitude < 0:
            raise InvalidArgumentError("amplitude must be non-negative")
        if self.root_path not in ROOT_PATHS:
            raise InvalidArgumentError("unknown root path {!r}, expected one of {}".format(self.root_path, ROOT_PATHS))
        low, high = self.frequency_range
        if not 0 <= low <= high:
            raise InvalidArgumentError("invalid frequency range {}".format(self.frequency_range))
        if self.skeleton.rest_directions is None:
            raise InvalidArgumentError("synthetic motion needs a skeleton with rest directions")


def _root_path(spec, rng, seconds):
    kind = spec.root_path
    heading = rng.uniform(0.0, 2.0 * np.pi)
    zero = np.zeros_like(seconds)
    if kind == 'static':
        x, y = zero, zero
    elif kind == 'line':
        s = spec.speed * (seconds - seconds[-1] / 2.0)
        x, y = s * np.cos(heading), s * np.sin(heading)
    elif kind == 'circle':
        omega = spec.speed / spec.path_scale
        x = spec.path_scale * np.cos(omega * seconds + heading)
        y = spec.path_scale * np.sin(omega * seconds + heading)
    else:
        omega = spec.speed / spec.path_scale
        x = spec.path_scale * np.sin(omega * seconds + heading)
        y = 0.5 * spec.path_scale * np.sin(2.0 * (omega * seconds + heading))
    return np.stack([x, y, np.full_like(seconds, spec.root_height)], axis=-1)


def generate_synthetic_motion(spec, rng, seq_id=''):
    """Forward-kinematics motion with sinusoidal joint angles along a parametric root path.

    Every joint (root included) rotates about its own random axis by
    ``amplitude * sin(2 pi f t + phase)``; bone lengths are therefore exactly
    those of `spec.skeleton` in every frame.

    Parameters
    ----------
    spec : SyntheticMotionSpec
    rng : numpy.random.Generator
    seq_id : str

    Returns
    -------
    Pose3DSequence
    """
    skeleton = spec.skeleton
    J = skeleton.joint_count
    T = spec.duration
    seconds = np.arange(T) / spec.fps
    axes = rng.normal(size=(J, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    frequencies = rng.uniform(spec.frequency_range[0], spec.frequency_range[1], size=J)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=J)
    root = _root_path(spec, rng, seconds)

    angles = spec.amplitude * np.sin(2.0 * np.pi * frequencies[None, :] * seconds[:, None] + phases[None, :])
    offsets = np.asarray(skeleton.rest_directions) * skeleton.bone_length_array()[:, None]
    frames = np.zeros((T, J, 3))
    rotations = [None] * J
    for j in skeleton.order:
        local = Rotation.from_rotvec(angles[:, j, None] * axes[j])
        parent = skeleton.parents[j]
        if parent == j:
            rotations[j] = local
            frames[:, j] = root
        else:
            rotations[j] = rotations[parent] * local
            frames[:, j] = frames[:, parent] + rotations[j].apply(offsets[j])
    return Pose3DSequence(frames, seq_id=seq_id, fps=spec.fps, root_index=skeleton.root_index,
                          parents=skeleton.parents)


def project_sequence(seq, rig, view):
    """Project every joint of a `Pose3DSequence` into `view` of `rig`.

    Raises
    ------
    BehindCameraError
        With the offending frame and joint.
    """
    return Pose2DSequence(project_points(seq.frames, rig, view), seq_id=seq.seq_id, fps=seq.fps)


def normalize(seq, width, height):
    """Map pixel coordinates (T, J, 2) to [-1, 1] per axis."""
    if not (width > 0 and height > 0):
        raise InvalidArgumentError("image size must be positive, got {}x{}".format(width, height))
    pixels = np.asarray(seq, dtype=float)
    scale = np.array([2.0 / width, 2.0 / height])
    seq_id = getattr(seq, 'seq_id', '')
    fps = getattr(seq, 'fps', DEFAULT_FPS)
    return Pose2DSequence(pixels * scale - 1.0, seq_id=seq_id, fps=fps, width=width, height=height)


def denormalize(seq, width, height):
    """Inverse of `normalize`; returns pixel coordinates as an array."""
    if not (width > 0 and height > 0):
        raise InvalidArgumentError("image size must be positive, got {}x{}".format(width, height))
    return (np.asarray(seq, dtype=float) + 1.0) * np.array([width / 2.0, height / 2.0])


def _round(values):
    return [float('{:.{}g}'.format(v, SERIAL_DIGITS)) for v in values]


def sequence_to_record(seq, **extra):
    """JSON-ready record for a 2D or 3D sequence; `extra` fields are added verbatim."""
    frames = np.asarray(seq.frames)
    T, J, D = frames.shape
    rounded = np.array(_round(frames.ravel())).reshape(T, J, D)
    record = {'id': seq.seq_id, 'fps': float(seq.fps), 'joints': J, 'frames': rounded.tolist()}
    if isinstance(seq, Pose3DSequence):
        record['root_index'] = seq.root_index
        if seq.parents is not None:
            record['parents'] = list(seq.parents)
    else:
        if seq.width is not None:
            record['width'] = seq.width
            record['height'] = seq.height
    record.update(extra)
    return record


def record_to_sequence(record, line=None):
    """Rebuild a `Pose2DSequence` or `Pose3DSequence` from a record.

    Raises
    ------
    SchemaError
        On missing fields or inconsistent joint counts, naming `line`.
    """
    where = "line {}: ".format(line) if line is not None else ''
    if not isinstance(record, dict):
        raise SchemaError(where + "record is not an object", line=line)
    for key in ('id', 'joints', 'frames'):
        if key not in record:
            raise SchemaError(where + "missing field {!r}".format(key), line=line)
    joints = record['joints']
    frames = record['frames']
    if not isinstance(frames, list):
        raise SchemaError(where + "frames must be a list", line=line)
    for t, frame in enumerate(frames):
        if not isinstance(frame, list) or len(frame) != joints:
            size = len(frame) if isinstance(frame, list) else type(frame).__name__
            raise SchemaError(where + "frame {} has {} joints, expected {}".format(t, size, joints), line=line)
    try:
        array = np.array(frames, dtype=float).reshape(len(frames), joints, -1)
    except (ValueError, TypeError):
        raise SchemaError(where + "frames are not a T x J x D numeric grid", line=line)
    dims = array.shape[-1] if array.size else (3 if 'root_index' in record else 2)
    array = array.reshape(len(frames), joints, dims)
    try:
        fps = float(record.get('fps', DEFAULT_FPS))
        root_index = int(record.get('root_index', ROOT_INDEX))
    except (ValueError, TypeError):
        raise SchemaError(where + "fps and root_index must be numbers", line=line)
    for key in ('width', 'height'):
        value = record.get(key)
        if value is not None and (isinstance(value, bool) or not isinstance(value, (int, float))):
            raise SchemaError(where + "{} must be a number".format(key), line=line)
    try:
        if dims == 3:
            return Pose3DSequence(array, seq_id=str(record['id']), fps=fps,
                                  root_index=root_index, parents=record.get('parents'))
        if dims == 2:
            return Pose2DSequence(array, seq_id=str(record['id']), fps=fps,
                                  width=record.get('width'), height=record.get('height'))
    except InvalidArgumentError as error:
        raise SchemaError(where + str(error), line=line)
    raise SchemaError(where + "frames have {} coordinates per joint".format(dims), line=line)


def read_records(path):
    """Yield ``(line number, record)`` for every non-blank line of a dataset file."""
    with open(path, 'rb') as handle:
        for number, raw in enumerate(handle, start=1):
            try:
                text = raw.decode('utf-8')
            except UnicodeDecodeError as error:
                raise ParseError("{}:{}: not valid UTF-8 ({})".format(path, number, error.reason), line=number)
            if not text.strip():
                continue
            try:
                yield number, json.loads(text)
            except ValueError as error:
                raise ParseError("{}:{}: {}".format(path, number, error), line=number)


def write_records(path, records):
    with open(path, 'w', encoding='utf-8') as handle:
        for record in records:
            handle.write(json.dumps(record))
            handle.write('\n')
    logger.debug("wrote dataset %s", path)


def load_dataset(path):
    """Load every sequence of a dataset file, in file order."""
    return [record_to_sequence(record, line) for line, record in read_records(path)]


def save_dataset(path, sequences):
    """Write sequences one record per line."""
    write_records(path, (sequence_to_record(seq) for seq in sequences))
