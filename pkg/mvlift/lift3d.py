# -*- coding: utf-8 -*-
"""3D recovery from multi-view 2D sequences and the strictly consistent multi-view dataset (Stage 3).

`recover_3d` triangulates every joint, then minimizes reprojection error plus
optional temporal-smoothness and bone-length terms with a sparse Gauss-Newton
solver. `build_mv_dataset` reprojects 3D sequences into the 4-view rig; those
projections satisfy every pairwise epipolar constraint by construction.
"""
import collections
import logging
import os
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from mvlift.base import (InvalidArgumentError, DegenerateGeometryError, BehindCameraError, InsufficientViewsError,
                         EmptyDatasetError, SchemaError, parallel_map)
from mvlift.geometry import (triangulate, project_with_jacobian, epipolar_lines, point_line_distance, save_rig,
                             load_rig)
from mvlift.motion import (Pose2DSequence, Pose3DSequence, project_sequence, bone_lengths, read_records,
                           record_to_sequence, sequence_to_record, write_records)

logger = logging.getLogger(__name__)

DAMPING = 1e-9
"""float: Diagonal added to the normal equations so that unobserved directions stay solvable"""

CONSISTENCY_TOLERANCE = 1e-9
"""float: Largest pairwise epipolar residual accepted in a multi-view dataset"""

RIG_FILENAME = 'rig4.txt'

Recovery = collections.namedtuple('Recovery', ['sequence', 'joint_residuals', 'converged', 'iterations', 'cost_history'])
"""Result of `recover_3d`: joint_residuals is the per-joint RMS reprojection error"""


@dataclass
class LiftOptions(object):
    """Weights and stopping rule of the Stage-3 least-squares problem."""
    smoothness: float = 1e-2
    bone: float = 1e-1
    max_iterations: int = 50
    tolerance: float = 1e-10

    def __post_init__(self):
        if self.smoothness < 0 or self.bone < 0:
            raise InvalidArgumentError("regularization weights must be non-negative")
        if self.max_iterations < 0:
            raise InvalidArgumentError("max_iterations must be non-negative")


def _index(T, J):
    return np.arange(T * J * 3).reshape(T, J, 3)


class _Problem(object):
    """Residual vector and sparse Jacobian of the Stage-3 objective."""

    def __init__(self, observed, rig, opts, parents, root_index, rest_lengths):
        self.observed = observed
        self.rig = rig
        self.V, self.T, self.J = observed.shape[:3]
        self.index = _index(self.T, self.J)
        self.smooth = np.sqrt(opts.smoothness)
        self.bone = np.sqrt(opts.bone) if parents is not None else 0.0
        self.parents = parents
        self.children = [j for j in range(self.J) if parents is not None and parents[j] != j]
        self.rest_lengths = rest_lengths
        self._smoothness_block = self._smoothness_jacobian()

    def _smoothness_jacobian(self):
        if self.smooth == 0 or self.T < 3:
            return None
        middle = self.index[1:-1].ravel()
        before = self.index[:-2].ravel()
        after = self.index[2:].ravel()
        rows = np.arange(len(middle))
        data = np.concatenate([np.full(len(rows), self.smooth), np.full(len(rows), -2.0 * self.smooth),
                               np.full(len(rows), self.smooth)])
        return sparse.coo_matrix((data, (np.tile(rows, 3), np.concatenate([before, middle, after]))),
                                 shape=(len(rows), self.T * self.J * 3)).tocsr()

    def reprojection(self, points, with_jacobian=True):
        """Residuals (V, T, J, 2) and the COO pieces of their Jacobian; None when a depth is not positive."""
        flat = points.reshape(-1, 3)
        N = len(flat)
        residuals = []
        rows, cols, data = [], [], []
        for v in range(self.V):
            uv, jac, depth = project_with_jacobian(flat, self.rig.views[v], self.rig.intrinsics)
            if not np.all(depth > 0):
                return None
            residuals.append((uv - self.observed[v].reshape(N, 2)).reshape(self.T, self.J, 2))
            if with_jacobian:
                base = v * N * 2
                r = base + np.arange(N)[:, None, None] * 2 + np.arange(2)[None, :, None]
                c = np.arange(N)[:, None, None] * 3 + np.arange(3)[None, None, :]
                rows.append(np.broadcast_to(r, jac.shape).ravel())
                cols.append(np.broadcast_to(c, jac.shape).ravel())
                data.append(jac.ravel())
        return np.stack(residuals), (rows, cols, data)

    def evaluate(self, points, with_jacobian=True):
        """Stacked residual vector and (optionally) its CSR Jacobian; (None, None) behind a camera."""
        projected = self.reprojection(points, with_jacobian)
        if projected is None:
            return None, None
        reproj, (rows, cols, data) = projected
        parts = [reproj.ravel()]
        blocks = []
        n_vars = self.T * self.J * 3
        if with_jacobian:
            blocks.append(sparse.coo_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                                            shape=(len(parts[0]), n_vars)).tocsr())
        if self._smoothness_block is not None:
            parts.append(self._smoothness_block @ points.ravel())
            if with_jacobian:
                blocks.append(self._smoothness_block)
        if self.bone > 0 and self.children:
            children = np.array(self.children)
            parent_of = np.array([self.parents[j] for j in self.children])
            delta = points[:, children] - points[:, parent_of]
            length = np.linalg.norm(delta, axis=-1)
            parts.append((self.bone * (length - self.rest_lengths[children][None, :])).ravel())
            if with_jacobian:
                safe = np.where(length > 0, length, 1.0)
                unit = np.where(length[..., None] > 0, delta / safe[..., None], 0.0)
                n_rows = unit.shape[0] * unit.shape[1]
                rows = np.repeat(np.arange(n_rows), 3)
                child_cols = self.index[:, children].reshape(-1)
                parent_cols = self.index[:, parent_of].reshape(-1)
                values = (self.bone * unit).reshape(-1)
                blocks.append(sparse.coo_matrix((np.concatenate([values, -values]),
                                                 (np.concatenate([rows, rows]), np.concatenate([child_cols, parent_cols]))),
                                                shape=(n_rows, n_vars)).tocsr())
        residual = np.concatenate(parts)
        jacobian = sparse.vstack(blocks).tocsr() if with_jacobian else None
        return residual, jacobian

    def cost(self, points):
        residual, _ = self.evaluate(points, with_jacobian=False)
        return np.inf if residual is None else float(residual @ residual)


def _triangulate_all(observed, rig):
    V, T, J = observed.shape[:3]
    points = np.zeros((T, J, 3))
    for t in range(T):
        for j in range(J):
            points[t, j] = triangulate({v: observed[v, t, j] for v in range(V)}, rig).point
    return points


def recover_3d(views, rig, opts=None, parents=None, root_index=0, seq_id=''):
    """Recover 3D joint motion from V roughly consistent 2D sequences.

    Parameters
    ----------
    views : sequence of Pose2DSequence or array (V, T, J, 2)
        One sequence per rig view, in rig order.
    rig : CameraRig
    opts : LiftOptions, optional
    parents : sequence of int, optional
        Kinematic tree; the bone-length term is used only when given.
    root_index : int
    seq_id : str

    Returns
    -------
    Recovery
        The 3D sequence, the per-joint RMS reprojection residual, the
        convergence flag, the iterations run and the objective per iteration.
    """
    opts = opts or LiftOptions()
    observed = np.stack([np.asarray(v, dtype=float) for v in views])
    if observed.ndim != 4 or observed.shape[-1] != 2:
        raise InvalidArgumentError("expected (V, T, J, 2) views, got {}".format(observed.shape))
    if len(observed) < 2:
        raise InsufficientViewsError("3D recovery needs at least 2 views, got {}".format(len(observed)))
    if len(observed) != rig.n_views:
        raise InvalidArgumentError("{} views given for a {}-view rig".format(len(observed), rig.n_views))
    V, T, J = observed.shape[:3]
    if parents is not None and len(parents) != J:
        raise InvalidArgumentError("parents lists {} joints, views have {}".format(len(parents), J))

    points = _triangulate_all(observed, rig)
    rest_lengths = np.median(bone_lengths(points, parents), axis=0) if parents is not None else None
    problem = _Problem(observed, rig, opts, parents, root_index, rest_lengths)

    cost = problem.cost(points)
    history = [cost]
    converged = opts.max_iterations == 0
    iterations = 0
    n_vars = T * J * 3
    damping = DAMPING * sparse.identity(n_vars, format='csc')
    for iterations in range(1, opts.max_iterations + 1):
        residual, jacobian = problem.evaluate(points)
        gradient = jacobian.T @ residual
        step = spsolve((jacobian.T @ jacobian).tocsc() + damping, -gradient).reshape(T, J, 3)
        scale = 1.0
        accepted = False
        while scale >= 1e-6:
            candidate = points + scale * step
            candidate_cost = problem.cost(candidate)
            if candidate_cost <= cost:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            converged = True
            break
        decrease = cost - candidate_cost
        points, cost = candidate, candidate_cost
        history.append(cost)
        if scale * np.linalg.norm(step) < opts.tolerance or decrease <= opts.tolerance * max(1.0, cost):
            converged = True
            break
    if not converged:
        logger.warning("3D recovery of %r did not converge after %d iterations (cost=%.6g)", seq_id, iterations, cost)

    reproj, _ = problem.reprojection(points, with_jacobian=False)
    joint_residuals = np.sqrt(np.mean(reproj ** 2, axis=(0, 1, 3)))
    sequence = Pose3DSequence(points, seq_id=seq_id, root_index=root_index, parents=parents)
    return Recovery(sequence, joint_residuals, converged, iterations, history)


def enforce_bone_lengths(seq, skeleton):
    """Move every child joint onto the sphere of its bone length around its (already moved) parent.

    The tree is traversed root-outward, so the root trajectory is unchanged.

    Raises
    ------
    DegenerateGeometryError
        When a child coincides with its parent.
    """
    frames = np.asarray(seq, dtype=float)
    if frames.shape[1] != skeleton.joint_count:
        raise InvalidArgumentError("skeleton has {} joints, sequence {}".format(skeleton.joint_count, frames.shape[1]))
    result = frames.copy()
    lengths = skeleton.bone_length_array()
    for j in skeleton.order:
        parent = skeleton.parents[j]
        if parent == j:
            continue
        direction = frames[:, j] - result[:, parent]
        norm = np.linalg.norm(direction, axis=-1)
        if np.any(norm < 1e-12):
            frame = int(np.argmax(norm < 1e-12))
            raise DegenerateGeometryError("joint {} coincides with its parent {} in frame {}".format(j, parent, frame))
        result[:, j] = result[:, parent] + lengths[j] * direction / norm[:, None]
    if isinstance(seq, Pose3DSequence):
        return seq.replace(frames=result)
    return Pose3DSequence(result, root_index=skeleton.root_index, parents=skeleton.parents)


def epipolar_residual(views, rig):
    """Largest point-to-epipolar-line distance over every ordered view pair, frame and joint."""
    worst = 0.0
    for (v, w), F in rig.fundamental.items():
        lines = epipolar_lines(F, np.asarray(views[v]))
        worst = max(worst, float(np.max(point_line_distance(np.asarray(views[w]), lines))))
    return worst


@dataclass
class MVEntry(object):
    seq_id: str
    views: tuple


@dataclass
class MVDataset(object):
    """Per-sequence multi-view 2D sequences generated by one rig."""
    entries: list
    rig: object

    def __len__(self):
        return len(self.entries)

    def as_array(self):
        """Stacked views, shape (N, V, T, J, 2); all entries must share T and J."""
        return np.stack([np.stack([np.asarray(v) for v in entry.views]) for entry in self.entries])


def _project_views(seq, rig):
    try:
        return seq.seq_id, tuple(project_sequence(seq, rig, k).replace(seq_id='{}/view{}'.format(seq.seq_id, k))
                                 for k in range(rig.n_views)), None
    except BehindCameraError as error:
        return seq.seq_id, None, str(error)


def build_mv_dataset(seqs, rig4, pool_size=1):
    """Reproject 3D sequences into every view of `rig4`.

    Sequences with a joint behind any camera are skipped and logged.

    Raises
    ------
    EmptyDatasetError
        When every sequence was skipped.
    """
    entries = []
    for seq_id, views, reason in parallel_map(_project_views, seqs, pool_size, rig=rig4):
        if views is None:
            logger.warning("skipping sequence %r: %s", seq_id, reason)
            continue
        residual = epipolar_residual(views, rig4)
        if residual >= CONSISTENCY_TOLERANCE:
            raise DegenerateGeometryError("sequence {!r} has epipolar residual {:.3g}".format(seq_id, residual))
        entries.append(MVEntry(seq_id, views))
    if not entries:
        raise EmptyDatasetError("no sequence is visible in every view of the rig")
    return MVDataset(entries, rig4)


def save_mv_dataset(path, dataset):
    """One record per (sequence, view) plus the rig document next to the dataset file."""
    records = []
    for entry in dataset.entries:
        for k, view in enumerate(entry.views):
            records.append(sequence_to_record(view, sequence=entry.seq_id, view=k))
    write_records(path, records)
    save_rig(os.path.join(os.path.dirname(os.path.abspath(path)), RIG_FILENAME), dataset.rig)


def load_mv_dataset(path, rig_path=None):
    """Inverse of `save_mv_dataset`; records are grouped by their ``sequence`` field in file order."""
    rig = load_rig(rig_path or os.path.join(os.path.dirname(os.path.abspath(path)), RIG_FILENAME))
    grouped = collections.OrderedDict()
    for line, record in read_records(path):
        if 'sequence' not in record or 'view' not in record:
            raise SchemaError("line {}: multi-view records need 'sequence' and 'view'".format(line), line=line)
        grouped.setdefault(record['sequence'], {})[int(record['view'])] = record_to_sequence(record, line)
    entries = []
    for seq_id, views in grouped.items():
        if sorted(views) != list(range(rig.n_views)):
            raise SchemaError("sequence {!r} has views {}, expected 0..{}".format(seq_id, sorted(views), rig.n_views - 1))
        entries.append(MVEntry(seq_id, tuple(views[k] for k in range(rig.n_views))))
    return MVDataset(entries, rig)


def constant_depth_lift(seq, rig, view=0, depth=None):
    """Naive baseline: back-project every joint of `view` at one constant camera depth.

    `depth` defaults to the distance from the camera to the world origin.
    """
    pose = rig.views[view]
    if depth is None:
        depth = float(np.linalg.norm(pose.center))
    if not depth > 0:
        raise InvalidArgumentError("depth must be positive")
    points = np.asarray(seq, dtype=float)
    intrinsics = rig.intrinsics
    x = (points[..., 0] - intrinsics.cx) / intrinsics.fx
    y = (points[..., 1] - intrinsics.cy) / intrinsics.fy
    camera = depth * np.stack([x, y, np.ones_like(x)], axis=-1)
    world = (camera - pose.translation) @ pose.rotation
    return Pose3DSequence(world, seq_id=getattr(seq, 'seq_id', ''))
