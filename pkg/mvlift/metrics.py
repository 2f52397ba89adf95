# -*- coding: utf-8 -*-
"""Evaluation metrics for lifted motion, with and without 3D ground truth.

3D metrics are in world units, 2D metrics in normalized image units; a
`MetricReport` scales both by `mvlift.base.MILLI`.
"""
import logging

import numpy as np
import pandas as pd

from mvlift.base import MILLI, InvalidArgumentError
from mvlift.geometry import procrustes_align, apply_similarity
from mvlift.motion import project_sequence

logger = logging.getLogger(__name__)

METRICS_3D = ('t_root', 'mpjpe', 'pa_mpjpe')
METRICS_2D = ('j2d', 'j2d_centered')


def _pair(pred, gt):
    a = np.asarray(pred, dtype=float)
    b = np.asarray(gt, dtype=float)
    if a.shape != b.shape:
        raise InvalidArgumentError("shape mismatch: prediction {} vs ground truth {}".format(a.shape, b.shape))
    return a, b


def _root_index(seq):
    return getattr(seq, 'root_index', 0)


def mpjpe(pred, gt):
    """Mean per-joint position error after moving each frame's root to the origin."""
    a, b = _pair(pred, gt)
    a = a - a[:, _root_index(pred)][:, None]
    b = b - b[:, _root_index(gt)][:, None]
    return float(np.mean(np.linalg.norm(a - b, axis=-1)))


def pa_mpjpe(pred, gt):
    """Mean per-joint position error after aligning every predicted frame onto ground truth.

    The per-frame alignment is a least-squares similarity (rotation,
    translation, uniform scale).
    """
    a, b = _pair(pred, gt)
    aligned = np.stack([apply_similarity(procrustes_align(a[t], b[t]), a[t]) for t in range(len(a))])
    return float(np.mean(np.linalg.norm(aligned - b, axis=-1)))


def t_root(pred, gt):
    """Mean world-space distance between the root joints."""
    a, b = _pair(pred, gt)
    if _root_index(pred) != _root_index(gt):
        raise InvalidArgumentError("root indices differ: {} vs {}".format(_root_index(pred), _root_index(gt)))
    root = _root_index(gt)
    return float(np.mean(np.linalg.norm(a[:, root] - b[:, root], axis=-1)))


def _projected_pair(pred3d, gt2d, rig, view):
    projected = np.asarray(project_sequence(pred3d, rig, view))
    observed = np.asarray(gt2d, dtype=float)
    if projected.shape != observed.shape:
        raise InvalidArgumentError("shape mismatch: projection {} vs 2D ground truth {}".format(projected.shape, observed.shape))
    return projected, observed


def j2d(pred3d, gt2d, rig, view=0):
    """Mean 2D joint distance between the projection of `pred3d` into `view` and `gt2d`."""
    projected, observed = _projected_pair(pred3d, gt2d, rig, view)
    return float(np.mean(np.linalg.norm(projected - observed, axis=-1)))


def j2d_centered(pred3d, gt2d, rig, view=0):
    """`j2d` after moving each sequence's 2D root to the image center in every frame."""
    projected, observed = _projected_pair(pred3d, gt2d, rig, view)
    root = _root_index(pred3d)
    projected = projected - projected[:, root][:, None]
    observed = observed - observed[:, root][:, None]
    return float(np.mean(np.linalg.norm(projected - observed, axis=-1)))


class MetricReport(object):
    """Per-sequence metric table plus its column means, in milli-units.

    Attributes
    ----------
    detail : DataFrame
        One row per sequence id, one column per metric.
    summary : Series
        Column means of `detail`.
    """

    def __init__(self, detail):
        self.detail = detail
        self.summary = detail.mean(axis=0) if len(detail) else pd.Series(0.0, index=detail.columns)

    def __getitem__(self, metric):
        return float(self.summary[metric])

    def to_csv(self, summary_path, detail_path):
        self.summary.rename_axis('metric').to_frame('value').to_csv(summary_path)
        self.detail.to_csv(detail_path)
        logger.debug("wrote metric report %s and %s", summary_path, detail_path)

    @classmethod
    def read_csv(cls, detail_path):
        return cls(pd.read_csv(detail_path, index_col='seq_id'))


def _by_id(seqs, what):
    mapping = {}
    for seq in seqs:
        if seq.seq_id in mapping:
            raise InvalidArgumentError("duplicate {} id {!r}".format(what, seq.seq_id))
        mapping[seq.seq_id] = seq
    return mapping


def evaluate(predictions, ground_truth=None, inputs=None, rig=None, view=0):
    """Score predicted 3D sequences against 3D ground truth and/or the observed 2D input.

    Parameters
    ----------
    predictions : list of Pose3DSequence
    ground_truth : list of Pose3DSequence, optional
        Enables t_root, mpjpe and pa_mpjpe.
    inputs : list of Pose2DSequence, optional
        Observed 2D sequences in `view` of `rig`; enables j2d and j2d_centered.
    rig : CameraRig, optional
        Required with `inputs`.
    view : int

    Returns
    -------
    MetricReport

    Raises
    ------
    InvalidArgumentError
        Listing every id that is missing on either side.
    """
    pred = _by_id(predictions, 'prediction')
    references = []
    if ground_truth is not None:
        references.append(('ground truth', _by_id(ground_truth, 'ground truth')))
    if inputs is not None:
        if rig is None:
            raise InvalidArgumentError("2D metrics need the rig of the input view")
        references.append(('input', _by_id(inputs, 'input')))
    problems = []
    for name, mapping in references:
        missing = sorted(set(pred) - set(mapping))
        extra = sorted(set(mapping) - set(pred))
        if missing:
            problems.append("no {} for: {}".format(name, ', '.join(missing)))
        if extra:
            problems.append("no prediction for {}: {}".format(name, ', '.join(extra)))
    if problems:
        raise InvalidArgumentError('; '.join(problems))

    rows = []
    for seq_id, seq in pred.items():
        row = {'seq_id': seq_id}
        if ground_truth is not None:
            gt = references[0][1][seq_id]
            row['t_root'] = MILLI * t_root(seq, gt)
            row['mpjpe'] = MILLI * mpjpe(seq, gt)
            row['pa_mpjpe'] = MILLI * pa_mpjpe(seq, gt)
        if inputs is not None:
            observed = references[-1][1][seq_id]
            row['j2d'] = MILLI * j2d(seq, observed, rig, view)
            row['j2d_centered'] = MILLI * j2d_centered(seq, observed, rig, view)
        rows.append(row)
    columns = (list(METRICS_3D) if ground_truth is not None else []) + (list(METRICS_2D) if inputs is not None else [])
    detail = pd.DataFrame(rows, columns=['seq_id'] + columns).set_index('seq_id')
    return MetricReport(detail)
