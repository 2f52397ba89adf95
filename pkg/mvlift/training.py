# -*- coding: utf-8 -*-
"""Training loops of the line-conditioned (Stage 1) and multi-view (Stage 4) denoisers.

Every step draws its batch, epipoles, steps and noise from random sources
keyed by ``(seed, step)``, so a resumed run continues exactly where the
interrupted one stopped.
"""
import collections
import logging
import math
import os

import numpy as np
import pandas as pd
import torch

from mvlift.base import DTYPE, InvalidArgumentError, EmptyDatasetError, TrainingError, make_rng, make_generator
from mvlift.denoiser import KIND_LCDM, KIND_MVDM
from mvlift.diffusion import training_loss, save_checkpoint, load_checkpoint
from mvlift.geometry import sample_virtual_epipole, lines_to_epipole, epipolar_lines

logger = logging.getLogger(__name__)

EPIPOLE_BOUNDS = (-2.5, -0.5, 2.5, 0.5)
"""tuple: Region (xmin, ymin, xmax, ymax) virtual epipoles are drawn from

It covers the epipoles of the 6-view 60 degree rig, which lie on the
horizon line at x = +-fx * tan(60) and +-fx * tan(30)."""

LOG_COLUMNS = ['step', 'total', 'recon', 'line', 'grad_norm']

TrainingResult = collections.namedtuple('TrainingResult', ['model', 'log', 'step'])


def _stack_sequences(dataset):
    if len(dataset) == 0:
        raise EmptyDatasetError("the training dataset is empty")
    frames = [np.asarray(seq, dtype=float) for seq in dataset]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise InvalidArgumentError("training sequences must share one (T, J) shape, found {}".format(sorted(shapes)))
    return np.stack(frames)


def _make_optimizer(model, cfg):
    return torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)


def virtual_epipole_lines(x0, rng, bounds=EPIPOLE_BOUNDS):
    """Lines through every joint of each sequence and one virtual epipole per sequence.

    Parameters
    ----------
    x0 : array (B, T, J, 2)

    Returns
    -------
    array (B, T, J, 3)
    """
    return np.stack([lines_to_epipole(seq, sample_virtual_epipole(rng, bounds, joints=seq)) for seq in x0])


def _lcdm_batch(data, rng, cfg, bounds):
    x0 = data[rng.integers(len(data), size=cfg.batch_size)]
    return torch.as_tensor(x0, dtype=DTYPE), torch.as_tensor(virtual_epipole_lines(x0, rng, bounds), dtype=DTYPE), None


def _mvdm_batch(data, rng, cfg, fundamentals):
    views = data[rng.integers(len(data), size=cfg.batch_size)]
    lines = np.stack([epipolar_lines(F, views[:, 0]) for F in fundamentals], axis=1)
    cond = torch.as_tensor(views[:, 0], dtype=DTYPE)
    return torch.as_tensor(views[:, 1:], dtype=DTYPE), torch.as_tensor(lines, dtype=DTYPE), cond


def _run(model, sched, cfg, data, make_batch, checkpoint_path, log_path, resume):
    optimizer = _make_optimizer(model, cfg)
    start = 0
    previous = None
    if resume is not None:
        checkpoint = load_checkpoint(resume, expected_config=model.config)
        if checkpoint.model.kind != model.kind:
            raise InvalidArgumentError("cannot resume a {} model from a {} checkpoint".format(model.kind, checkpoint.model.kind))
        model.load_state_dict(checkpoint.model.state_dict())
        if checkpoint.optimizer_state is not None:
            optimizer.load_state_dict(checkpoint.optimizer_state)
        start = checkpoint.step
        if log_path is not None and os.path.exists(log_path):
            previous = pd.read_csv(log_path)
            previous = previous[previous['step'] < start]
        logger.info("resuming %s training at step=%d", model.kind, start)

    rows = []
    for step in range(start, cfg.steps):
        rng = make_rng((cfg.seed, step))
        generator = make_generator((cfg.seed, step))
        x0, lines, cond = make_batch(data, rng)
        n = torch.randint(1, sched.N + 1, (len(x0),), generator=generator)
        eps = torch.randn(x0.shape, generator=generator, dtype=DTYPE)
        if cond is None:
            denoiser = model
        else:
            def denoiser(x_n, n, L):
                return model(torch.cat([cond.unsqueeze(1), x_n], dim=1), n, cond)
        optimizer.zero_grad(set_to_none=True)
        terms = training_loss(x0, n, lines, denoiser, eps, sched, cfg)
        values = [float(t) for t in terms]
        if not all(math.isfinite(v) for v in values):
            diagnostics = {'step': step, 'total': values[0], 'recon': values[1], 'line': values[2],
                           'steps_drawn': n.tolist()}
            logger.error("non-finite %s training loss: step=%d total=%r", model.kind, step, values[0])
            raise TrainingError("non-finite training loss at step {}".format(step), diagnostics=diagnostics)
        terms.total.backward()
        grad_norm = float(torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip))
        optimizer.step()
        rows.append({'step': step, 'total': values[0], 'recon': values[1], 'line': values[2], 'grad_norm': grad_norm})
        if cfg.log_every and step % cfg.log_every == 0:
            logger.info("%s step=%d total=%.6f recon=%.6f line=%.6f", model.kind, step, *values)

    log = pd.DataFrame(rows, columns=LOG_COLUMNS)
    if previous is not None:
        log = pd.concat([previous, log], ignore_index=True)
    final_step = max(start, cfg.steps)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, sched, step=final_step, optimizer=optimizer)
    if log_path is not None:
        log.to_csv(log_path, index=False)
        logger.debug("wrote training log %s", log_path)
    return TrainingResult(model, log, final_step)


def train_lcdm(dataset, model, sched, cfg, checkpoint_path=None, log_path=None, resume=None,
               epipole_bounds=EPIPOLE_BOUNDS):
    """Train the line-conditioned denoiser on single-view 2D sequences.

    Each training sequence is conditioned on the lines joining its joints to
    a virtual epipole drawn uniformly in `epipole_bounds`, away from its joints.

    Parameters
    ----------
    dataset : list of Pose2DSequence
        Sequences sharing one (T, J) shape.
    model : LineConditionedDenoiser
    sched : NoiseSchedule
    cfg : TrainingConfig
    checkpoint_path, log_path : str, optional
        Where to write the final checkpoint and the per-step loss log (CSV).
    resume : str, optional
        Checkpoint to continue from; its step is the first step run.

    Returns
    -------
    TrainingResult
    """
    if model.kind != KIND_LCDM:
        raise InvalidArgumentError("train_lcdm needs a line-conditioned model, got {}".format(model.kind))
    data = _stack_sequences(dataset)

    def make_batch(values, rng):
        return _lcdm_batch(values, rng, cfg, epipole_bounds)

    return _run(model, sched, cfg, data, make_batch, checkpoint_path, log_path, resume)


def train_mvdm(dataset, model, sched, cfg, checkpoint_path=None, log_path=None, resume=None):
    """Train the multi-view denoiser on a strictly consistent multi-view dataset.

    View 0 conditions the model; views 1..V-1 are noised and reconstructed.
    Their line-matching term uses the epipolar lines of view 0's joints.

    Parameters
    ----------
    dataset : MVDataset
    model : MultiViewDenoiser
    sched : NoiseSchedule
    cfg : TrainingConfig

    Returns
    -------
    TrainingResult
    """
    if model.kind != KIND_MVDM:
        raise InvalidArgumentError("train_mvdm needs a multi-view model, got {}".format(model.kind))
    if len(dataset) == 0:
        raise EmptyDatasetError("the multi-view dataset is empty")
    if dataset.rig.n_views != model.config.view_count:
        raise InvalidArgumentError("dataset has {} views, model expects {}".format(dataset.rig.n_views, model.config.view_count))
    data = dataset.as_array()
    fundamentals = [dataset.rig.fundamental[(0, k)] for k in range(1, dataset.rig.n_views)]

    def make_batch(values, rng):
        return _mvdm_batch(values, rng, cfg, fundamentals)

    return _run(model, sched, cfg, data, make_batch, checkpoint_path, log_path, resume)


def smoothed_loss(log, window=50, column='total'):
    """Rolling mean of a training-log column."""
    return log[column].rolling(window, min_periods=1).mean()
