# -*- coding: utf-8 -*-
"""Multi-view optimization of unobserved-view 2D sequences (Stage 2).

The five sequences of views 1..5 are refined with score distillation against
the line-conditioned denoiser plus the gradient of the multi-view epipolar
consistency loss, while the input view 0 stays fixed.
"""
import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import torch

from mvlift.base import (DTYPE, LINE_EPS, InvalidArgumentError, DegenerateGeometryError, OptimizationDivergedError,
                         as_tensor, make_generator)
from mvlift.diffusion import q_sample, x0_to_eps, sample
from mvlift.geometry import epipolar_lines
from mvlift.motion import Pose2DSequence

logger = logging.getLogger(__name__)

WEIGHTINGS = ('constant', 'noise')
"""tuple: SDS weightings; 'noise' uses 1 - alpha_bar_n"""

STEP_DECAYS = ('cosine', 'constant')

ZERO_RESIDUAL = 1e-12
"""float: Epipolar residuals at or below this size get a zero subgradient"""

DIVERGENCE_LIMIT = 1e6

STAGE2_VIEWS = 6
STAGE2_ANGLE_STEP = 60.0
"""Stage-2 rig: the input view plus five unobserved views 60 degrees apart"""


def default_n_range(sched):
    """SDS noise-level range [0.02 N, 0.98 N], clipped to at least step 1."""
    return max(1, int(round(0.02 * sched.N))), max(1, int(round(0.98 * sched.N)))


def sds_weight(n, sched, weighting='constant'):
    if weighting == 'constant':
        return 1.0
    if weighting == 'noise':
        return float(1.0 - sched.alpha_bar[n])
    raise InvalidArgumentError("unknown SDS weighting {!r}, expected one of {}".format(weighting, WEIGHTINGS))


def sds_gradient(phi_k, L_k, denoiser, sched, generator, n_range=None, weighting='constant'):
    """Score-distillation gradient ``w(n) (eps_hat - eps)`` for one view sequence.

    Parameters
    ----------
    phi_k : tensor (T, J, 2)
        Current estimate of the view.
    L_k : tensor (T, J, 3)
        Epipolar lines conditioning the denoiser.
    denoiser : callable
        ``denoiser(x_n, n, L) -> x0_hat``; never differentiated.
    sched : NoiseSchedule
    generator : torch.Generator
        Source of the step and the noise.
    n_range : tuple, optional
        Inclusive step range, `default_n_range` when omitted.

    Returns
    -------
    tensor
        Gradient shaped like `phi_k`.
    """
    n_min, n_max = n_range or default_n_range(sched)
    if not 1 <= n_min <= n_max <= sched.N:
        raise InvalidArgumentError("SDS step range ({}, {}) outside 1..{}".format(n_min, n_max, sched.N))
    phi_k = as_tensor(phi_k).detach()
    n = int(torch.randint(n_min, n_max + 1, (1,), generator=generator))
    eps = torch.randn(phi_k.shape, generator=generator, dtype=DTYPE)
    with torch.no_grad():
        x_n = q_sample(phi_k, n, eps, sched)
        eps_hat = x0_to_eps(denoiser(x_n, n, as_tensor(L_k)), x_n, n, sched)
    return sds_weight(n, sched, weighting) * (eps_hat - eps)


def _fundamental_tensors(rig):
    return {pair: as_tensor(F) for pair, F in rig.fundamental.items()}


def _directed_term(F, x_v, x_w):
    """Sum of distances from the joints of view w to the epipolar lines of view v's joints."""
    ones = torch.ones(x_v.shape[:-1] + (1,), dtype=DTYPE)
    lines = torch.cat([x_v, ones], dim=-1) @ F.T
    norm = torch.sqrt(lines[..., 0] ** 2 + lines[..., 1] ** 2)
    if bool(torch.any(norm < LINE_EPS)):
        raise DegenerateGeometryError("a joint coincides with an epipole")
    residual = (lines[..., 0] * x_w[..., 0] + lines[..., 1] * x_w[..., 1] + lines[..., 2]) / norm
    # zero subgradient for residuals that are zero at machine precision
    residual = torch.where(torch.abs(residual) > ZERO_RESIDUAL, residual, residual.detach())
    return torch.abs(residual).sum()


def multiview_consistency_loss(all_seqs, rig):
    """Mean epipolar residual over every unordered pair of views, both directions.

    ``loss = 1/(2M) * sum over pairs (v, w) of [L(v->w) + L(w->v)]`` with
    ``M = V (V - 1) / 2``.

    Parameters
    ----------
    all_seqs : tensor (V, T, J, 2) or sequence of V (T, J, 2) sequences
        Index 0 is the input view. Gradients flow through tensors that require them.
    rig : CameraRig
        V-view rig matching `all_seqs`.

    Returns
    -------
    tensor
        Scalar loss.
    """
    if isinstance(all_seqs, (list, tuple)):
        all_seqs = torch.stack([as_tensor(np.asarray(s) if isinstance(s, Pose2DSequence) else s) for s in all_seqs])
    seqs = as_tensor(all_seqs)
    if seqs.dim() != 4 or seqs.shape[-1] != 2 or seqs.shape[0] != rig.n_views:
        raise InvalidArgumentError("expected ({}, T, J, 2) sequences, got {}".format(rig.n_views, tuple(seqs.shape)))
    F = _fundamental_tensors(rig)
    pairs = list(itertools.combinations(range(rig.n_views), 2))
    if not pairs:
        raise InvalidArgumentError("the consistency loss needs at least two views")
    total = seqs.new_zeros(())
    for v, w in pairs:
        total = total + _directed_term(F[(v, w)], seqs[v], seqs[w]) + _directed_term(F[(w, v)], seqs[w], seqs[v])
    return total / (2.0 * len(pairs))


def conditioning_lines(input_seq, rig, view):
    """Epipolar lines in `view` of the input view's joints, shape (T, J, 3)."""
    return as_tensor(epipolar_lines(rig.fundamental[(0, view)], np.asarray(input_seq)))


def sample_unobserved_views(input_seq, rig, denoiser, sched, seed, noise_scale=1.0):
    """Sample views 1..V-1 independently from the line-conditioned model.

    Each view is conditioned on the epipolar lines of the input view's joints
    and draws from its own generator seeded with ``(seed, view)``.

    Returns
    -------
    list of Pose2DSequence
    """
    views = []
    for k in range(1, rig.n_views):
        lines = conditioning_lines(input_seq, rig, k)
        drawn = sample(denoiser, lines, sched, make_generator((seed, k)), noise_scale=noise_scale)
        views.append(Pose2DSequence(drawn.numpy(), seq_id='{}/view{}'.format(input_seq.seq_id, k), fps=input_seq.fps))
    return views


@dataclass
class Stage2Options(object):
    """Settings of `optimize_multiview`."""
    iterations: int = 500
    step_size: float = 1e-2
    w_sds: float = 1.0
    w_mv: float = 10.0
    n_range: tuple = None
    weighting: str = 'constant'
    step_decay: str = 'cosine'
    init: str = 'sample'
    seed: int = 0

    def __post_init__(self):
        if self.w_sds < 0 or self.w_mv < 0:
            raise InvalidArgumentError("loss weights must be non-negative")
        if self.iterations < 0 or not self.step_size > 0:
            raise InvalidArgumentError("iterations must be non-negative and step_size positive")
        if self.weighting not in WEIGHTINGS:
            raise InvalidArgumentError("unknown SDS weighting {!r}".format(self.weighting))
        if self.step_decay not in STEP_DECAYS:
            raise InvalidArgumentError("unknown step decay {!r}".format(self.step_decay))
        if self.init not in ('sample', 'copy'):
            raise InvalidArgumentError("unknown initialization {!r}".format(self.init))


@dataclass
class MVOptState(object):
    """Input view, rig, options and (optionally) the starting estimate of views 1..V-1."""
    input_seq: Pose2DSequence
    rig: object
    options: Stage2Options = field(default_factory=Stage2Options)
    phi: list = None

    def __post_init__(self):
        layout = self.rig.layout or {}
        step = layout.get('angle_step_deg', STAGE2_ANGLE_STEP)
        if self.rig.n_views != STAGE2_VIEWS or 'subset' in layout or abs(step - STAGE2_ANGLE_STEP) > 1e-9:
            raise InvalidArgumentError("multi-view optimization needs the {}-view {:g} degree circular rig"
                                       .format(STAGE2_VIEWS, STAGE2_ANGLE_STEP))
        if self.phi is not None and len(self.phi) != self.rig.n_views - 1:
            raise InvalidArgumentError("expected {} initial views, got {}".format(self.rig.n_views - 1, len(self.phi)))


@dataclass
class MVOptResult(object):
    sequences: list
    trace: pd.DataFrame
    initial_loss: float
    final_loss: float


def _step_size(options, iteration):
    if options.step_decay == 'constant' or options.iterations <= 1:
        return options.step_size
    return options.step_size * 0.5 * (1.0 + math.cos(math.pi * iteration / options.iterations))


def initialize_views(state, denoiser, sched):
    """Starting estimate of views 1..V-1: Stage-1 samples, or copies of the input view."""
    if state.phi is not None:
        return [np.asarray(s, dtype=float) for s in state.phi]
    if state.options.init == 'copy' or denoiser is None:
        return [np.array(state.input_seq.frames) for _ in range(state.rig.n_views - 1)]
    return [s.frames for s in sample_unobserved_views(state.input_seq, state.rig, denoiser, sched, state.options.seed)]


def optimize_multiview(state, denoiser, sched):
    """Refine views 1..V-1 by SDS plus the multi-view consistency gradient.

    ``phi <- phi - step * (w_sds * g_sds + w_mv * grad consistency)``; the
    SDS lines are fixed from the input view's joints.

    Returns
    -------
    MVOptResult
        The optimized sequences, a per-iteration trace (consistency loss, step
        size and SDS gradient norm per view) and the initial and final loss.

    Raises
    ------
    OptimizationDivergedError
        When the loss exceeds 1e6 or stops being finite; carries the trace so far.
    """
    options = state.options
    rig = state.rig
    use_sds = options.w_sds > 0
    if use_sds and denoiser is None:
        raise InvalidArgumentError("SDS needs a denoiser; set w_sds = 0 to optimize consistency only")
    n_range = options.n_range or (default_n_range(sched) if sched is not None else None)
    anchor = as_tensor(state.input_seq.frames)
    phi = torch.stack([as_tensor(s) for s in initialize_views(state, denoiser, sched)])
    if phi.shape[1:] != anchor.shape:
        raise InvalidArgumentError("initial views have shape {}, input view {}".format(tuple(phi.shape[1:]), tuple(anchor.shape)))
    views = list(range(1, rig.n_views))
    lines = {k: conditioning_lines(state.input_seq, rig, k) for k in views} if use_sds else {}
    generators = {k: make_generator((options.seed, k)) for k in views}

    rows = []

    def trace():
        return pd.DataFrame(rows)

    for iteration in range(options.iterations):
        phi.requires_grad_(True)
        loss = multiview_consistency_loss(torch.cat([anchor.unsqueeze(0), phi]), rig)
        value = float(loss)
        row = {'step': iteration, 'consistency_loss': value, 'step_size': _step_size(options, iteration)}
        if not math.isfinite(value) or value > DIVERGENCE_LIMIT:
            rows.append(row)
            logger.error("multi-view optimization diverged: step=%d loss=%r", iteration, value)
            raise OptimizationDivergedError("consistency loss {!r} at iteration {}".format(value, iteration), trace=trace())
        grad_mv, = torch.autograd.grad(loss, phi)
        phi = phi.detach()
        update = options.w_mv * grad_mv
        for index, k in enumerate(views):
            if use_sds:
                g_sds = sds_gradient(phi[index], lines[k], denoiser, sched, generators[k], n_range, options.weighting)
                update[index] += options.w_sds * g_sds
                row['sds_norm_view{}'.format(k)] = float(torch.linalg.norm(g_sds))
            else:
                row['sds_norm_view{}'.format(k)] = 0.0
        rows.append(row)
        phi = phi - row['step_size'] * update
        if iteration % 100 == 0:
            logger.debug("stage2 step=%d loss=%.6g", iteration, value)

    phi = phi.detach()
    final = float(multiview_consistency_loss(torch.cat([anchor.unsqueeze(0), phi]), rig))
    initial = rows[0]['consistency_loss'] if rows else final
    sequences = [Pose2DSequence(phi[index].numpy(), seq_id='{}/view{}'.format(state.input_seq.seq_id, k), fps=state.input_seq.fps)
                 for index, k in enumerate(views)]
    return MVOptResult(sequences, trace(), initial, final)
