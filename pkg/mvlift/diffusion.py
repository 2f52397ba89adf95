# -*- coding: utf-8 -*-
"""DDPM schedule, forward noising, training losses, the ancestral sampler and checkpoints.

Every function works on float64 torch tensors (numpy input is converted) so
that the same code serves training, sampling and score distillation.
A denoiser is any callable ``denoiser(x_n, n, condition) -> x0_hat``.
"""
import collections
import logging
import pickle
from dataclasses import dataclass, asdict

import numpy as np
import torch

from mvlift.base import DTYPE, InvalidArgumentError, CheckpointError, as_tensor
from mvlift.denoiser import build_denoiser, config_from_dict

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 'mvlift-checkpoint'
CHECKPOINT_VERSION = 1

DESK_PROFILE = {'N': 100, 'beta_start': 1e-3, 'beta_end': 0.2}
"""dict: Short schedule used by the desk-scale pipeline; alpha_bar_N is about e^-10"""

LossTerms = collections.namedtuple('LossTerms', ['total', 'recon', 'line'])


@dataclass(frozen=True, eq=False)
class NoiseSchedule(object):
    """Linear-beta DDPM schedule.

    Tables are indexed by step n = 0..N; ``beta[0]`` is 0 and ``alpha_bar[0]`` is 1.
    """
    N: int
    beta_start: float
    beta_end: float
    beta: torch.Tensor
    alpha_bar: torch.Tensor
    sigma: torch.Tensor

    def check_step(self, n):
        steps = torch.as_tensor(n)
        if steps.numel() == 0 or int(steps.min()) < 0 or int(steps.max()) > self.N:
            raise InvalidArgumentError("diffusion step {} outside 0..{}".format(n, self.N))

    def to_dict(self):
        return {'N': self.N, 'beta_start': self.beta_start, 'beta_end': self.beta_end}


def make_schedule(N=1000, beta_start=1e-4, beta_end=0.02):
    """Build a linear-beta schedule with ``sigma_n = sqrt(beta_n)``.

    Parameters
    ----------
    N : int
        Number of diffusion steps (at least 1).
    beta_start, beta_end : float
        ``0 < beta_start <= beta_end < 1``.

    Returns
    -------
    NoiseSchedule
    """
    if int(N) != N or N < 1:
        raise InvalidArgumentError("a schedule needs at least one step, got {}".format(N))
    if not 0 < beta_start <= beta_end < 1:
        raise InvalidArgumentError("invalid beta range [{}, {}]".format(beta_start, beta_end))
    N = int(N)
    betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, N)])
    alpha_bar = np.cumprod(1.0 - betas)
    return NoiseSchedule(N=N, beta_start=float(beta_start), beta_end=float(beta_end),
                         beta=as_tensor(betas), alpha_bar=as_tensor(alpha_bar), sigma=as_tensor(np.sqrt(betas)))


def _per_sample(table, n, like):
    """Gather ``table[n]`` shaped to broadcast against `like` (batch first when n is a vector)."""
    n = torch.as_tensor(n)
    values = table[n.long()]
    if values.dim() == 0:
        return values
    return values.reshape((-1,) + (1,) * (like.dim() - 1))


def q_sample(x0, n, eps, sched):
    """Forward noising ``x_n = sqrt(alpha_bar_n) x0 + sqrt(1 - alpha_bar_n) eps``.

    `n` is an int or, for a batch, a tensor with one step per leading entry.
    """
    sched.check_step(n)
    x0 = as_tensor(x0)
    eps = as_tensor(eps)
    alpha_bar = _per_sample(sched.alpha_bar, n, x0)
    return torch.sqrt(alpha_bar) * x0 + torch.sqrt(1.0 - alpha_bar) * eps


def x0_to_eps(x0_hat, x_n, n, sched):
    """Noise implied by a clean prediction: ``(x_n - sqrt(alpha_bar) x0_hat) / sqrt(1 - alpha_bar)``."""
    sched.check_step(n)
    if int(torch.as_tensor(n).min()) == 0:
        raise InvalidArgumentError("x0_to_eps is undefined at step 0")
    x0_hat = as_tensor(x0_hat)
    x_n = as_tensor(x_n)
    alpha_bar = _per_sample(sched.alpha_bar, n, x_n)
    return (x_n - torch.sqrt(alpha_bar) * x0_hat) / torch.sqrt(1.0 - alpha_bar)


def posterior_mean(x0_hat, x_n, n, sched):
    """Mean of q(x_{n-1} | x_n, x0) with x0 replaced by the prediction."""
    beta = sched.beta[n]
    alpha_bar = sched.alpha_bar[n]
    alpha_bar_prev = sched.alpha_bar[n - 1]
    coef_x0 = torch.sqrt(alpha_bar_prev) * beta / (1.0 - alpha_bar)
    coef_xn = torch.sqrt(1.0 - beta) * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    return coef_x0 * x0_hat + coef_xn * x_n


def line_matching_loss(pred, L):
    """Sum over frames and joints of |a x + b y + c|.

    Parameters
    ----------
    pred : tensor (..., T, J, 2)
    L : tensor (..., T, J, 3)
        Normalized lines.

    Returns
    -------
    tensor
        Shape ``(...)``: a scalar for a single sequence, one value per batch entry otherwise.
    """
    pred = as_tensor(pred)
    L = as_tensor(L)
    if pred.shape[-1] != 2 or L.shape[-1] != 3 or pred.shape[:-1] != L.shape[:-1]:
        raise InvalidArgumentError("line loss needs (..., 2) points and (..., 3) lines of matching shape, got {} and {}"
                                   .format(tuple(pred.shape), tuple(L.shape)))
    distances = torch.abs(L[..., 0] * pred[..., 0] + L[..., 1] * pred[..., 1] + L[..., 2])
    return distances.sum(dim=(-2, -1))


@dataclass
class TrainingConfig(object):
    """Optimization settings of one denoiser."""
    lambda_line: float = 0.1
    batch_size: int = 32
    steps: int = 2000
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    log_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.lambda_line < 0:
            raise InvalidArgumentError("lambda_line must be non-negative")
        if self.batch_size < 1 or self.steps < 0:
            raise InvalidArgumentError("batch_size must be positive and steps non-negative")


def training_loss(x0, n, L, denoiser, eps, sched, cfg):
    """Reconstruction plus weighted line-matching loss for one (batched) draw.

    ``recon`` is the mean absolute error of the clean prediction, ``line`` the
    line-matching loss averaged over the batch.

    Returns
    -------
    LossTerms
        ``(total, recon, line)`` scalar tensors.
    """
    x0 = as_tensor(x0)
    x_n = q_sample(x0, n, eps, sched)
    x0_hat = denoiser(x_n, n, L)
    recon = torch.mean(torch.abs(x0_hat - x0))
    line = line_matching_loss(x0_hat, L).mean()
    return LossTerms(recon + cfg.lambda_line * line, recon, line)


def sample(denoiser, L, sched, generator, noise_scale=1.0, shape=None):
    """Ancestral DDPM sampling from pure noise.

    Parameters
    ----------
    denoiser : callable
        ``denoiser(x_n, n, L) -> x0_hat``.
    L : tensor
        Condition passed through to the denoiser (a line set for the Stage-1 model).
    sched : NoiseSchedule
    generator : torch.Generator
        Seeded noise source.
    noise_scale : float
        Multiplies sigma_n; 0 gives the deterministic posterior-mean chain.
    shape : tuple, optional
        Sample shape; defaults to ``L.shape[:-1] + (2,)``.

    Returns
    -------
    tensor
        The final x_0.
    """
    L = as_tensor(L)
    shape = tuple(shape) if shape is not None else tuple(L.shape[:-1]) + (2,)
    x = torch.randn(shape, generator=generator, dtype=DTYPE)
    with torch.no_grad():
        for n in range(sched.N, 0, -1):
            x0_hat = denoiser(x, n, L)
            x = posterior_mean(x0_hat, x, n, sched)
            if n > 1 and noise_scale:
                x = x + noise_scale * sched.sigma[n] * torch.randn(shape, generator=generator, dtype=DTYPE)
    return x


Checkpoint = collections.namedtuple('Checkpoint', ['model', 'schedule', 'step', 'optimizer_state', 'extra'])


def save_checkpoint(path, model, schedule, step=0, optimizer=None, extra=None):
    """Write model parameters, schedule and configuration with `torch.save`."""
    payload = {'format': CHECKPOINT_FORMAT,
               'version': CHECKPOINT_VERSION,
               'schedule': schedule.to_dict(),
               'denoiser': {'kind': model.kind, 'config': asdict(model.config)},
               'params': {name: value.detach().clone() for name, value in model.state_dict().items()},
               'optimizer': optimizer.state_dict() if optimizer is not None else None,
               'step': int(step),
               'extra': extra or {}}
    torch.save(payload, path)
    logger.debug("wrote checkpoint %s (step=%d)", path, step)


def load_checkpoint(path, expected_config=None):
    """Rebuild a denoiser and its schedule from a checkpoint file.

    Parameters
    ----------
    path : str
    expected_config : DenoiserConfig, optional
        When given, the model is built from it and every stored parameter must
        match its shape.

    Raises
    ------
    CheckpointError
        On a foreign file, a version mismatch, or a missing, unexpected or
        wrongly shaped parameter (named in the message).
    """
    try:
        payload = torch.load(path, map_location='cpu', weights_only=True)
    except (RuntimeError, ValueError, EOFError, pickle.UnpicklingError) as error:
        raise CheckpointError("{} is not a readable checkpoint: {}".format(path, error))
    if not isinstance(payload, dict) or payload.get('format') != CHECKPOINT_FORMAT:
        raise CheckpointError("{} is not an mvlift checkpoint".format(path))
    if payload.get('version') != CHECKPOINT_VERSION:
        raise CheckpointError("{} has checkpoint version {}, expected {}".format(path, payload.get('version'), CHECKPOINT_VERSION))
    kind = payload['denoiser']['kind']
    config = expected_config or config_from_dict(payload['denoiser']['config'])
    model = build_denoiser(kind, config)
    expected = model.state_dict()
    stored = payload['params']
    for name, value in expected.items():
        if name not in stored:
            raise CheckpointError("checkpoint is missing parameter {!r}".format(name))
        if tuple(stored[name].shape) != tuple(value.shape):
            raise CheckpointError("parameter {!r} has shape {}, expected {}".format(name, tuple(stored[name].shape), tuple(value.shape)))
    unexpected = sorted(set(stored) - set(expected))
    if unexpected:
        raise CheckpointError("checkpoint has unexpected parameter {!r}".format(unexpected[0]))
    model.load_state_dict(stored)
    schedule = make_schedule(**payload['schedule'])
    return Checkpoint(model, schedule, int(payload.get('step', 0)), payload.get('optimizer'), payload.get('extra', {}))
