# -*- coding: utf-8 -*-
"""Common parts to all other modules: constants, errors and seeded random sources.
"""
import multiprocessing
from functools import partial

import numpy as np
import torch

DTYPE = torch.float64
"""torch.dtype: Precision used by every network and differentiable loss"""

ROOT_INDEX = 0
"""int: Default root joint index"""

GUARD_RADIUS = 0.05
"""float: Minimum distance between a virtual epipole and any joint (normalized units)"""

LINE_EPS = 1e-12
"""float: Below this norm of (a, b) a line is considered degenerate"""

MILLI = 1000.0
"""float: Factor applied to metric values in reports ("milli-units")"""

SERIAL_DIGITS = 9
"""int: Significant digits written for floats in dataset files"""

MODE_STAGE1 = 'stage1'
"""String: Lift from views sampled by the line-conditioned model"""

MODE_STAGE2 = 'stage2'
"""String: Lift from views refined by multi-view optimization"""

MODE_FULL = 'full'
"""String: Lift from views generated by the multi-view model"""

MODE_BASELINE = 'constant-depth'
"""String: Back-project the input view at a constant depth (no learned model)"""

MODES = (MODE_STAGE1, MODE_STAGE2, MODE_FULL, MODE_BASELINE)


class MVLiftError(Exception):
    """Base class of every error raised on purpose by mvlift."""


class InvalidArgumentError(MVLiftError, ValueError):
    """An argument is outside the documented domain."""


class DegenerateGeometryError(MVLiftError):
    """The geometry does not define a unique answer (zero line, parallel rays...)."""


class BehindCameraError(MVLiftError):
    """A point has non-positive depth in a camera.

    Attributes
    ----------
    view : int or None
    frame : int or None
    joint : int or None
    """

    def __init__(self, message, view=None, frame=None, joint=None):
        super(BehindCameraError, self).__init__(message)
        self.view = view
        self.frame = frame
        self.joint = joint


class InsufficientViewsError(MVLiftError):
    """Fewer than two views observe a point."""


class ParseError(MVLiftError):
    """A dataset record is not valid JSON."""

    def __init__(self, message, line=None):
        super(ParseError, self).__init__(message)
        self.line = line


class SchemaError(MVLiftError):
    """A dataset record is valid JSON but its content is inconsistent."""

    def __init__(self, message, line=None):
        super(SchemaError, self).__init__(message)
        self.line = line


class OptimizationDivergedError(MVLiftError):
    """The multi-view optimization blew up; `trace` holds the iterations run so far."""

    def __init__(self, message, trace=None):
        super(OptimizationDivergedError, self).__init__(message)
        self.trace = trace


class EmptyDatasetError(MVLiftError):
    """Every candidate sequence was rejected."""


class CheckpointError(MVLiftError):
    """A checkpoint does not match the configuration it is loaded into."""


class TrainingError(MVLiftError):
    """Training produced a non-finite loss; `diagnostics` describes the step."""

    def __init__(self, message, diagnostics=None):
        super(TrainingError, self).__init__(message)
        self.diagnostics = diagnostics or {}


class MissingArtifactError(MVLiftError):
    """A stage needs an artifact that an earlier stage has not produced."""

    def __init__(self, path, hint=''):
        message = "missing artifact: {}".format(path)
        if hint:
            message += " ({})".format(hint)
        super(MissingArtifactError, self).__init__(message)
        self.path = path


def make_rng(seed):
    """Return a numpy random Generator for `seed` (an int or a sequence of ints).

    Parameters
    ----------
    seed : int or tuple of int
        Sequences are used to derive independent streams, e.g. ``(seed, view)``.

    Returns
    -------
    numpy.random.Generator
    """
    if seed is None:
        raise InvalidArgumentError("unseeded random sources are not allowed")
    return np.random.default_rng(seed)


def make_generator(seed):
    """Return a CPU torch Generator seeded from `seed` (int or sequence of ints)."""
    if seed is None:
        raise InvalidArgumentError("unseeded random sources are not allowed")
    if not isinstance(seed, (int, np.integer)):
        # fold a stream key into one 63-bit seed
        seed = int(np.random.SeedSequence(list(seed)).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
    generator = torch.Generator(device='cpu')
    generator.manual_seed(int(seed))
    return generator


def as_tensor(value):
    """Convert arrays, sequences and tensors to a float64 CPU tensor."""
    if isinstance(value, torch.Tensor):
        return value.to(dtype=DTYPE)
    return torch.as_tensor(np.asarray(value, dtype=np.float64), dtype=DTYPE)


def parallel_map(func, items, pool_size=1, **kwargs):
    """Order-preserving map, in a process pool when `pool_size` > 1.

    Parameters
    ----------
    func : callable
        Module-level function (it is pickled for the workers).
    items : iterable
    pool_size : int
        Number of worker processes; 1 runs in the calling process.
    kwargs
        Extra keyword arguments bound to every call.

    Returns
    -------
    list
    """
    local_func = partial(func, **kwargs)
    if pool_size <= 1:
        return list(map(local_func, items))
    pool = multiprocessing.Pool(pool_size)
    try:
        return pool.map(local_func, list(items))
    finally:
        pool.close()
        pool.join()
