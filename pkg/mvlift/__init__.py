# -*- coding: utf-8 -*-
"""Main module of mvlift.

Lifts a single-view 2D pose sequence to global 3D motion in four stages:
a line-conditioned 2D diffusion model, multi-view optimization of the
unobserved views, 3D recovery into a strictly consistent multi-view dataset,
and a multi-view diffusion model trained on that dataset.

Docstring is compliant with NumPy/SciPy documentation standard:
https://github.com/numpy/numpy/blob/master/doc/HOWTO_DOCUMENT.rst.txt
"""
from .base import MVLiftError, MODES
from .config import PipelineConfig
from .metrics import MetricReport, evaluate
from .motion import Pose2DSequence, Pose3DSequence, load_dataset, save_dataset
from .pipeline import Pipeline
from .report import EvaluationReport

__version__ = '0.1.0'
