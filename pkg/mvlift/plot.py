# -*- coding: utf-8 -*-
"""Plot root trajectories and loss curves"""

import base64
from io import BytesIO
from urllib.parse import quote

import matplotlib
import numpy as np
from matplotlib import pyplot as plt

COMPONENTS = ('x', 'y', 'z')
PRED_COLOR = '#337ab7'
GT_COLOR = '#d13c4b'

# fixed ids and no date so that identical inputs give identical files
matplotlib.rcParams['svg.hashsalt'] = 'mvlift'
SVG_METADATA = {'Date': None}


def _encode(figure, **kwargs):
    imgdata = BytesIO()
    figure.savefig(imgdata, **kwargs)
    imgdata.seek(0)
    result_string = 'data:image/png;base64,' + quote(base64.b64encode(imgdata.getvalue()))
    plt.close(figure)
    return result_string


def _plot_root_components(seq, reference=None, figsize=(6, 6)):
    """Plot the x, y and z components of the root trajectory against the frame index.

    Parameters
    ----------
    seq : Pose3DSequence
        The sequence to plot.
    reference : Pose3DSequence, optional
        Drawn dashed on the same axes, e.g. the ground truth.

    Returns
    -------
    matplotlib.figure.Figure
    """
    fig, axes = plt.subplots(3, 1, sharex=True, figsize=figsize)
    root = np.asarray(seq.root_trajectory)
    gt = np.asarray(reference.root_trajectory) if reference is not None else None
    for c, plot in enumerate(axes):
        plot.plot(np.arange(len(root)), root[:, c], color=PRED_COLOR, label='prediction')
        if gt is not None:
            plot.plot(np.arange(len(gt)), gt[:, c], color=GT_COLOR, linestyle='--', label='reference')
        plot.set_ylabel(COMPONENTS[c])
    axes[-1].set_xlabel('frame')
    if reference is not None:
        axes[0].legend(loc='upper right', fontsize=8)
    if seq.seq_id:
        axes[0].set_title(seq.seq_id)
    return fig


def root_components_svg(seq, path, reference=None):
    """Write the root trajectory component plot of `seq` as an SVG file."""
    fig = _plot_root_components(seq, reference)
    fig.savefig(path, format='svg', metadata=SVG_METADATA)
    plt.close(fig)
    return path


def root_thumbnail(seq, reference=None, figsize=(3, 3)):
    """Top-down (x, y) view of the root trajectory.

    Returns
    -------
    str
        The resulting image encoded as a string.
    """
    fig, plot = plt.subplots(1, 1, figsize=figsize)
    root = np.asarray(seq.root_trajectory)
    plot.plot(root[:, 0], root[:, 1], color=PRED_COLOR)
    if reference is not None:
        gt = np.asarray(reference.root_trajectory)
        plot.plot(gt[:, 0], gt[:, 1], color=GT_COLOR, linestyle='--')
    plot.set_aspect('equal', adjustable='datalim')
    plot.set_facecolor('w')
    for tick in plot.xaxis.get_major_ticks() + plot.yaxis.get_major_ticks():
        tick.label1.set_fontsize(7)
    fig.subplots_adjust(left=0.2, right=0.95, top=0.95, bottom=0.15)
    return _encode(fig)


def loss_curve(log, columns=('total',), window=20, figsize=(6, 3)):
    """Plot rolling means of training-log or optimization-trace columns.

    Parameters
    ----------
    log : DataFrame
        Needs a ``step`` column.

    Returns
    -------
    str
        The resulting image encoded as a string.
    """
    fig, plot = plt.subplots(1, 1, figsize=figsize)
    for column in columns:
        plot.plot(log['step'], log[column].rolling(window, min_periods=1).mean(), label=column)
    plot.set_xlabel('step')
    plot.set_yscale('log')
    plot.legend(fontsize=8)
    fig.subplots_adjust(left=0.15, right=0.95, top=0.9, bottom=0.2)
    return _encode(fig)
