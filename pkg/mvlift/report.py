# -*- coding: utf-8 -*-
"""Generate HTML evaluation reports"""
import codecs
import logging

import pandas as pd

import mvlift.formatters as formatters
import mvlift.plot as plot
import mvlift.templates as templates
from mvlift.metrics import MetricReport

logger = logging.getLogger(__name__)


def to_html(report, predictions=None, references=None, overview=None, curves=None, recoveries=None):
    """Generate a HTML report from a metric report.

    Parameters
    ----------
    report : MetricReport
        Per-sequence metrics, as built by `mvlift.metrics.evaluate`.
    predictions, references : dict, optional
        ``seq_id -> Pose3DSequence``; a root-trajectory thumbnail is drawn for
        every predicted id, with the reference dashed when present.
    overview : dict, optional
        Run facts shown at the top (mode, seed, sequence count...).
    curves : dict, optional
        ``title -> DataFrame`` with a ``step`` column and the plotted columns.
    recoveries : dict, optional
        ``seq_id -> bool`` convergence flags of the 3D recovery.

    Returns
    -------
    str
        The report body (without the wrapper).
    """
    if not isinstance(report, MetricReport):
        raise TypeError("report must be of type MetricReport. Did you build it with mvlift.metrics.evaluate()?")
    predictions = predictions or {}
    references = references or {}
    columns = list(report.detail.columns)

    messages = []
    rows_html = u''
    for seq_id, row in report.detail.iterrows():
        values = {'seq_id': seq_id}
        row_classes = {}
        for column in columns:
            values[column] = formatters.fmt(row[column], column)
            if column in formatters.row_formatters:
                row_classes[column] = formatters.row_formatters[column](row[column])
        if 'pa_mpjpe' in row and 'mpjpe' in row and row['pa_mpjpe'] > row['mpjpe'] + 1e-6:
            messages.append(templates.messages['pa_above'].format(seq_id=seq_id))
        if recoveries is not None and not recoveries.get(seq_id, True):
            messages.append(templates.messages['non_converged'].format(seq_id=seq_id))
        if seq_id in predictions:
            values['thumbnail'] = plot.root_thumbnail(predictions[seq_id], references.get(seq_id))
        rows_html += templates.template('sequence_row').render(values=values, row_classes=row_classes, columns=columns)

    summary = {column: formatters.fmt(report.summary[column], column) for column in columns}
    metrics_html = templates.template('metric_table').render(columns=columns, summary=summary, rows=rows_html)

    overview = dict(overview or {})
    overview.setdefault('sequences', len(report.detail))
    overview_html = templates.template('overview').render(
        values={k: formatters.fmt(v, k) for k, v in overview.items()},
        messages=u''.join(templates.message_row.format(message=m) for m in messages))

    curves_html = u''
    if curves:
        images = {}
        for title, frame in curves.items():
            if isinstance(frame, pd.DataFrame) and len(frame):
                plotted = [c for c in frame.columns if c != 'step' and pd.api.types.is_numeric_dtype(frame[c])]
                images[title] = plot.loss_curve(frame, columns=plotted[:3])
        if images:
            curves_html = templates.template('curves').render(curves=images)

    return overview_html + metrics_html + curves_html


class EvaluationReport(object):
    """HTML page around a `MetricReport`.

    Attributes
    ----------
    report : MetricReport
    title : str
    html : str
        The rendered body.
    """

    def __init__(self, report, title='mvlift evaluation', **kwargs):
        self.report = report
        self.title = title
        self.html = to_html(report, **kwargs)

    def to_html(self):
        """Return the complete HTML page as a string."""
        return templates.template('wrapper').render(content=self.html, title=self.title)

    def to_file(self, outputfile):
        """Write the complete HTML page to `outputfile`."""
        with codecs.open(outputfile, 'w+b', encoding='utf8') as handle:
            handle.write(self.to_html())
        logger.debug("wrote HTML report %s", outputfile)
        return outputfile
