# coding=UTF-8

import os
import shutil
import tempfile
import unittest
import xml.etree.ElementTree as ET

import numpy as np
import pandas as pd

import mvlift.formatters as formatters
from mvlift.base import make_rng
from mvlift.metrics import MetricReport, evaluate
from mvlift.motion import SyntheticMotionSpec, generate_synthetic_motion
from mvlift.plot import root_components_svg, root_thumbnail, loss_curve
from mvlift.report import to_html, EvaluationReport


def motion(seed, duration=6):
    return generate_synthetic_motion(SyntheticMotionSpec(duration=duration), make_rng(seed), seq_id='m{}'.format(seed))


class FormattersTest(unittest.TestCase):

    def test_milli(self):
        self.assertEqual(formatters.fmt_milli(12.345), u'12.35')

    def test_gradient_ends(self):
        self.assertIn('rgb(99, 200, 72)', formatters.fmt(0.0, 'mpjpe'))
        self.assertIn('rgb(209, 60, 75)', formatters.fmt(1000.0, 'mpjpe'))

    def test_default_and_missing(self):
        self.assertEqual(formatters.fmt(0.5, 'other'), '0.5')
        self.assertEqual(formatters.fmt(float('nan'), 'mpjpe'), '')
        self.assertEqual(formatters.fmt('stage1', 'mode'), 'stage1')

    def test_severity(self):
        self.assertEqual(formatters.fmt_row_severity(0.0), 'ignore')
        self.assertEqual(formatters.fmt_row_severity(3.0), 'alert')


class PlotTest(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_svg_valid(self):
        seq = motion(0, duration=2)
        path = root_components_svg(seq, os.path.join(self.tmp, 'root.svg'), reference=motion(1, duration=2))
        self.assertGreater(os.path.getsize(path), 0)
        self.assertTrue(ET.parse(path).getroot().tag.endswith('svg'))

    def test_svg_reproducible(self):
        seq = motion(2)
        first = root_components_svg(seq, os.path.join(self.tmp, 'a.svg'))
        second = root_components_svg(seq, os.path.join(self.tmp, 'b.svg'))
        with open(first, 'rb') as a, open(second, 'rb') as b:
            self.assertEqual(a.read(), b.read())

    def test_encoded_images(self):
        self.assertTrue(root_thumbnail(motion(3)).startswith('data:image/png;base64,'))
        log = pd.DataFrame({'step': np.arange(30), 'total': np.linspace(2.0, 1.0, 30)})
        self.assertTrue(loss_curve(log, window=5).startswith('data:image/png;base64,'))


class ReportTest(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp()
        self.truth = [motion(seed) for seed in range(3)]
        self.predictions = [seq.replace(frames=seq.frames + 0.01 * (seed + 1)) for seed, seq in enumerate(self.truth)]
        self.report = evaluate(self.predictions, self.truth)

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_wrong_type(self):
        with self.assertRaises(TypeError):
            to_html(self.report.detail)

    def test_rows_and_thumbnails(self):
        html = to_html(self.report, predictions={s.seq_id: s for s in self.predictions},
                       references={s.seq_id: s for s in self.truth}, overview={'mode': 'full'})
        for seq in self.truth:
            self.assertIn('seq_{}'.format(seq.seq_id), html)
        self.assertEqual(html.count('class="thumbnail"'), 3)
        self.assertIn('PA-MPJPE', html)
        self.assertIn('<td>full</td>', html)

    def test_messages(self):
        detail = pd.DataFrame({'mpjpe': [10.0, 5.0], 'pa_mpjpe': [5.0, 6.0]},
                              index=pd.Index(['a', 'b'], name='seq_id'))
        html = to_html(MetricReport(detail), recoveries={'a': False, 'b': True})
        self.assertIn('<code>b</code> has PA-MPJPE above MPJPE', html)
        self.assertNotIn('<code>a</code> has PA-MPJPE', html)
        self.assertIn('3D recovery of <code>a</code> did not converge', html)

    def test_curves(self):
        log = pd.DataFrame({'step': np.arange(10), 'total': np.linspace(1.0, 0.5, 10), 'recon': np.ones(10)})
        html = to_html(self.report, curves={'Stage-1 training': log, 'empty': log.iloc[:0]})
        self.assertIn('Stage-1 training', html)
        self.assertNotIn('<h3>empty</h3>', html)

    def test_to_file(self):
        page = EvaluationReport(self.report, title='run')
        path = page.to_file(os.path.join(self.tmp, 'report.html'))
        with open(path, encoding='utf-8') as handle:
            text = handle.read()
        self.assertTrue(text.startswith('<!doctype html>'))
        self.assertIn('<title>run</title>', text)


if __name__ == '__main__':
    unittest.main()
