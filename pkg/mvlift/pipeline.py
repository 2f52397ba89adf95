# -*- coding: utf-8 -*-
"""Stage orchestration over an output directory.

Every subcommand of the command line is a method of `Pipeline`. Stages talk
to each other only through files below ``config.paths.output_root``::

    data/          train3d.jsonl train2d.jsonl test3d.jsonl test2d.jsonl rig6.txt
    checkpoints/   lcdm.pt mvdm.pt
    logs/          lcdm.csv mvdm.csv
    stage2/        optimized.jsonl traces.csv
    mvdata/        recovered3d.jsonl recovery.csv mv.jsonl rig4.txt
    predictions/   <mode>.jsonl <mode>_recovery.csv
    reports/       <mode>_summary.csv <mode>_detail.csv <mode>.html
    renders/       <mode>_<id>.svg <mode>_<id>_overlay.csv
    run_manifest.json timings.csv

A stage that needs an artifact an earlier stage has not produced fails with
`MissingArtifactError` before doing any work.
"""
import contextlib
import dataclasses
import hashlib
import json
import logging
import os
import tempfile
import time

import numpy as np
import pandas as pd
import torch

from mvlift.base import (MODE_STAGE1, MODE_STAGE2, MODE_FULL, MODE_BASELINE, MODES, InvalidArgumentError,
                         MissingArtifactError, OptimizationDivergedError, BehindCameraError, make_rng,
                         make_generator, as_tensor, parallel_map)
from mvlift.denoiser import KIND_LCDM, KIND_MVDM, build_denoiser, init_params
from mvlift.diffusion import make_schedule, load_checkpoint, sample
from mvlift.geometry import cached_rig, save_rig, project_points
from mvlift.lift3d import (recover_3d, enforce_bone_lengths, build_mv_dataset, save_mv_dataset, load_mv_dataset,
                           constant_depth_lift, epipolar_residual, CONSISTENCY_TOLERANCE)
from mvlift.metrics import MetricReport, evaluate
from mvlift.motion import (Pose2DSequence, default_skeleton, estimate_skeleton, generate_synthetic_motion,
                           project_sequence, sequence_to_record, write_records, load_dataset, save_dataset)
from mvlift.mv_optimize import MVOptState, optimize_multiview, sample_unobserved_views
from mvlift.plot import root_components_svg
from mvlift.report import EvaluationReport
from mvlift.training import train_lcdm, train_mvdm

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'run_manifest.json'
TIMINGS_NAME = 'timings.csv'
MANIFEST_FORMAT = 'mvlift-run'

# random stream keys, combined with the run seed and a sequence index
STREAM_TRAIN = 0
STREAM_TEST = 1
STREAM_VIEW_CHOICE = 2
STREAM_STAGE2 = 3
STREAM_LIFT = {MODE_STAGE1: 4, MODE_STAGE2: 5, MODE_FULL: 6}

LAYOUT = {
    'train3d': ('data', 'train3d.jsonl'),
    'train2d': ('data', 'train2d.jsonl'),
    'test3d': ('data', 'test3d.jsonl'),
    'test2d': ('data', 'test2d.jsonl'),
    'rig6': ('data', 'rig6.txt'),
    'lcdm': ('checkpoints', 'lcdm.pt'),
    'mvdm': ('checkpoints', 'mvdm.pt'),
    'lcdm_log': ('logs', 'lcdm.csv'),
    'mvdm_log': ('logs', 'mvdm.csv'),
    'optimized': ('stage2', 'optimized.jsonl'),
    'traces': ('stage2', 'traces.csv'),
    'recovered3d': ('mvdata', 'recovered3d.jsonl'),
    'recovery': ('mvdata', 'recovery.csv'),
    'mvdata': ('mvdata', 'mv.jsonl'),
}

HINTS = {
    'train3d': 'run gen-synth first',
    'train2d': 'run gen-synth first',
    'test3d': 'run gen-synth first',
    'test2d': 'run gen-synth first',
    'lcdm': 'run train-lcdm first',
    'mvdm': 'run train-mvdm first',
    'optimized': 'run optimize-mv first',
    'mvdata': 'run build-mvdataset first',
}


def stream_seed(seed, *keys):
    """Integer seed of the independent random stream ``(seed, *keys)``."""
    return int(make_rng((seed,) + tuple(keys)).integers(2 ** 31 - 1))


def file_digest(path):
    digest = hashlib.sha256()
    with open(path, 'rb') as handle:
        for block in iter(lambda: handle.read(1 << 16), b''):
            digest.update(block)
    return digest.hexdigest()


def _recover(item, rig, opts, parents):
    seq_id, views = item
    return recover_3d(views, rig, opts, parents=parents, seq_id=seq_id)


def _recovery_table(recoveries):
    rows = [{'seq_id': r.sequence.seq_id, 'converged': bool(r.converged), 'iterations': int(r.iterations),
             'cost': float(r.cost_history[-1]), 'residual': float(np.mean(r.joint_residuals))} for r in recoveries]
    return pd.DataFrame(rows, columns=['seq_id', 'converged', 'iterations', 'cost', 'residual'])


class Pipeline(object):
    """The stages of a run sharing one configuration and one output directory.

    Attributes
    ----------
    config : PipelineConfig
    root : str
        Output directory, created on construction.
    """

    def __init__(self, config):
        self.config = config.validate()
        self.root = config.output_root
        os.makedirs(self.root, exist_ok=True)

    # --- paths ---------------------------------------------------------

    def path(self, *parts):
        if len(parts) == 1 and parts[0] in LAYOUT:
            parts = LAYOUT[parts[0]]
        full = os.path.join(self.root, *parts)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        return full

    def require(self, *parts, **kwargs):
        """Path of an artifact (a layout name or path parts) that must already exist."""
        path = self.path(*parts)
        if not os.path.exists(path):
            raise MissingArtifactError(path, kwargs.get('hint') or HINTS.get(parts[0], ''))
        return path

    def prediction_path(self, mode):
        return self.path('predictions', '{}.jsonl'.format(mode))

    # --- shared objects ------------------------------------------------

    @property
    def intrinsics(self):
        return self.config.rig.intrinsics

    @property
    def rig6(self):
        rig = self.config.rig
        return cached_rig(rig.n_views, rig.angle_step, rig.radius, rig.height, self.intrinsics)

    @property
    def rig4(self):
        rig = self.config.rig
        return cached_rig(rig.mv_views, rig.mv_angle_step, rig.radius, rig.height, self.intrinsics)

    @property
    def schedule(self):
        values = self.config.schedule
        return make_schedule(values.N, values.beta_start, values.beta_end)

    @property
    def seed(self):
        return self.config.run.seed

    @property
    def pool_size(self):
        return self.config.run.threads

    def _load_model(self, name, expected_config):
        checkpoint = load_checkpoint(self.require(name), expected_config=expected_config)
        checkpoint.model.eval()
        return checkpoint

    # --- bookkeeping ---------------------------------------------------

    @contextlib.contextmanager
    def stage(self, name):
        """Log start and finish of a stage, then record its timing and rewrite the manifest."""
        logger.info("stage %s started", name)
        started = time.perf_counter()
        yield
        elapsed = time.perf_counter() - started
        logger.info("stage %s finished in %.2f s", name, elapsed)
        self._append_timing(name, elapsed)
        self.write_manifest()

    def _append_timing(self, name, elapsed):
        path = os.path.join(self.root, TIMINGS_NAME)
        row = pd.DataFrame([{'stage': name, 'seconds': elapsed}])
        if os.path.exists(path):
            row = pd.concat([pd.read_csv(path), row], ignore_index=True)
        row.to_csv(path, index=False)

    def artifacts(self):
        """``relative path -> sha256`` of every file of the run except the manifest and the timings."""
        digests = {}
        for directory, _, names in os.walk(self.root):
            for name in names:
                full = os.path.join(directory, name)
                relative = os.path.relpath(full, self.root).replace(os.sep, '/')
                if relative in (MANIFEST_NAME, TIMINGS_NAME) or name.startswith('.'):
                    continue
                digests[relative] = file_digest(full)
        return dict(sorted(digests.items()))

    def metrics(self):
        """Summary of every metric report present, keyed by mode."""
        result = {}
        for mode in MODES:
            path = self.path('reports', '{}_summary.csv'.format(mode))
            if os.path.exists(path):
                summary = pd.read_csv(path, index_col='metric')['value']
                result[mode] = {metric: float(value) for metric, value in summary.items()}
        return result

    def manifest(self):
        return {'format': MANIFEST_FORMAT,
                'seed': self.seed,
                'config': self.config.to_text(include_runtime=False),
                'artifacts': self.artifacts(),
                'metrics': self.metrics(),
                'timings': TIMINGS_NAME}

    def write_manifest(self):
        """Write ``run_manifest.json`` through a temporary file and an atomic rename."""
        path = os.path.join(self.root, MANIFEST_NAME)
        text = json.dumps(self.manifest(), indent=2, sort_keys=True)
        handle, temporary = tempfile.mkstemp(prefix='.manifest', dir=self.root)
        try:
            with os.fdopen(handle, 'w', encoding='utf-8') as stream:
                stream.write(text + '\n')
            os.replace(temporary, path)
        except BaseException:
            if os.path.exists(temporary):
                os.remove(temporary)
            raise
        logger.debug("wrote run manifest %s", path)
        return path

    # --- stages --------------------------------------------------------

    def gen_synth(self):
        """Synthetic 3D ground truth plus its single-view 2D training and test sets.

        Training sequence i is projected into one view of the 6-view rig drawn
        uniformly; held-out sequences are projected into view 0, the input view.
        """
        synthetic = self.config.synthetic
        spec = synthetic.motion_spec()
        rig = self.rig6
        with self.stage('gen-synth'):
            train3d = [generate_synthetic_motion(spec, make_rng((self.seed, STREAM_TRAIN, i)), 'seq{:04d}'.format(i))
                       for i in range(synthetic.count)]
            test3d = [generate_synthetic_motion(spec, make_rng((self.seed, STREAM_TEST, i)), 'test{:04d}'.format(i))
                      for i in range(synthetic.held_out)]
            chosen = make_rng((self.seed, STREAM_VIEW_CHOICE)).integers(rig.n_views, size=synthetic.count)
            train2d = [project_sequence(seq, rig, int(view)) for seq, view in zip(train3d, chosen)]
            test2d = [project_sequence(seq, rig, 0) for seq in test3d]
            save_dataset(self.path('train3d'), train3d)
            write_records(self.path('train2d'), (sequence_to_record(seq, view=int(view))
                                                 for seq, view in zip(train2d, chosen)))
            save_dataset(self.path('test3d'), test3d)
            save_dataset(self.path('test2d'), test2d)
            save_rig(self.path('rig6'), rig)
            logger.info("generated %d training and %d held-out sequences", len(train3d), len(test3d))
        return train3d, train2d, test3d, test2d

    def _resume_path(self, name, resume):
        if not resume:
            return None
        return self.require(name, hint='nothing to resume from')

    def train_lcdm(self, resume=False):
        """Train the line-conditioned model on ``data/train2d.jsonl``."""
        dataset = load_dataset(self.require('train2d'))
        cfg = self.config.stage1_training
        resume_path = self._resume_path('lcdm', resume)
        with self.stage('train-lcdm'):
            model = init_params(build_denoiser(KIND_LCDM, self.config.stage1_denoiser), (cfg.seed, 1))
            result = train_lcdm(dataset, model, self.schedule, cfg, checkpoint_path=self.path('lcdm'),
                                log_path=self.path('lcdm_log'), resume=resume_path)
        return result

    def train_mvdm(self, resume=False):
        """Train the multi-view model on the strictly consistent dataset of ``mvdata/``."""
        dataset = load_mv_dataset(self.require('mvdata'))
        cfg = self.config.stage4_training
        resume_path = self._resume_path('mvdm', resume)
        with self.stage('train-mvdm'):
            model = init_params(build_denoiser(KIND_MVDM, self.config.stage4_denoiser), (cfg.seed, 4))
            result = train_mvdm(dataset, model, self.schedule, cfg, checkpoint_path=self.path('mvdm'),
                                log_path=self.path('mvdm_log'), resume=resume_path)
        return result

    def _stage2_options(self, stream, index):
        return dataclasses.replace(self.config.stage2, seed=stream_seed(self.config.stage2.seed, stream, index))

    def optimize_mv(self, sequence=None):
        """Stage 2 over every training input, or over the one input named `sequence`.

        The full run writes ``stage2/optimized.jsonl``; a single sequence is
        written to ``stage2/<id>.jsonl`` so it never replaces the full set.
        Each input keeps the random stream of its position in the training set.
        """
        inputs = load_dataset(self.require('train2d'))
        indexed = list(enumerate(inputs))
        if sequence is not None:
            indexed = [(i, seq) for i, seq in indexed if seq.seq_id == sequence]
            if not indexed:
                raise InvalidArgumentError("no training sequence with id {!r}".format(sequence))
        checkpoint = self._load_model('lcdm', self.config.stage1_denoiser)
        rig = self.rig6
        if sequence is None:
            output, trace_path = self.path('optimized'), self.path('traces')
        else:
            output = self.path('stage2', '{}.jsonl'.format(sequence))
            trace_path = self.path('stage2', '{}_trace.csv'.format(sequence))
        with self.stage('optimize-mv'):
            records, traces = [], []
            for index, seq in indexed:
                state = MVOptState(seq, rig, self._stage2_options(STREAM_STAGE2, index))
                try:
                    result = optimize_multiview(state, checkpoint.model, checkpoint.schedule)
                except OptimizationDivergedError as error:
                    error.trace.assign(seq_id=seq.seq_id).to_csv(
                        self.path('stage2', '{}_diverged.csv'.format(seq.seq_id)), index=False)
                    raise
                logger.info("optimized %s: consistency %.6g -> %.6g", seq.seq_id, result.initial_loss, result.final_loss)
                for k, view in enumerate([seq] + list(result.sequences)):
                    records.append(sequence_to_record(view, sequence=seq.seq_id, view=k))
                traces.append(result.trace.assign(seq_id=seq.seq_id))
            write_records(output, records)
            if traces:
                pd.concat(traces, ignore_index=True).to_csv(trace_path, index=False)
        return output

    def build_mvdataset(self):
        """Stage 3: recover 3D from every optimized sequence and reproject it into the 4-view rig."""
        optimized = load_mv_dataset(self.require('optimized'), rig_path=self.require('rig6'))
        skeleton = default_skeleton()
        with self.stage('build-mvdataset'):
            recoveries = parallel_map(_recover, [(e.seq_id, e.views) for e in optimized.entries], self.pool_size,
                                      rig=optimized.rig, opts=self.config.lift, parents=skeleton.parents)
            recovered = [enforce_bone_lengths(r.sequence, estimate_skeleton(r.sequence, skeleton.parents))
                         for r in recoveries]
            save_dataset(self.path('recovered3d'), recovered)
            _recovery_table(recoveries).to_csv(self.path('recovery'), index=False)
            dataset = build_mv_dataset(recovered, self.rig4, self.pool_size)
            residual = max(epipolar_residual(e.views, dataset.rig) for e in dataset.entries)
            logger.info("multi-view dataset: %d of %d sequences, epipolar residual %.3g (< %g)",
                        len(dataset), len(recovered), residual, CONSISTENCY_TOLERANCE)
            save_mv_dataset(self.path('mvdata'), dataset)
        return dataset

    def _generate_views(self, mode, index, seq, models):
        """Views 1..V-1 for `seq` and the rig they belong to."""
        if mode == MODE_STAGE1:
            checkpoint = models['lcdm']
            views = sample_unobserved_views(seq, self.rig6, checkpoint.model, checkpoint.schedule,
                                            stream_seed(self.seed, STREAM_LIFT[mode], index))
            return views, self.rig6
        if mode == MODE_STAGE2:
            checkpoint = models['lcdm']
            state = MVOptState(seq, self.rig6, self._stage2_options(STREAM_LIFT[mode], index))
            return optimize_multiview(state, checkpoint.model, checkpoint.schedule).sequences, self.rig6
        checkpoint = models['mvdm']
        model = checkpoint.model
        rig = self.rig4
        cond = as_tensor(seq.frames)

        def denoiser(x_n, n, L):
            return model(torch.cat([L.unsqueeze(0), x_n]), n, L)

        drawn = sample(denoiser, cond, checkpoint.schedule,
                       make_generator((self.seed, STREAM_LIFT[mode], index)),
                       shape=(rig.n_views - 1,) + tuple(cond.shape))
        views = [Pose2DSequence(drawn[k - 1].numpy(), seq_id='{}/view{}'.format(seq.seq_id, k), fps=seq.fps)
                 for k in range(1, rig.n_views)]
        return views, rig

    def lift(self, mode=MODE_FULL):
        """Lift every held-out 2D input (view 0) to 3D with the chosen pipeline variant.

        stage1 and stage2 need only the line-conditioned checkpoint, full only
        the multi-view one and the constant-depth baseline none.
        """
        if mode not in MODES:
            raise InvalidArgumentError("unknown mode {!r}, expected one of {}".format(mode, ', '.join(MODES)))
        inputs = load_dataset(self.require('test2d'))
        models = {}
        if mode in (MODE_STAGE1, MODE_STAGE2):
            models['lcdm'] = self._load_model('lcdm', self.config.stage1_denoiser)
        elif mode == MODE_FULL:
            models['mvdm'] = self._load_model('mvdm', self.config.stage4_denoiser)
        with self.stage('lift-{}'.format(mode)):
            if mode == MODE_BASELINE:
                predictions = [constant_depth_lift(seq, self.rig6, view=0) for seq in inputs]
            else:
                items, rig = [], self.rig6
                for index, seq in enumerate(inputs):
                    views, rig = self._generate_views(mode, index, seq, models)
                    items.append((seq.seq_id, [seq] + list(views)))
                recoveries = parallel_map(_recover, items, self.pool_size, rig=rig, opts=self.config.lift,
                                          parents=default_skeleton().parents)
                predictions = [r.sequence for r in recoveries]
                _recovery_table(recoveries).to_csv(self.path('predictions', '{}_recovery.csv'.format(mode)), index=False)
            save_dataset(self.prediction_path(mode), predictions)
        return predictions

    def _curves(self):
        curves = {}
        for name, title in (('lcdm_log', 'Stage-1 training'), ('mvdm_log', 'Stage-4 training')):
            path = self.path(name)
            if os.path.exists(path):
                curves[title] = pd.read_csv(path)[['step', 'total', 'recon', 'line']]
        traces = self.path('traces')
        if os.path.exists(traces):
            curves['Stage-2 consistency'] = (pd.read_csv(traces).groupby('step')['consistency_loss']
                                             .mean().reset_index())
        return curves

    def evaluate(self, mode=MODE_FULL):
        """Score ``predictions/<mode>.jsonl`` against the held-out ground truth and input view."""
        predictions = load_dataset(self._require_prediction(mode))
        ground_truth = load_dataset(self.require('test3d'))
        inputs = load_dataset(self.require('test2d'))
        with self.stage('eval-{}'.format(mode)):
            report = evaluate(predictions, ground_truth, inputs, self.rig6, view=0)
            report.to_csv(self.path('reports', '{}_summary.csv'.format(mode)),
                          self.path('reports', '{}_detail.csv'.format(mode)))
            recovery_path = self.path('predictions', '{}_recovery.csv'.format(mode))
            recoveries = None
            if os.path.exists(recovery_path):
                table = pd.read_csv(recovery_path, dtype={'seq_id': str})
                recoveries = dict(zip(table['seq_id'], table['converged'].astype(bool)))
            page = EvaluationReport(report, title='mvlift evaluation ({})'.format(mode),
                                    predictions={seq.seq_id: seq for seq in predictions},
                                    references={seq.seq_id: seq for seq in ground_truth},
                                    overview={'mode': mode, 'seed': self.seed}, curves=self._curves(),
                                    recoveries=recoveries)
            page.to_file(self.path('reports', '{}.html'.format(mode)))
            logger.info("%s: %s", mode, ' '.join('{}={:.3f}'.format(k, v) for k, v in report.summary.items()))
        return report

    def _require_prediction(self, mode):
        return self.require('predictions', '{}.jsonl'.format(mode), hint='run lift --mode {} first'.format(mode))

    def render(self, sequence, mode=MODE_FULL):
        """Root-trajectory component plot (SVG) and 2D overlay table of one predicted sequence.

        The overlay lists the projection of every joint into every view of the
        6-view rig, one row per (frame, view, joint); views the prediction
        falls behind are left out with a warning.

        Returns
        -------
        tuple
            Paths of the SVG and of the overlay CSV.
        """
        predictions = {seq.seq_id: seq for seq in load_dataset(self._require_prediction(mode))}
        if sequence not in predictions:
            raise InvalidArgumentError("no {} prediction with id {!r}".format(mode, sequence))
        seq = predictions[sequence]
        reference = None
        if os.path.exists(self.path('test3d')):
            reference = {s.seq_id: s for s in load_dataset(self.path('test3d'))}.get(sequence)
        stem = '{}_{}'.format(mode, sequence.replace('/', '_'))
        with self.stage('render'):
            svg = root_components_svg(seq, self.path('renders', stem + '.svg'), reference=reference)
            frames = []
            rig = self.rig6
            T, J = seq.frame_count, seq.joint_count
            for view in range(rig.n_views):
                try:
                    uv = project_points(seq.frames, rig, view)
                except BehindCameraError as error:
                    logger.warning("overlay of %s skips view %d: %s", sequence, view, error)
                    continue
                frame_index, joint_index = np.meshgrid(np.arange(T), np.arange(J), indexing='ij')
                frames.append(pd.DataFrame({'frame': frame_index.ravel(), 'view': view, 'joint': joint_index.ravel(),
                                            'u': uv[..., 0].ravel(), 'v': uv[..., 1].ravel()}))
            overlay = self.path('renders', stem + '_overlay.csv')
            table = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(
                columns=['frame', 'view', 'joint', 'u', 'v'])
            table.to_csv(overlay, index=False)
        return svg, overlay

    def read_report(self, mode=MODE_FULL):
        return MetricReport.read_csv(self.require('reports', '{}_detail.csv'.format(mode),
                                                  hint='run eval --mode {} first'.format(mode)))
