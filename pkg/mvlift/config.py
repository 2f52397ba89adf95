# -*- coding: utf-8 -*-
"""Pipeline configuration: one dataclass per section, persisted as an INI document.

Every default is embedded here; `PipelineConfig.to_text` prints the complete
document and `PipelineConfig.from_file` overlays a (partial) file on it.
"""
import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, field

from mvlift.base import InvalidArgumentError
from mvlift.denoiser import DenoiserConfig
from mvlift.diffusion import TrainingConfig, DESK_PROFILE
from mvlift.geometry import CameraIntrinsics, DEFAULT_FOCAL
from mvlift.lift3d import LiftOptions
from mvlift.motion import SyntheticMotionSpec
from mvlift.mv_optimize import Stage2Options, STAGE2_VIEWS, STAGE2_ANGLE_STEP

ENV_OUTPUT_ROOT = 'MVLIFT_OUT'
"""str: Environment variable overriding ``paths.output_root``"""

RUNTIME_KEYS = (('paths', 'output_root'), ('run', 'threads'))


@dataclass
class PathsConfig(object):
    output_root: str = 'mvlift_out'


@dataclass
class RigConfig(object):
    n_views: int = 6
    angle_step: float = 60.0
    mv_views: int = 4
    mv_angle_step: float = 90.0
    radius: float = 3.0
    height: float = 0.0
    fx: float = DEFAULT_FOCAL
    fy: float = DEFAULT_FOCAL
    cx: float = 0.0
    cy: float = 0.0

    @property
    def intrinsics(self):
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy)


@dataclass
class ScheduleConfig(object):
    N: int = DESK_PROFILE['N']
    beta_start: float = DESK_PROFILE['beta_start']
    beta_end: float = DESK_PROFILE['beta_end']


@dataclass
class SyntheticConfig(object):
    count: int = 32
    held_out: int = 4
    duration: int = 64
    amplitude: float = 0.4
    frequency_min: float = 0.3
    frequency_max: float = 1.5
    root_path: str = 'circle'
    speed: float = 0.3
    path_scale: float = 0.4
    root_height: float = 0.4

    def motion_spec(self):
        return SyntheticMotionSpec(duration=self.duration, amplitude=self.amplitude,
                                   frequency_range=(self.frequency_min, self.frequency_max),
                                   root_path=self.root_path, speed=self.speed, path_scale=self.path_scale,
                                   root_height=self.root_height)


@dataclass
class RunConfig(object):
    seed: int = 0
    threads: int = 1


def _stage4_denoiser():
    return DenoiserConfig(view_count=4)


@dataclass
class PipelineConfig(object):
    """Complete, self-describing configuration of a pipeline run."""
    paths: PathsConfig = field(default_factory=PathsConfig)
    rig: RigConfig = field(default_factory=RigConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    stage1_denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    stage1_training: TrainingConfig = field(default_factory=TrainingConfig)
    stage2: Stage2Options = field(default_factory=Stage2Options)
    lift: LiftOptions = field(default_factory=LiftOptions)
    stage4_denoiser: DenoiserConfig = field(default_factory=_stage4_denoiser)
    stage4_training: TrainingConfig = field(default_factory=TrainingConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.run.seed is None:
            raise InvalidArgumentError("run.seed is required")
        if self.run.threads < 1:
            raise InvalidArgumentError("run.threads must be at least 1")
        if self.synthetic.count < 0 or self.synthetic.held_out < 0:
            raise InvalidArgumentError("synthetic counts must be non-negative")
        if not (self.rig.fx > 0 and self.rig.fy > 0):
            raise InvalidArgumentError("rig.fx and rig.fy must be positive")
        if self.rig.n_views != STAGE2_VIEWS or self.rig.angle_step != STAGE2_ANGLE_STEP:
            raise InvalidArgumentError("rig.n_views and rig.angle_step must describe the {}-view {:g} degree rig"
                                       .format(STAGE2_VIEWS, STAGE2_ANGLE_STEP))
        if self.stage4_denoiser.view_count != self.rig.mv_views:
            raise InvalidArgumentError("stage4_denoiser.view_count must equal rig.mv_views ({})".format(self.rig.mv_views))
        if self.stage1_denoiser.n_steps != self.schedule.N or self.stage4_denoiser.n_steps != self.schedule.N:
            raise InvalidArgumentError("denoiser n_steps must equal schedule.N ({})".format(self.schedule.N))
        return self

    @property
    def output_root(self):
        return self.paths.output_root

    def to_text(self, include_runtime=True):
        """INI rendering of the configuration.

        With `include_runtime` False the keys that cannot change numeric
        results (output root, worker count) are left out.
        """
        parser = configparser.ConfigParser()
        parser.optionxform = str
        for section in dataclasses.fields(self):
            values = getattr(self, section.name)
            items = {f.name: _format_value(getattr(values, f.name)) for f in dataclasses.fields(values)
                     if include_runtime or (section.name, f.name) not in RUNTIME_KEYS}
            if items:
                parser[section.name] = items
        buffer = io.StringIO()
        parser.write(buffer)
        return buffer.getvalue()

    def write(self, path):
        with open(path, 'w', encoding='utf-8') as handle:
            handle.write(self.to_text())

    @classmethod
    def from_text(cls, text, environ=None):
        """Overlay an INI document on the defaults; unknown sections or keys are rejected."""
        parser = configparser.ConfigParser()
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as error:
            raise InvalidArgumentError("malformed configuration: {}".format(error))
        sections = {f.name: f for f in dataclasses.fields(cls)}
        unknown = [name for name in parser.sections() if name not in sections]
        if unknown:
            raise InvalidArgumentError("unknown configuration sections: {}".format(', '.join(unknown)))
        values = {}
        for name, section in sections.items():
            current = section.default_factory()
            if parser.has_section(name):
                known = {f.name: f for f in dataclasses.fields(current)}
                extra = [key for key in parser[name] if key not in known]
                if extra:
                    raise InvalidArgumentError("unknown keys in [{}]: {}".format(name, ', '.join(extra)))
                overrides = {key: _parse_value(raw, getattr(current, key), known[key], name)
                             for key, raw in parser[name].items()}
                current = dataclasses.replace(current, **overrides)
            values[name] = current
        config = cls(**values)
        return config.with_environment(environ)

    @classmethod
    def from_file(cls, path, environ=None):
        if not os.path.exists(path):
            raise InvalidArgumentError("configuration file {} does not exist".format(path))
        with open(path, encoding='utf-8') as handle:
            return cls.from_text(handle.read(), environ)

    @classmethod
    def default(cls, environ=None):
        return cls().with_environment(environ)

    def with_environment(self, environ=None):
        environ = os.environ if environ is None else environ
        if environ.get(ENV_OUTPUT_ROOT):
            self.paths = dataclasses.replace(self.paths, output_root=environ[ENV_OUTPUT_ROOT])
        return self

    def with_overrides(self, seed=None, threads=None):
        """Apply command-line overrides of ``run.seed`` and ``run.threads``.

        A seed override also reseeds both training runs and Stage 2.
        """
        run = self.run
        if seed is not None:
            seed = int(seed)
            run = dataclasses.replace(run, seed=seed)
            self.stage1_training = dataclasses.replace(self.stage1_training, seed=seed)
            self.stage4_training = dataclasses.replace(self.stage4_training, seed=seed)
            self.stage2 = dataclasses.replace(self.stage2, seed=seed)
        if threads is not None:
            run = dataclasses.replace(run, threads=int(threads))
        self.run = run
        return self.validate()


def _format_value(value):
    if value is None:
        return 'none'
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (tuple, list)):
        return ', '.join(str(v) for v in value)
    return str(value)


def _parse_value(raw, default, spec, section):
    raw = raw.strip()
    kind = spec.type if isinstance(spec.type, type) else type(default)
    try:
        if raw.lower() == 'none' and (default is None or kind is tuple):
            return None
        if kind is bool:
            if raw.lower() not in ('true', 'false', 'yes', 'no', '1', '0'):
                raise ValueError(raw)
            return raw.lower() in ('true', 'yes', '1')
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(int(part) for part in raw.split(','))
        return raw
    except ValueError:
        raise InvalidArgumentError("[{}] {} = {!r} is not a valid {}".format(section, spec.name, raw, kind.__name__))
