import json
import logging
import os
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from scene_completer.errors import InvalidConfig

__all__ = [
    'GaussianHyper', 'FieldHyper', 'MotionHyper', 'TrajectoryHyper', 'ForegroundConfig',
    'DynamicHyper', 'BackgroundConfig', 'CameraConfig', 'ScheduleConfig', 'BackendsConfig',
    'PipelineConfig', 'load_config', 'parse_config',
]


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid')


class GaussianHyper(_Section):
    """Static Gaussian optimization. Defaults are the foreground settings."""
    iterations: int = Field(1000, gt=0)
    initial_points: int = Field(5000, gt=0)
    init_radius: float = Field(0.5, gt=0)
    initial_opacity: float = Field(0.1, gt=0, lt=1)
    position_lr: float = Field(0.001, ge=0)
    feature_lr: float = Field(0.01, ge=0)
    opacity_lr: float = Field(0.05, ge=0)
    scaling_lr: float = Field(0.005, ge=0)
    rotation_lr: float = Field(0.005, ge=0)
    densification_interval: int = Field(100, gt=0)
    densification_threshold: float = Field(0.5, gt=0)
    densify_until: Optional[int] = Field(None, ge=0)
    prune_opacity: float = Field(0.005, ge=0, lt=1)
    max_scaling: Optional[float] = Field(None, gt=0)
    sds_weight: float = Field(1e-5, ge=0)
    mask_weight: float = Field(1.0, ge=0)

    @property
    def densify_until_iteration(self):
        return self.iterations // 2 if self.densify_until is None else self.densify_until


class FieldHyper(_Section):
    width: int = Field(64, gt=0)
    depth: int = Field(2, gt=0)
    position_frequencies: int = Field(4, ge=0)
    time_frequencies: int = Field(4, ge=0)
    use_grid: bool = False
    grid_resolution: List[int] = Field(default_factory=lambda: [16, 32])
    time_resolution: int = Field(8, gt=1)
    grid_features: int = Field(8, gt=0)


class MotionHyper(_Section):
    iterations: int = Field(800, gt=0)
    batch_size: int = Field(4, gt=0)
    deformation_lr: float = Field(0.00064, ge=0)
    grid_lr: float = Field(0.0064, ge=0)
    rigidity_k: int = Field(8, gt=0)
    rigidity_weight: float = Field(1.0, ge=0)
    sds_weight: float = Field(1e-5, ge=0)
    mask_weight: float = Field(1.0, ge=0)
    field: FieldHyper = Field(default_factory=FieldHyper)


class TrajectoryHyper(_Section):
    iterations: int = Field(50, ge=0)
    lr: float = Field(0.1, gt=0)


class ForegroundConfig(_Section):
    static: GaussianHyper = Field(default_factory=GaussianHyper)
    motion: MotionHyper = Field(default_factory=MotionHyper)
    trajectory: TrajectoryHyper = Field(default_factory=TrajectoryHyper)
    canonical_extent: float = Field(0.8, gt=0, le=1)
    sds_azimuth_step: float = Field(10., gt=0)
    sds_elevation_jitter: float = Field(15., ge=0, lt=75)
    gamma_min: float = Field(0.02, gt=0, lt=1)
    gamma_max: float = Field(0.98, gt=0, lt=1)


def _background_static():
    return GaussianHyper(iterations=300, initial_opacity=0.9, max_scaling=0.2, sds_weight=5e-6,
                         mask_weight=0.)


class DynamicHyper(_Section):
    iterations_per_view: int = Field(300, gt=0)
    deformation_lr: float = Field(0.0064, ge=0)
    grid_lr: float = Field(0.064, ge=0)
    tv_weight: float = Field(1e-4, ge=0)
    field: FieldHyper = Field(default_factory=lambda: FieldHyper(use_grid=True))


class BackgroundConfig(_Section):
    static: GaussianHyper = Field(default_factory=_background_static)
    fusion_iterations: int = Field(300, ge=0)
    dynamic: DynamicHyper = Field(default_factory=DynamicHyper)
    mask_threshold: float = Field(0.5, gt=0, lt=1)
    projection_mode: Literal['depth_inpaint', 'estimate'] = 'depth_inpaint'
    guided_video_inpaint: bool = True
    aabb_margin: float = Field(0.5, ge=0)
    gamma_min: float = Field(0.02, gt=0, lt=1)


class CameraConfig(_Section):
    radius: float = Field(2.5, gt=0)
    fovy: float = Field(60., gt=0, lt=180)
    near: float = Field(0.1, gt=0)
    far: float = Field(10000., gt=0)

    @model_validator(mode='after')
    def _check_clip(self):
        if self.far <= self.near:
            raise ValueError('far must be larger than near')
        return self


class ScheduleConfig(_Section):
    # None selects the two default loops
    loops: Optional[List[List[Tuple[float, float]]]] = None


class BackendsConfig(_Section):
    mode: Literal['mock', 'remote'] = 'mock'
    url: Optional[str] = None
    timeout: float = Field(600., gt=0)


class PipelineConfig(_Section):
    prompt: str = Field(..., min_length=1)
    image_path: Optional[str] = None
    reference_mode: Literal['auto', 't2v', 't2i2v'] = 'auto'
    n_frames: int = Field(16, ge=2)
    projection_resolution: int = Field(256, gt=0)
    output_resolution: int = Field(256, gt=0)
    seed: int = Field(0, ge=0)
    strength: float = Field(0.7, ge=0, le=1)
    sds_noise_ratio: float = Field(0.5, gt=0, lt=1)
    trajectory_rule: Literal['per_interval', 'literal'] = 'per_interval'
    loop_prompts: Optional[List[str]] = None
    log_interval: int = Field(50, gt=0)
    camera: CameraConfig = Field(default_factory=CameraConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    backends: BackendsConfig = Field(default_factory=BackendsConfig)
    foreground: ForegroundConfig = Field(default_factory=ForegroundConfig)
    background: BackgroundConfig = Field(default_factory=BackgroundConfig)

    @model_validator(mode='after')
    def _check_prompts(self):
        if self.loop_prompts is not None and self.schedule.loops is not None \
                and len(self.loop_prompts) != len(self.schedule.loops):
            raise ValueError('loop_prompts needs one prompt per outpaint loop (%d), got %d' % (
                len(self.schedule.loops), len(self.loop_prompts)))
        if self.background.gamma_min > self.sds_noise_ratio:
            raise ValueError('background.gamma_min must not exceed sds_noise_ratio')
        return self

    @property
    def resolution(self):
        return self.projection_resolution, self.projection_resolution

    def schedule_document(self):
        """Mapping accepted by geometry.build_schedule."""
        document = self.camera.model_dump()
        document['resolution'] = list(self.resolution)
        if self.schedule.loops is not None:
            document['loops'] = [[list(pose) for pose in loop] for loop in self.schedule.loops]
        return document

    def loop_prompt(self, loop_index):
        if self.loop_prompts and loop_index - 1 < len(self.loop_prompts):
            return self.loop_prompts[loop_index - 1]
        return self.prompt


def parse_config(data):
    """
    :param data: Mapping of configuration values.
    :rtype: PipelineConfig
    """
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as e:
        raise InvalidConfig('Invalid configuration:\n%s' % e)


def load_config(path):
    """Read a JSON configuration file."""
    try:
        with open(path) as f:
            data = json.load(f)
    except (IOError, OSError) as e:
        raise InvalidConfig('Cannot read configuration %s: %s' % (path, e))
    except ValueError as e:
        raise InvalidConfig('Configuration %s is not valid JSON: %s' % (path, e))
    config = parse_config(data)
    logging.debug('Loaded configuration from %s', os.path.abspath(path))
    return config
