from scene_completer.background import BackgroundBundle, progressive_outpaint
from scene_completer.composer import SceneBundle, compose_scene, render_composed
from scene_completer.config import PipelineConfig, load_config, parse_config
from scene_completer.driver import render_outputs, run, validate_scene
from scene_completer.errors import *
from scene_completer.foreground import ForegroundBundle, Trajectory
from scene_completer.gaussians import GaussianSet
from scene_completer.geometry import CameraPose, DepthMap, build_schedule
