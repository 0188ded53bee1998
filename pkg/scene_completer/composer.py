import json
import logging
import math
import os

import numpy as np
import torch

from scene_completer.background import BackgroundBundle
from scene_completer.backends import estimate_depth
from scene_completer.deformation import TimeStamp, deform
from scene_completer.errors import (BehindCamera, DegenerateDepth, DegenerateMask, InvalidArgument,
                                    SceneLoadError)
from scene_completer.foreground import ForegroundBundle, Trajectory, warp_layer
from scene_completer.geometry import DepthMap, make_lookat_camera, mask_bbox, project, unproject
from scene_completer.renderer import render

__author__ = 'SceneCompleter developers'
__maintainer__ = 'SceneCompleter developers'

__all__ = [
    'CompositionParams', 'SceneBundle', 'ComposedLayers', 'relative_depth_scale',
    'foreground_depth_shift', 'bbox_width', 'screen_scale_factor', 'rescale_trajectory',
    'compose_scene', 'composed_layers', 'render_composed', 'TRAJECTORY_RULES',
]

TRAJECTORY_RULES = ('per_interval', 'literal')


class CompositionParams(object):
    def __init__(self, delta, depth_shift, epsilon, composed_trajectory, trajectory_rule='per_interval'):
        """
        :param delta: Ratio of background to reference depth ranges.
        :param depth_shift: Depth of the foreground layer in background units.
        :param epsilon: Screen-space scale factor of the foreground.
        :param composed_trajectory: Trajectory after rescaling by epsilon.
        """
        if not delta > 0:
            raise InvalidArgument('Depth range ratio must be positive, got %r' % delta)
        if not epsilon > 0:
            raise InvalidArgument('Screen scale factor must be positive, got %r' % epsilon)
        self.delta = float(delta)
        self.depth_shift = float(depth_shift)
        self.epsilon = float(epsilon)
        self.composed_trajectory = composed_trajectory
        self.trajectory_rule = trajectory_rule

    def to_dict(self):
        return {
            'delta': self.delta,
            'depth_shift': self.depth_shift,
            'epsilon': self.epsilon,
            'trajectory_rule': self.trajectory_rule,
            'composed_trajectory': self.composed_trajectory.to_dict(),
        }

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(data['delta'], data['depth_shift'], data['epsilon'],
                       Trajectory.from_dict(data['composed_trajectory']), data['trajectory_rule'])
        except KeyError as e:
            raise SceneLoadError('Composition parameters are missing %s' % e)


def _region_values(depth, region):
    return depth.values[region].astype(np.float64)


def relative_depth_scale(bg_depth, ref_depth, fg_mask):
    """
    Ratio of the background depth range to the reference depth range,
    both taken over the pixels outside the first-frame foreground mask.
    """
    fg_mask = np.asarray(fg_mask, dtype=bool)
    region = ~fg_mask & bg_depth.valid_mask & ref_depth.valid_mask
    if not region.any():
        raise InvalidArgument('No background pixels with valid depth outside the foreground mask')
    bg = _region_values(bg_depth, region)
    ref = _region_values(ref_depth, region)
    numerator = float(bg.max()) - float(bg.min())
    denominator = float(ref.max()) - float(ref.min())
    if denominator == 0:
        raise DegenerateDepth('Reference depth is constant outside the foreground')
    if numerator == 0:
        raise DegenerateDepth('Background depth is constant outside the foreground')
    return numerator / denominator


def foreground_depth_shift(ref_depth, fg_mask, delta, bg_depth):
    """
    Depth of the foreground layer: the mean reference depth under the mask,
    measured from the nearest reference depth, scaled by delta and placed
    from the nearest background depth.
    """
    fg_mask = np.asarray(fg_mask, dtype=bool) & ref_depth.valid_mask
    if not fg_mask.any():
        raise InvalidArgument('Foreground mask is empty')
    values = _region_values(ref_depth, fg_mask)
    mean = math.fsum(values.tolist()) / len(values)
    ref_min = float(ref_depth.values[ref_depth.valid_mask].min())
    bg_min = float(bg_depth.values[bg_depth.valid_mask].min())
    return (mean - ref_min) * delta + bg_min


def bbox_width(mask):
    """Distance between the first and last masked column."""
    x0, _, x1, _ = mask_bbox(mask)
    return x1 - x0


def screen_scale_factor(rendered_mask, gt_mask):
    """Width of the ground-truth foreground box over the width of the rendered one."""
    rendered_width = bbox_width(rendered_mask)
    gt_width = bbox_width(gt_mask)
    if rendered_width == 0 or gt_width == 0:
        raise DegenerateMask('Foreground bounding box has zero width')
    return gt_width / float(rendered_width)


def rescale_trajectory(trajectory, epsilon, rule='per_interval'):
    """
    Scale the foreground path by epsilon about its first position.

    With rule "per_interval" every step between neighbouring frames is
    scaled; with "literal" every step repeats the first interval, scaled.
    Scales are multiplied by epsilon.
    """
    if not epsilon > 0:
        raise InvalidArgument('Screen scale factor must be positive, got %r' % epsilon)
    if rule not in TRAJECTORY_RULES:
        raise InvalidArgument('Unknown trajectory rule %r' % rule)
    shifts = trajectory.shifts
    composed = np.empty_like(shifts)
    composed[0] = shifts[0]
    for t in range(1, len(shifts)):
        step = shifts[t] - shifts[t - 1] if rule == 'per_interval' else shifts[1] - shifts[0]
        composed[t] = epsilon * step + composed[t - 1]
    return Trajectory(composed, epsilon * trajectory.scales)


class SceneBundle(object):
    def __init__(self, foreground, background, params, ref_depth, metadata=None, composition_inputs=None):
        """
        :param foreground: ForegroundBundle, or None for a background-only scene.
        :param background: BackgroundBundle
        :param params: CompositionParams
        :param ref_depth: DepthMap of the first reference frame.
        :param metadata: prompt, n_frames, resolution, schedule, seed.
        :param composition_inputs: Raw arrays the parameters were derived from.
        """
        self.foreground = foreground
        self.background = background
        self.params = params
        self.ref_depth = ref_depth
        self.metadata = dict(metadata or {})
        self.composition_inputs = composition_inputs or {}

        n = background.n_frames
        if foreground is not None and (foreground.n_frames != n or len(params.composed_trajectory) != n):
            raise InvalidArgument('Frame counts disagree: background %d, foreground %d, trajectory %d' % (
                n, foreground.n_frames, len(params.composed_trajectory)))

    @property
    def reference_camera(self):
        return self.background.reference_view.camera

    @property
    def n_frames(self):
        return self.background.n_frames

    def save(self, directory):
        if not os.path.isdir(directory):
            os.makedirs(directory)
        if self.foreground is not None:
            self.foreground.save(os.path.join(directory, 'fg'))
        self.background.save(os.path.join(directory, 'bg'))
        document = {
            'params': self.params.to_dict(),
            'metadata': self.metadata,
            'reference_camera': self.reference_camera.to_dict(),
            'has_foreground': self.foreground is not None,
        }
        with open(os.path.join(directory, 'scene.json'), 'w') as f:
            json.dump(document, f, indent=1, sort_keys=True)
        inputs = dict(self.composition_inputs)
        inputs['ref_depth'] = self.ref_depth.values
        inputs['ref_valid'] = self.ref_depth.valid_mask
        np.savez(os.path.join(directory, 'composition_inputs.npz'), **inputs)
        logging.info('Saved scene to %s', directory)

    @classmethod
    def load(cls, directory):
        try:
            with open(os.path.join(directory, 'scene.json')) as f:
                document = json.load(f)
            with np.load(os.path.join(directory, 'composition_inputs.npz')) as data:
                inputs = dict((k, data[k]) for k in data.files)
        except (IOError, OSError, ValueError) as e:
            raise SceneLoadError('Cannot load scene from %s: %s' % (directory, e))

        foreground = None
        if document.get('has_foreground', True):
            foreground = ForegroundBundle.load(os.path.join(directory, 'fg'))
        background = BackgroundBundle.load(os.path.join(directory, 'bg'))
        ref_depth = DepthMap(inputs.pop('ref_depth'), inputs.pop('ref_valid'))
        return cls(foreground, background, CompositionParams.from_dict(document['params']), ref_depth,
                   document.get('metadata'), inputs)


def foreground_layer(foreground, reference_camera, camera, t, shift, scale):
    """
    Render the canonical foreground for a camera offset from the reference
    view and place it on screen.

    :return: (H x W x 3 premultiplied rgb, H x W alpha) as tensors.
    """
    seen = foreground.seen_view
    d_elevation, d_azimuth = camera.relative_to(reference_camera)
    fg_camera = make_lookat_camera(float(np.clip(seen.elevation + d_elevation, -89., 89.)),
                                   seen.azimuth + d_azimuth, seen.radius, seen.fovy, seen.near, seen.far,
                                   camera.resolution)
    out = render(deform(foreground.gaussians, foreground.field, TimeStamp(t, foreground.n_frames)), fg_camera)
    layer = warp_layer(torch.cat([out.rgb, out.alpha[..., None]], dim=-1), shift, scale)
    return layer[..., :3], layer[..., 3]


def compose_scene(foreground, background, ref_frame, masks, backends, trajectory_rule='per_interval',
                  metadata=None):
    """
    Place the foreground in the background's depth and screen space.

    Depth comes from the depth estimator on the first reference frame
    and from the background render at the reference camera. The screen
    scale compares the foreground layer rendered with the learned
    trajectory against the first ground-truth mask.

    :param ref_frame: First frame of the reference video.
    :param masks: Foreground masks of the reference video.
    :rtype: SceneBundle
    """
    masks = np.asarray(masks, dtype=bool)
    n = background.n_frames
    if masks.shape[0] != n or foreground.n_frames != n:
        raise InvalidArgument('Frame counts disagree: %d masks, background %d, foreground %d' % (
            masks.shape[0], n, foreground.n_frames))
    camera = background.reference_view.camera

    ref_depth = estimate_depth(backends, ref_frame)
    with torch.no_grad():
        bg_out = render(deform(background.gaussians, background.field, TimeStamp(1, n)), camera)
        _, bg_alpha, bg_values = bg_out.numpy()
        bg_valid = (bg_alpha > 0.5) & (bg_values > 0)
        bg_depth = DepthMap(np.where(bg_valid, bg_values, 1.), bg_valid)

        trajectory = foreground.trajectory
        _, fg_alpha = foreground_layer(foreground, camera, camera, 1, trajectory.shifts[0], trajectory.scales[0])
        rendered_mask = fg_alpha.numpy() > 0.5

    delta = relative_depth_scale(bg_depth, ref_depth, masks[0])
    depth_shift = foreground_depth_shift(ref_depth, masks[0], delta, bg_depth)
    epsilon = screen_scale_factor(rendered_mask, masks[0])
    composed = rescale_trajectory(trajectory, epsilon, trajectory_rule)
    logging.info('Composition: delta=%.6g depth_shift=%.6g epsilon=%.6g', delta, depth_shift, epsilon)

    params = CompositionParams(delta, depth_shift, epsilon, composed, trajectory_rule)
    inputs = {
        'bg_depth': bg_depth.values,
        'bg_valid': bg_depth.valid_mask,
        'fg_mask': masks[0],
        'rendered_mask': rendered_mask,
        'trajectory_shifts': trajectory.shifts,
        'trajectory_scales': trajectory.scales,
    }
    return SceneBundle(foreground, background, params, ref_depth, metadata, inputs)


class ComposedLayers(object):
    def __init__(self, rgb, background, fg_rgb=None, fg_alpha=None, fg_depth=None, fg_wins=None):
        self.rgb = rgb
        self.background = background
        self.fg_rgb = fg_rgb
        self.fg_alpha = fg_alpha
        self.fg_depth = fg_depth
        self.fg_wins = fg_wins


def composed_layers(scene, camera, t):
    """
    Background render plus the depth-tested foreground layer at a camera
    and 1-based frame index t.

    The foreground anchor is the composed trajectory position unprojected
    at the foreground depth from the reference camera; it is projected
    into the camera to place the layer, and its depth there tags the
    whole layer. The foreground is drawn over the background where the
    background is empty or farther away.

    :rtype: ComposedLayers
    """
    n = scene.n_frames
    if not 1 <= t <= n:
        raise InvalidArgument('Frame index %r is outside [1, %d]' % (t, n))
    background = scene.background
    with torch.no_grad():
        bg_out = render(deform(background.gaussians, background.field, TimeStamp(t, n)), camera)
    bg_rgb, bg_alpha, bg_depth = bg_out.numpy()
    if scene.foreground is None:
        return ComposedLayers(bg_rgb, bg_rgb)

    reference = scene.reference_camera
    params = scene.params
    shift = params.composed_trajectory.shifts[t - 1]
    scale = params.composed_trajectory.scales[t - 1]
    anchor = unproject(shift, params.depth_shift, reference)
    try:
        pixel, depth = project(anchor, camera)
    except BehindCamera:
        return ComposedLayers(bg_rgb, bg_rgb)

    tan_ratio = math.tan(math.radians(reference.fovy) / 2) / math.tan(math.radians(camera.fovy) / 2)
    camera_scale = scale * params.depth_shift / depth * tan_ratio
    with torch.no_grad():
        fg_rgb, fg_alpha = foreground_layer(scene.foreground, reference, camera, t, pixel, camera_scale)
    fg_rgb, fg_alpha = fg_rgb.numpy().astype(np.float32), fg_alpha.numpy().astype(np.float32)

    occluded = (bg_alpha >= 0.5) & (bg_depth <= depth)
    wins = (fg_alpha > 0) & ~occluded
    rgb = np.where(wins[..., None], fg_rgb + (1 - fg_alpha[..., None]) * bg_rgb, bg_rgb)
    return ComposedLayers(rgb.astype(np.float32), bg_rgb, fg_rgb, fg_alpha, depth, wins)


def render_composed(scene, camera, t):
    """
    Render the composed scene at a camera and 1-based frame index.

    :return: H x W x 3 frame.
    """
    return composed_layers(scene, camera, t).rgb
