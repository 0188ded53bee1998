import json
import logging
import math
import os

import numpy as np
import torch
from torch.nn import functional as F

from scene_completer.backends import ScoreCondition
from scene_completer.deformation import DeformationField, TimeStamp, deform, knn_indices, rigidity_loss
from scene_completer.errors import DegenerateMask, InvalidArgument, MissingForeground, SceneLoadError
from scene_completer.gaussians import GaussianSet, densify_and_prune, init_sphere_gaussians
from scene_completer.geometry import CameraPose, box_placement
from scene_completer.media import VideoBundle
from scene_completer.renderer import render
from scene_completer.sds import sds_step
from scene_completer.training import LossRecorder, check_finite, mse

__all__ = [
    'Trajectory', 'ForegroundBundle', 'warp_layer', 'unwarp_layer', 'normalize_frames',
    'sample_sds_camera', 'reconstruct_static', 'sds_step', 'optimize_motion', 'refine_trajectory',
]


class Trajectory(object):
    def __init__(self, shifts, scales):
        """
        Per-frame screen-space placement of the canonical foreground.

        :param shifts: n x 2 pixel positions (x, y) of the layer center.
        :param scales: n positive scale factors.
        """
        shifts = np.asarray(shifts, dtype=np.float64).reshape(-1, 2)
        scales = np.asarray(scales, dtype=np.float64).reshape(-1)
        if shifts.shape[0] != scales.shape[0]:
            raise InvalidArgument('Trajectory has %d shifts but %d scales' % (shifts.shape[0], scales.shape[0]))
        if np.any(~(scales > 0)):
            raise InvalidArgument('Trajectory scales must be positive')
        self.shifts = shifts
        self.scales = scales

    def __len__(self):
        return self.shifts.shape[0]

    def __repr__(self):
        return '<Trajectory %d frames>' % len(self)

    def copy(self):
        return Trajectory(self.shifts.copy(), self.scales.copy())

    def to_dict(self):
        return {'shifts': self.shifts.tolist(), 'scales': self.scales.tolist()}

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(data['shifts'], data['scales'])
        except KeyError as e:
            raise SceneLoadError('Trajectory document is missing %s' % e)

    def save(self, path):
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                return cls.from_dict(json.load(f))
        except (IOError, OSError, ValueError) as e:
            raise SceneLoadError('Cannot read trajectory %s: %s' % (path, e))


def _batched(image, shift, scale):
    single = image.dim() == 3
    if single:
        image, shift, scale = image[None], shift.reshape(1, 2), scale.reshape(1)
    return single, image, shift.reshape(-1, 2), scale.reshape(-1)


def _resample(image, src_x, src_y):
    """Bilinear lookup of B x H x W x C images at continuous pixel positions, zeros outside."""
    height, width = image.shape[1:3]
    grid = torch.stack([2 * src_x / width - 1, 2 * src_y / height - 1], dim=-1)
    out = F.grid_sample(image.permute(0, 3, 1, 2), grid.to(image.dtype), mode='bilinear',
                        padding_mode='zeros', align_corners=False)
    return out.permute(0, 2, 3, 1)


def _pixel_grid(batch, height, width, dtype):
    ys = torch.arange(height, dtype=dtype) + 0.5
    xs = torch.arange(width, dtype=dtype) + 0.5
    gy, gx = torch.meshgrid(ys, xs, indexing='ij')
    return gx.expand(batch, height, width), gy.expand(batch, height, width)


def warp_layer(image, shift, scale):
    """
    Place a canonical (centered) layer on screen: scale it by s about the
    image center, then move the center to the shift.

    out(p) = in(center + (p - shift) / scale), bilinear, zeros outside.

    :param image: H x W x C or B x H x W x C tensor.
    :param shift: (x, y) or B x 2 tensor in pixels.
    :param scale: Scalar or B tensor.
    """
    single, image, shift, scale = _batched(image, torch.as_tensor(shift, dtype=image.dtype),
                                           torch.as_tensor(scale, dtype=image.dtype))
    batch, height, width = image.shape[:3]
    gx, gy = _pixel_grid(batch, height, width, image.dtype)
    src_x = width / 2. + (gx - shift[:, 0, None, None]) / scale[:, None, None]
    src_y = height / 2. + (gy - shift[:, 1, None, None]) / scale[:, None, None]
    out = _resample(image, src_x, src_y)
    return out[0] if single else out


def unwarp_layer(image, shift, scale):
    """Inverse of warp_layer: out(p) = in(shift + scale * (p - center))."""
    single, image, shift, scale = _batched(image, torch.as_tensor(shift, dtype=image.dtype),
                                           torch.as_tensor(scale, dtype=image.dtype))
    batch, height, width = image.shape[:3]
    gx, gy = _pixel_grid(batch, height, width, image.dtype)
    src_x = shift[:, 0, None, None] + scale[:, None, None] * (gx - width / 2.)
    src_y = shift[:, 1, None, None] + scale[:, None, None] * (gy - height / 2.)
    out = _resample(image, src_x, src_y)
    return out[0] if single else out


def normalize_frames(fg_video, masks, canonical_extent=0.8):
    """
    Center the foreground of every frame and scale it so the larger side
    of its bounding box spans canonical_extent of the frame height.

    Box size is measured between the centers of the outermost masked
    pixels (see mask_bbox). The returned trajectory holds the original box
    center as shift and original size / canonical size as scale.

    :return: (centered VideoBundle with masks, Trajectory)
    """
    masks = np.asarray(masks, dtype=bool)
    if masks.shape != fg_video.frames.shape[:3]:
        raise InvalidArgument('Masks %r do not match video %r' % (masks.shape, fg_video))
    height = fg_video.frames.shape[1]

    shifts, scales = [], []
    for i, mask in enumerate(masks, 1):
        if not mask.any():
            raise MissingForeground('Foreground mask is empty in frame %d' % i, frame_index=i)
        center, size = box_placement(mask)
        if size == 0:
            raise DegenerateMask('Foreground of frame %d is a single pixel' % i)
        shifts.append(center)
        scales.append(size / (canonical_extent * height))
    trajectory = Trajectory(shifts, scales)

    shift = torch.as_tensor(trajectory.shifts, dtype=torch.float64)
    scale = torch.as_tensor(trajectory.scales, dtype=torch.float64)
    layers = torch.cat([torch.from_numpy(fg_video.frames).double(),
                        torch.from_numpy(masks).double()[..., None]], dim=-1)
    centered = unwarp_layer(layers, shift, scale).numpy()
    logging.debug('Normalized %d foreground frames, scales %.3f..%.3f', len(masks),
                  trajectory.scales.min(), trajectory.scales.max())
    return VideoBundle(centered[..., :3].astype(np.float32), masks=centered[..., 3] > 0.5), trajectory


def sample_sds_camera(seen_view, hyper, generator=None):
    """
    Camera on the seen view's sphere at a random multiple of the azimuth
    step, with elevation jittered uniformly.
    """
    steps = max(1, int(round(360. / hyper.sds_azimuth_step)))
    step = int(torch.randint(0, steps, (1,), generator=generator))
    jitter = (2 * float(torch.rand(1, generator=generator, dtype=torch.float64)) - 1) * hyper.sds_elevation_jitter
    elevation = float(np.clip(seen_view.elevation + jitter, -89., 89.))
    return seen_view.with_pose(elevation, seen_view.azimuth + step * hyper.sds_azimuth_step)


def _foreground_mask(frame):
    return np.asarray(frame).max(axis=-1) > 0


def reconstruct_static(first_frame, seen_view, backends, hyper, mask=None, generator=None, recorder=None):
    """
    Fit a static Gaussian object to the centered first foreground frame.

    Minimizes the seen-view reconstruction loss (RGB, plus alpha against
    the mask when mask_weight > 0) and view-conditioned score
    distillation at cameras sampled around the object.

    :param first_frame: H x W x 3 centered foreground frame on black.
    :param seen_view: CameraPose the frame was seen from.
    :param hyper: ForegroundConfig
    :param mask: Foreground mask; non-black pixels when omitted.
    :return: A frozen GaussianSet.
    """
    static = hyper.static
    first_frame = np.asarray(first_frame, dtype=np.float32)
    if first_frame.shape[:2] != tuple(seen_view.resolution):
        raise InvalidArgument('Frame %r does not match seen view %r' % (first_frame.shape[:2], seen_view))
    if mask is None:
        mask = _foreground_mask(first_frame)
    if recorder is None:
        recorder = LossRecorder('fg-static', 0)

    target = torch.from_numpy(first_frame)
    target_alpha = torch.from_numpy(np.asarray(mask, dtype=np.float32))
    gamma_range = (hyper.gamma_min, hyper.gamma_max)

    gaussians = init_sphere_gaussians(static.initial_points, static.init_radius, opacity=static.initial_opacity)
    optimizer = gaussians.training_setup(static)
    grad_accum = torch.zeros(len(gaussians))
    logging.info('Reconstructing static foreground: %d Gaussians, %d iterations', len(gaussians), static.iterations)

    for iteration in range(1, static.iterations + 1):
        optimizer.zero_grad()
        out = render(gaussians, seen_view)
        loss_rgb = mse(out.rgb, target)
        loss_mask = mse(out.alpha, target_alpha) if static.mask_weight > 0 else torch.zeros(())
        loss = loss_rgb + static.mask_weight * loss_mask

        loss_sds = torch.zeros(())
        sds_out = None
        if static.sds_weight > 0:
            camera = sample_sds_camera(seen_view, hyper, generator)
            condition = ScoreCondition(image=first_frame, camera=camera.relative_to(seen_view), time=0.)
            sds_out = render(gaussians, camera)
            result = sds_step(sds_out.rgb, condition, backends, 'multiview', gamma_range, generator=generator)
            loss_sds = static.sds_weight * result.loss
            loss = loss + loss_sds

        check_finite(loss, iteration, 'fg-static')
        loss.backward()
        grad_accum += out.view_gradient_norms()
        if sds_out is not None:
            grad_accum += sds_out.view_gradient_norms()
        optimizer.step()
        gaussians.post_step()
        recorder.record(iteration, rgb=loss_rgb, mask=loss_mask, sds=loss_sds, total=loss)

        if iteration % static.densification_interval == 0 and iteration <= static.densify_until_iteration \
                and iteration < static.iterations:
            gaussians = densify_and_prune(gaussians, grad_accum, static.densification_threshold,
                                          static.prune_opacity)
            optimizer = gaussians.training_setup(static)
            grad_accum = torch.zeros(len(gaussians))

    logging.info('Static foreground done with %d Gaussians', len(gaussians))
    return gaussians.frozen_copy()


def optimize_motion(static, fg_video, masks, seen_view, backends, hyper, generator=None,
                    recorder=None, seed=0):
    """
    Train the foreground deformation field on the centered video.

    Each iteration samples a batch of timestamps and sums, averaged over
    the batch, the seen-view reconstruction loss, score distillation at a
    sampled camera conditioned on that timestamp's frame, and the
    rigidity loss. The static set stays frozen.

    :param static: Frozen GaussianSet from reconstruct_static.
    :param fg_video: Centered foreground VideoBundle.
    :param masks: Centered foreground masks.
    :param hyper: ForegroundConfig
    :rtype: DeformationField
    """
    if not static.frozen:
        raise InvalidArgument('Motion optimization needs a frozen static set')
    motion = hyper.motion
    n = fg_video.n_frames
    masks = np.asarray(masks, dtype=bool)
    if recorder is None:
        recorder = LossRecorder('fg-motion', 0)

    field = DeformationField(seed=seed, **motion.field.model_dump())
    optimizer = torch.optim.Adam([
        {'params': field.mlp_parameters(), 'lr': motion.deformation_lr, 'name': 'deformation'},
        {'params': field.grid_parameters(), 'lr': motion.grid_lr, 'name': 'grid'},
    ], lr=0.0, eps=1e-15)
    neighbors = knn_indices(static.positions, motion.rigidity_k)
    frames = torch.from_numpy(fg_video.frames)
    alphas = torch.from_numpy(masks.astype(np.float32))
    gamma_range = (hyper.gamma_min, hyper.gamma_max)
    logging.info('Optimizing foreground motion over %d frames, %d iterations', n, motion.iterations)

    for iteration in range(1, motion.iterations + 1):
        optimizer.zero_grad()
        batch = torch.randint(0, n, (motion.batch_size,), generator=generator).tolist()
        loss_vid, loss_sds, loss_rigid = 0., 0., 0.
        for i in batch:
            t = TimeStamp(i + 1, n)
            deformed = deform(static, field, t)
            out = render(deformed, seen_view)
            loss_vid = loss_vid + mse(out.rgb, frames[i]) + motion.mask_weight * mse(out.alpha, alphas[i])
            if motion.sds_weight > 0:
                camera = sample_sds_camera(seen_view, hyper, generator)
                condition = ScoreCondition(image=fg_video.frames[i], camera=camera.relative_to(seen_view),
                                           time=t.normalized)
                result = sds_step(render(deformed, camera).rgb, condition, backends, 'multiview',
                                  gamma_range, generator=generator)
                loss_sds = loss_sds + motion.sds_weight * result.loss
            loss_rigid = loss_rigid + motion.rigidity_weight * rigidity_loss(static, deformed, neighbors=neighbors)

        components = [x / len(batch) if torch.is_tensor(x) else torch.zeros(()) for x in
                      (loss_sds, loss_vid, loss_rigid)]
        loss = components[0] + components[1] + components[2]
        check_finite(loss, iteration, 'fg-motion')
        loss.backward()
        optimizer.step()

        values = [float(x) for x in components]
        recorder.record(iteration, sds=values[0], vid=values[1], rigid=values[2],
                        total=values[0] + values[1] + values[2])

    return field


def refine_trajectory(gaussians, field, seen_view, fg_video, masks, init_trajectory, hyper=None,
                      recorder=None):
    """
    Refine the screen-space trajectory against the uncentered frames.

    The canonical renders are fixed; the shifts and log-scales are the
    only parameters, so the static set and the field are untouched.

    :param fg_video: Uncentered foreground VideoBundle.
    :param masks: Uncentered foreground masks.
    :param hyper: TrajectoryHyper (lr 0.1, 50 iterations by default).
    :rtype: Trajectory
    """
    lr = 0.1 if hyper is None else hyper.lr
    iterations = 50 if hyper is None else hyper.iterations
    n = fg_video.n_frames
    if len(init_trajectory) != n:
        raise InvalidArgument('Trajectory has %d frames, video has %d' % (len(init_trajectory), n))
    if recorder is None:
        recorder = LossRecorder('fg-trajectory', 0)

    with torch.no_grad():
        layers = []
        for i in range(n):
            target = deform(gaussians, field, TimeStamp(i + 1, n)) if field is not None else gaussians
            out = render(target, seen_view)
            layers.append(torch.cat([out.rgb, out.alpha[..., None]], dim=-1))
        layers = torch.stack(layers)
    targets = torch.cat([torch.from_numpy(fg_video.frames),
                         torch.from_numpy(np.asarray(masks, dtype=np.float32))[..., None]], dim=-1)

    shifts = torch.tensor(init_trajectory.shifts, dtype=torch.float32, requires_grad=True)
    log_scales = torch.tensor(np.log(init_trajectory.scales), dtype=torch.float32, requires_grad=True)
    optimizer = torch.optim.Adam([shifts, log_scales], lr=lr)

    for iteration in range(1, iterations + 1):
        optimizer.zero_grad()
        placed = warp_layer(layers, shifts, torch.exp(log_scales))
        loss = mse(placed, targets)
        check_finite(loss, iteration, 'fg-trajectory')
        loss.backward()
        optimizer.step()
        recorder.record(iteration, total=loss)

    return Trajectory(shifts.detach().double().numpy(), np.exp(log_scales.detach().double().numpy()))


class ForegroundBundle(object):
    def __init__(self, gaussians, field, trajectory, seen_view):
        """
        :param gaussians: Frozen static GaussianSet.
        :param field: DeformationField
        :param trajectory: Trajectory in reference-view pixels.
        :param seen_view: CameraPose of the reference view.
        """
        if not gaussians.frozen:
            raise InvalidArgument('Foreground Gaussians must be frozen')
        self.gaussians = gaussians
        self.field = field
        self.trajectory = trajectory
        self.seen_view = seen_view

    @property
    def n_frames(self):
        return len(self.trajectory)

    def save(self, directory):
        if not os.path.isdir(directory):
            os.makedirs(directory)
        self.gaussians.save_ply(os.path.join(directory, 'fg_gaussians.ply'))
        self.field.save(os.path.join(directory, 'fg_deform.bin'))
        self.trajectory.save(os.path.join(directory, 'trajectory.json'))
        with open(os.path.join(directory, 'seen_view.json'), 'w') as f:
            json.dump(self.seen_view.to_dict(), f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, directory):
        gaussians = GaussianSet.load_ply(os.path.join(directory, 'fg_gaussians.ply'))
        field = DeformationField.load(os.path.join(directory, 'fg_deform.bin'))
        trajectory = Trajectory.load(os.path.join(directory, 'trajectory.json'))
        try:
            with open(os.path.join(directory, 'seen_view.json')) as f:
                seen_view = CameraPose.from_dict(json.load(f))
        except (IOError, OSError, ValueError) as e:
            raise SceneLoadError('Cannot read seen view in %s: %s' % (directory, e))
        return cls(gaussians, field, trajectory, seen_view)
