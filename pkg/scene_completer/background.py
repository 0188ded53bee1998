import json
import logging
import os

import numpy as np
import torch

from scene_completer.backends import (ScoreCondition, estimate_depth, inpaint_depth, inpaint_image,
                                      inpaint_video)
from scene_completer.deformation import DeformationField, TimeStamp, deform, tv_loss
from scene_completer.errors import InvalidArgument, SceneCompleterError, SceneLoadError, StageFailure
from scene_completer.gaussians import GaussianSet, densify_and_prune
from scene_completer.geometry import CameraPose, DepthMap, lift_frame
from scene_completer.media import VideoBundle
from scene_completer.renderer import inpaint_mask, render
from scene_completer.sds import sds_step
from scene_completer.training import LossRecorder, check_finite, mse, substream, substream_seed

__all__ = [
    'TrainedView', 'BackgroundBundle', 'OutpaintResult', 'fill_foreground_hole', 'init_background', 'refine_static',
    'make_pseudo_video', 'outpaint_view', 'optimize_dynamic', 'start_background', 'outpaint_loop',
    'progressive_outpaint',
]


class TrainedView(object):
    def __init__(self, camera, video, strength=0., loop=0):
        """
        A camera and the video that supervises the background from it.

        :param strength: Video inpainting strength that produced the video.
        :param loop: Outpaint loop that added the view; 0 for the reference.
        """
        self.camera = camera
        self.video = video
        self.strength = float(strength)
        self.loop = int(loop)

    @property
    def name(self):
        return self.camera.name

    def __repr__(self):
        return '<TrainedView %s loop %d>' % (self.camera, self.loop)


class BackgroundBundle(object):
    def __init__(self, gaussians, field, trained_views, loop_index=0):
        """
        :param gaussians: Static background GaussianSet; grows across loops.
        :param field: Grid-featured DeformationField.
        :param trained_views: List of TrainedView, reference view first.
        :param loop_index: Last completed outpaint loop.
        """
        if not trained_views:
            raise InvalidArgument('A background bundle needs the reference view')
        self.gaussians = gaussians
        self.field = field
        self.trained_views = list(trained_views)
        self.loop_index = int(loop_index)

    @property
    def reference_view(self):
        return self.trained_views[0]

    @property
    def n_frames(self):
        return self.reference_view.video.n_frames

    def __repr__(self):
        return '<BackgroundBundle %d Gaussians, %d views, loop %d>' % (
            len(self.gaussians), len(self.trained_views), self.loop_index)

    def save(self, directory):
        views_dir = os.path.join(directory, 'trained_views')
        if not os.path.isdir(views_dir):
            os.makedirs(views_dir)
        self.gaussians.save_ply(os.path.join(directory, 'bg_gaussians.ply'))
        self.field.save(os.path.join(directory, 'bg_deform.bin'))

        manifest = []
        for view in self.trained_views:
            view.video.save(os.path.join(views_dir, view.name))
            manifest.append({'name': view.name, 'camera': view.camera.to_dict(),
                             'strength': view.strength, 'loop': view.loop})
        with open(os.path.join(directory, 'views.json'), 'w') as f:
            json.dump({'loop_index': self.loop_index, 'views': manifest}, f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, directory):
        gaussians = GaussianSet.load_ply(os.path.join(directory, 'bg_gaussians.ply'))
        field = DeformationField.load(os.path.join(directory, 'bg_deform.bin'))
        try:
            with open(os.path.join(directory, 'views.json')) as f:
                manifest = json.load(f)
        except (IOError, OSError, ValueError) as e:
            raise SceneLoadError('Cannot read trained views in %s: %s' % (directory, e))

        views = []
        for entry in manifest['views']:
            video = VideoBundle.load(os.path.join(directory, 'trained_views', entry['name']))
            views.append(TrainedView(CameraPose.from_dict(entry['camera']), video,
                                     entry['strength'], entry['loop']))
        return cls(gaussians, field, views, manifest['loop_index'])


class OutpaintResult(object):
    def __init__(self, training_video, expanded, fragment, inpainted_first, masks):
        """
        :param training_video: Inpainted video that supervises the new view.
        :param expanded: The fused and refined GaussianSet.
        :param fragment: Gaussians lifted from the inpainted first frame.
        :param inpainted_first: Frame 1 of the training video.
        :param masks: Per-frame inpainting masks at the camera.
        """
        self.training_video = training_video
        self.expanded = expanded
        self.fragment = fragment
        self.inpainted_first = inpainted_first
        self.masks = masks


def _gamma_range(hyper, noise_ratio):
    return hyper.gamma_min, noise_ratio


def refine_static(gaussians, camera, target_frame, backends, hyper, prompt='', noise_ratio=0.5,
                  iterations=None, frozen_rows=None, densify=True, generator=None, recorder=None):
    """
    Static refinement against one frame: L2 to the frame plus text- and
    image-conditioned score distillation.

    :param frozen_rows: Boolean N mask of Gaussians whose position,
        rotation, scale and color stay fixed; their opacity still trains.
    :param densify: Densify and prune on the configured schedule. Must be
        off when frozen_rows is given.
    :return: The refined GaussianSet (new leaf tensors).
    """
    static = hyper.static
    iterations = static.iterations if iterations is None else iterations
    if frozen_rows is not None and densify:
        raise InvalidArgument('Densification would reorder frozen Gaussians')
    if recorder is None:
        recorder = LossRecorder('bg-static', 0)

    gaussians = gaussians.clone()
    gaussians.max_scale = static.max_scaling if static.max_scaling is not None else gaussians.max_scale
    target = torch.from_numpy(np.asarray(target_frame, dtype=np.float32))
    optimizer = gaussians.training_setup(static)
    hooks = []
    if frozen_rows is not None:
        trainable = torch.as_tensor(~np.asarray(frozen_rows, dtype=bool), dtype=gaussians.dtype)
        for tensor in (gaussians.positions, gaussians._rotation, gaussians._scaling, gaussians._colors):
            hooks.append(tensor.register_hook(lambda grad: grad * trainable[:, None]))
    grad_accum = torch.zeros(len(gaussians))

    for iteration in range(1, iterations + 1):
        optimizer.zero_grad()
        out = render(gaussians, camera)
        loss_rgb = mse(out.rgb, target)
        loss = loss_rgb
        loss_sds = torch.zeros(())
        if static.sds_weight > 0:
            condition = ScoreCondition(image=target_frame, text=prompt)
            result = sds_step(out.rgb, condition, backends, 'text', _gamma_range(hyper, noise_ratio),
                              generator=generator)
            loss_sds = static.sds_weight * result.loss
            loss = loss + loss_sds

        check_finite(loss, iteration, recorder.stage)
        loss.backward()
        if densify:
            grad_accum += out.view_gradient_norms()
        optimizer.step()
        gaussians.post_step()
        recorder.record(iteration, rgb=loss_rgb, sds=loss_sds, total=loss)

        if densify and iteration % static.densification_interval == 0 \
                and iteration <= static.densify_until_iteration and iteration < iterations:
            gaussians = densify_and_prune(gaussians, grad_accum, static.densification_threshold,
                                          static.prune_opacity)
            optimizer = gaussians.training_setup(static)
            grad_accum = torch.zeros(len(gaussians))

    for hook in hooks:
        hook.remove()
    return gaussians.clone()


def fill_foreground_hole(bg_first_frame, fg_mask, backends, prompt=''):
    """
    Fill the pixels the foreground covered in the first background frame:
    color by image inpainting, depth by inpainting the estimated depth.

    :param fg_mask: Foreground mask of the first frame.
    :return: (filled H x W x 3 frame, DepthMap)
    """
    frame = np.asarray(bg_first_frame, dtype=np.float32)
    fg_mask = np.asarray(fg_mask, dtype=bool)
    depth = estimate_depth(backends, frame)
    if not fg_mask.any():
        return frame.copy(), depth
    filled = inpaint_image(backends, frame, fg_mask, prompt)
    depth = inpaint_depth(backends, DepthMap(depth.values), fg_mask)
    logging.info('Filled %d foreground pixels of the first background frame', int(fg_mask.sum()))
    return filled, depth


def init_background(bg_first_frame, backends, seen_view, hyper, prompt='', noise_ratio=0.5,
                    generator=None, recorder=None, depth=None):
    """
    Lift every pixel of the first background frame through its estimated
    depth, then refine the set against that frame.

    :param bg_first_frame: H x W x 3 at the projection resolution, with
        any foreground hole already filled (see fill_foreground_hole).
    :param hyper: BackgroundConfig
    :param depth: DepthMap of the frame; estimated when omitted.
    :rtype: GaussianSet
    """
    frame = np.asarray(bg_first_frame, dtype=np.float32)
    if frame.shape[:2] != tuple(seen_view.resolution):
        raise InvalidArgument('Background frame %r does not match the seen view %r' % (
            frame.shape[:2], seen_view))
    if depth is None:
        depth = estimate_depth(backends, frame)
    if depth.values.shape != frame.shape[:2]:
        raise InvalidArgument('Depth %r does not match the background frame %r' % (depth, frame.shape[:2]))
    gaussians = lift_frame(frame, DepthMap(depth.values), seen_view, opacity=hyper.static.initial_opacity,
                           max_scale=hyper.static.max_scaling)
    logging.info('Lifted %d background Gaussians', len(gaussians))
    if recorder is None:
        recorder = LossRecorder('bg-init', 0)
    return refine_static(gaussians, seen_view, frame, backends, hyper, prompt, noise_ratio,
                         generator=generator, recorder=recorder)


def make_pseudo_video(rendered, masks, inpainted_first):
    """
    Paste the inpainted first frame into the uncovered pixels of every
    rendered frame. Frame 1 is the inpainted frame itself.
    """
    masks = np.asarray(masks, dtype=bool)
    if masks.shape[0] != rendered.n_frames:
        raise InvalidArgument('Got %d masks for %d rendered frames' % (masks.shape[0], rendered.n_frames))
    if masks.shape[1:] != tuple(rendered.resolution):
        raise InvalidArgument('Mask resolution %r does not match frames %r' % (masks.shape[1:], rendered.resolution))
    inpainted_first = np.asarray(inpainted_first, dtype=np.float32)
    frames = np.where(masks[..., None], inpainted_first[None], rendered.frames)
    frames[0] = inpainted_first
    return VideoBundle(frames, masks=masks)


def render_view(gaussians, field, camera, n_frames, mask_threshold=0.5):
    """Render every timestamp at a camera: (VideoBundle with inpaint masks, per-frame depth)."""
    frames, masks, depths = [], [], []
    with torch.no_grad():
        for i in range(n_frames):
            out = render(deform(gaussians, field, TimeStamp(i + 1, n_frames)), camera)
            rgb, alpha, depth = out.numpy()
            frames.append(rgb)
            masks.append(inpaint_mask(alpha, mask_threshold))
            depths.append(depth)
    return VideoBundle(np.clip(np.stack(frames), 0., 1.), masks=np.stack(masks)), np.stack(depths)


def _fill_depth(backends, rendered_depth, mask, first_frame, mode):
    # covered pixels have alpha >= threshold, so their rendered depth is positive
    covered = ~mask & (rendered_depth > 0)
    values = np.where(covered, rendered_depth, 1.).astype(np.float32)
    if mode == 'depth_inpaint':
        return inpaint_depth(backends, DepthMap(values), mask)
    estimated = estimate_depth(backends, first_frame).values
    ratio = float(np.median(rendered_depth[covered] / estimated[covered])) if covered.any() else 1.
    return DepthMap(np.where(mask, estimated * ratio, values))


def outpaint_view(bundle, camera, prompt, backends, hyper, strength=0.7, noise_ratio=0.5, seed=0,
                  generator=None, recorder=None):
    """
    One inpaint-project step at a new camera.

    Renders the current background at every timestamp, inpaints the
    uncovered pixels of frame 1, builds the pseudo video, inpaints it into
    the training video, lifts the newly filled first-frame pixels through
    the inpainted rendered depth and refines the fused set against the
    first frame with prior Gaussians held in place.

    :param hyper: BackgroundConfig
    :rtype: OutpaintResult
    """
    n = bundle.n_frames
    rendered, depths = render_view(bundle.gaussians, bundle.field, camera, n, hyper.mask_threshold)
    masks = rendered.masks
    if not masks[0].any():
        logging.warning('Nothing to outpaint at %s, the view is already covered', camera)
        return OutpaintResult(rendered, bundle.gaussians, GaussianSet.empty(bundle.gaussians.max_scale),
                              rendered.frames[0].copy(), masks)

    inpainted = inpaint_image(backends, rendered.frames[0], masks[0], prompt)
    pseudo = make_pseudo_video(rendered, masks, inpainted) if hyper.guided_video_inpaint else rendered
    training = inpaint_video(backends, pseudo, masks, strength, seed=seed)
    first = training.frames[0]

    depth = _fill_depth(backends, depths[0], masks[0], first, hyper.projection_mode)
    fragment = lift_frame(first, DepthMap(depth.values, masks[0]), camera,
                          opacity=hyper.static.initial_opacity, max_scale=hyper.static.max_scaling)
    fused = bundle.gaussians.concat(fragment)
    logging.info('Outpainting %s: %d uncovered pixels, %d -> %d Gaussians', camera,
                 int(masks[0].sum()), len(bundle.gaussians), len(fused))

    frozen_rows = np.arange(len(fused)) < len(bundle.gaussians)
    expanded = refine_static(fused, camera, first, backends, hyper, prompt, noise_ratio,
                             iterations=hyper.fusion_iterations, frozen_rows=frozen_rows, densify=False,
                             generator=generator, recorder=recorder)
    return OutpaintResult(training, expanded, fragment, first, masks)


def optimize_dynamic(bundle, hyper, iterations=None, generator=None, recorder=None):
    """
    Train the background deformation field (warm-started) on every
    trained view: L1 to the view's frame plus total variation of the
    feature planes. The static set is not changed.

    :param hyper: BackgroundConfig
    :rtype: DeformationField
    """
    if not bundle.trained_views:
        raise InvalidArgument('No trained views to optimize against')
    dynamic = hyper.dynamic
    views = bundle.trained_views
    n = bundle.n_frames
    if iterations is None:
        iterations = dynamic.iterations_per_view * len(views)
    if recorder is None:
        recorder = LossRecorder('bg-dynamic', 0)

    field = bundle.field
    static = bundle.gaussians.frozen_copy()
    optimizer = torch.optim.Adam([
        {'params': field.mlp_parameters(), 'lr': dynamic.deformation_lr, 'name': 'deformation'},
        {'params': field.grid_parameters(), 'lr': dynamic.grid_lr, 'name': 'grid'},
    ], lr=0.0, eps=1e-15)
    frames = [torch.from_numpy(view.video.frames) for view in views]

    for iteration in range(1, iterations + 1):
        optimizer.zero_grad()
        v = int(torch.randint(0, len(views), (1,), generator=generator))
        i = int(torch.randint(0, n, (1,), generator=generator))
        out = render(deform(static, field, TimeStamp(i + 1, n)), views[v].camera)
        loss_l1 = (out.rgb - frames[v][i]).abs().mean()
        loss_tv = dynamic.tv_weight * tv_loss(field) if field.use_grid else torch.zeros(())
        loss = loss_l1 + loss_tv
        check_finite(loss, iteration, recorder.stage)
        loss.backward()
        optimizer.step()
        recorder.record(iteration, l1=loss_l1, tv=loss_tv, total=loss)
    return field


def _field_bounds(gaussians, margin):
    positions = gaussians.positions.detach().double().numpy()
    low, high = positions.min(axis=0), positions.max(axis=0)
    pad = np.maximum(high - low, 1e-3) * margin
    return np.stack([low - pad, high + pad])


def start_background(init_set, bg_video, seen_view, hyper, seed=0, generator=None, recorder=None):
    """
    Loop 0: a fresh grid-featured field trained on the reference view alone.

    :rtype: BackgroundBundle
    """
    field = DeformationField(aabb=_field_bounds(init_set, hyper.aabb_margin),
                             seed=substream_seed(seed, 'bg-field'), **hyper.dynamic.field.model_dump())
    bundle = BackgroundBundle(init_set, field, [TrainedView(seen_view, bg_video, 0., 0)], 0)
    optimize_dynamic(bundle, hyper, generator=generator, recorder=recorder)
    return bundle


def outpaint_loop(bundle, cameras, prompt, backends, hyper, loop_index, strength=0.7, noise_ratio=0.5,
                  seed=0, recorder=None):
    """
    Outpaint every camera of one loop in order, then retrain the field on
    all accumulated views. Failures are raised as StageFailure naming the
    loop and camera.
    """
    stage = 'bg-loop-%d' % loop_index
    for camera in cameras:
        context = '%s camera %s' % (stage, camera.name)
        try:
            result = outpaint_view(bundle, camera, prompt, backends, hyper, strength, noise_ratio,
                                   seed=substream_seed(seed, context),
                                   generator=substream(seed, context), recorder=recorder)
        except SceneCompleterError as e:
            raise StageFailure('Outpainting failed at %s: %s' % (context, e), stage=stage)
        bundle.gaussians = result.expanded
        bundle.trained_views.append(TrainedView(camera, result.training_video, strength, loop_index))

    try:
        optimize_dynamic(bundle, hyper, generator=substream(seed, '%s dynamic' % stage), recorder=recorder)
    except SceneCompleterError as e:
        raise StageFailure('Dynamic optimization failed in %s: %s' % (stage, e), stage=stage)
    bundle.loop_index = loop_index
    return bundle


def progressive_outpaint(init_set, bg_video, schedule, prompt, backends, hyper, strength=0.7,
                         noise_ratio=0.5, seed=0, loop_prompts=None, on_loop_complete=None):
    """
    Expand and animate the background over the whole camera schedule.

    :param loop_prompts: Optional per-loop prompts replacing prompt.
    :param on_loop_complete: Called with (bundle, loop_index) after every
        loop, including loop 0.
    :rtype: BackgroundBundle
    """
    bundle = start_background(init_set, bg_video, schedule.reference, hyper, seed=seed,
                              generator=substream(seed, 'bg-loop-0'))
    if on_loop_complete is not None:
        on_loop_complete(bundle, 0)
    for loop_index, cameras in enumerate(schedule.loops, 1):
        loop_prompt = loop_prompts[loop_index - 1] if loop_prompts else prompt
        bundle = outpaint_loop(bundle, cameras, loop_prompt, backends, hyper, loop_index, strength,
                               noise_ratio, seed=seed)
        if on_loop_complete is not None:
            on_loop_complete(bundle, loop_index)
    return bundle
