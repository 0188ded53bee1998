import json
import logging
import math
import os
import time

import numpy as np
from plyfile import PlyData
from sympy import Rational

from scene_completer.backends import (generate_image, generate_reference_video, make_backends,
                                      segment_video)
from scene_completer.background import (BackgroundBundle, fill_foreground_hole, init_background, make_pseudo_video,
                                       outpaint_loop, start_background)
from scene_completer.composer import SceneBundle, compose_scene, render_composed
from scene_completer.deformation import DeformationField
from scene_completer.errors import InvalidArgument, InvalidConfig, SceneLoadError, StageFailure
from scene_completer.foreground import (ForegroundBundle, Trajectory, normalize_frames, optimize_motion,
                                        reconstruct_static, refine_trajectory)
from scene_completer.gaussians import GaussianSet
from scene_completer.geometry import build_schedule, make_lookat_camera
from scene_completer.media import VideoBundle, load_image, psnr, resize_frame, save_png, write_mp4
from scene_completer.training import LossRecorder, substream, substream_seed

__author__ = 'SceneCompleter developers'
__maintainer__ = 'SceneCompleter developers'

__all__ = [
    'RunManifest', 'ValidationReport', 'stage_names', 'run', 'render_outputs', 'parse_cameras',
    'parse_times', 'psnr_report', 'validate_scene',
]

ORBIT_VIEWS = 24


def stage_names(schedule):
    """Pipeline stages in execution order for a camera schedule."""
    names = ['reference-video', 'segmentation', 'fg-static', 'fg-motion', 'fg-trajectory', 'bg-init']
    names.extend('bg-loop-%d' % i for i in range(1, len(schedule.loops) + 1))
    names.append('composition')
    return names


class RunManifest(object):
    def __init__(self, stages):
        """
        Status of every pipeline stage of a run directory.

        Each entry holds the stage name, its status (pending, running,
        done or failed), the wall-clock seconds it took, the error
        message of a failure and the loss files it wrote.
        """
        self.stages = []
        for stage in stages:
            if isinstance(stage, dict):
                self.stages.append(dict(stage))
            else:
                self.stages.append({'name': stage, 'status': 'pending', 'wall_clock': None,
                                    'error': None, 'losses': []})

    def __getitem__(self, name):
        for stage in self.stages:
            if stage['name'] == name:
                return stage
        raise KeyError(name)

    @property
    def names(self):
        return [stage['name'] for stage in self.stages]

    def is_done(self, name):
        return self[name]['status'] == 'done'

    def mark(self, name, status, **fields):
        stage = self[name]
        stage['status'] = status
        stage.update(fields)

    def save(self, path):
        with open(path, 'w') as f:
            json.dump({'stages': self.stages}, f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                return cls(json.load(f)['stages'])
        except (IOError, OSError, ValueError, KeyError) as e:
            raise SceneLoadError('Cannot read run manifest %s: %s' % (path, e))


class _Run(object):
    def __init__(self, config, out_dir):
        self.config = config
        self.out_dir = out_dir
        self.seed = config.seed
        self.backends = make_backends(config.backends, seed=config.seed)
        self.schedule = build_schedule(config.schedule_document())
        self.seen_view = self.schedule.reference
        self.recorders = []

        self.reference = None
        self.masks = None
        self.fg_layer = None
        self.bg_layer = None
        self.centered = None
        self.init_trajectory = None
        self.static = None
        self.field = None
        self.foreground = None
        self.background = None
        self.scene = None

    def path(self, *parts):
        return os.path.join(self.out_dir, *parts)

    def recorder(self, name):
        recorder = LossRecorder(name, self.config.log_interval)
        self.recorders.append(recorder)
        return recorder

    def metadata(self):
        config = self.config
        return {
            'prompt': config.prompt,
            'n_frames': config.n_frames,
            'resolution': list(config.resolution),
            'output_resolution': config.output_resolution,
            'seed': config.seed,
            'trajectory_rule': config.trajectory_rule,
            'schedule': self.schedule.to_dict(),
        }


def _reference_mode(config):
    if config.reference_mode == 'auto':
        return 'i2v' if config.image_path else 't2v'
    return config.reference_mode


def _run_reference_video(run):
    config = run.config
    mode = _reference_mode(config)
    image = None
    if mode == 'i2v':
        image = load_image(config.image_path, config.resolution)
    elif mode == 't2i2v':
        image = generate_image(run.backends, config.prompt, seed=run.seed, resolution=config.resolution)
    logging.info('Generating %d-frame reference video (%s)', config.n_frames, mode)
    video = generate_reference_video(run.backends, config.prompt, image, seed=run.seed,
                                     n_frames=config.n_frames, resolution=config.resolution)
    VideoBundle(video.frames).save(run.path('reference'))


def _load_reference_video(run, skipped):
    video = VideoBundle.load(run.path('reference'))
    if skipped:
        config = run.config
        run.backends.replay_reference(config.prompt, seed=run.seed, n_frames=config.n_frames,
                                      resolution=config.resolution)
    run.reference = VideoBundle(video.frames, masks=run.masks)


def _run_segmentation(run):
    fg, bg, masks = segment_video(run.backends, run.reference)
    np.save(run.path('reference', 'masks.npy'), masks)
    fg.save(run.path('layers', 'fg'))
    bg.save(run.path('layers', 'bg'))
    logging.info('Segmented reference video: mean foreground coverage %.3f', float(masks.mean()))


def _load_segmentation(run, skipped):
    try:
        run.masks = np.load(run.path('reference', 'masks.npy'))
    except (IOError, OSError, ValueError) as e:
        raise SceneLoadError('Cannot load reference masks: %s' % e)
    run.reference.masks = run.masks
    run.fg_layer = VideoBundle.load(run.path('layers', 'fg'))
    run.bg_layer = VideoBundle.load(run.path('layers', 'bg'))


def _run_fg_static(run):
    hyper = run.config.foreground
    centered, trajectory = normalize_frames(run.fg_layer, run.masks, hyper.canonical_extent)
    centered.save(run.path('fg', 'centered'))
    trajectory.save(run.path('fg', 'trajectory_init.json'))
    static = reconstruct_static(centered.frames[0], run.seen_view, run.backends, hyper,
                                mask=centered.masks[0], generator=substream(run.seed, 'fg-static'),
                                recorder=run.recorder('fg-static'))
    static.save_ply(run.path('fg', 'fg_gaussians.ply'))


def _load_fg_static(run, skipped):
    run.centered = VideoBundle.load(run.path('fg', 'centered'))
    run.init_trajectory = Trajectory.load(run.path('fg', 'trajectory_init.json'))
    run.static = GaussianSet.load_ply(run.path('fg', 'fg_gaussians.ply'))


def _run_fg_motion(run):
    field = optimize_motion(run.static, run.centered, run.centered.masks, run.seen_view, run.backends,
                            run.config.foreground, generator=substream(run.seed, 'fg-motion'),
                            recorder=run.recorder('fg-motion'), seed=substream_seed(run.seed, 'fg-field'))
    field.save(run.path('fg', 'fg_deform.bin'))


def _load_fg_motion(run, skipped):
    run.field = DeformationField.load(run.path('fg', 'fg_deform.bin'))


def _run_fg_trajectory(run):
    trajectory = refine_trajectory(run.static, run.field, run.seen_view, run.fg_layer, run.masks,
                                   run.init_trajectory, run.config.foreground.trajectory,
                                   recorder=run.recorder('fg-trajectory'))
    ForegroundBundle(run.static, run.field, trajectory, run.seen_view).save(run.path('fg'))


def _load_fg_trajectory(run, skipped):
    run.foreground = ForegroundBundle.load(run.path('fg'))


def _run_bg_init(run):
    config = run.config
    hyper = config.background
    filled, depth = fill_foreground_hole(run.bg_layer.frames[0], run.masks[0], run.backends, config.prompt)
    init_set = init_background(filled, run.backends, run.seen_view, hyper, config.prompt,
                               config.sds_noise_ratio, generator=substream(run.seed, 'bg-init'),
                               recorder=run.recorder('bg-init'), depth=depth)
    # the foreground hole of every frame shows the filled first frame
    reference = make_pseudo_video(VideoBundle(run.bg_layer.frames), run.masks, filled)
    bundle = start_background(init_set, reference, run.seen_view, hyper,
                              seed=run.seed, generator=substream(run.seed, 'bg-loop-0'),
                              recorder=run.recorder('bg-loop-0'))
    bundle.save(_loop_dir(run, 0))


def _loop_dir(run, loop_index):
    return run.path('background', 'loop_%d' % loop_index)


def _background_loader(loop_index):
    def load_loop(run, skipped):
        run.background = BackgroundBundle.load(_loop_dir(run, loop_index))
    return load_loop


def _bg_loop_stage(loop_index):
    def run_loop(run):
        config = run.config
        stage = 'bg-loop-%d' % loop_index
        bundle = outpaint_loop(run.background, run.schedule.loops[loop_index - 1],
                               config.loop_prompt(loop_index), run.backends, config.background, loop_index,
                               config.strength, config.sds_noise_ratio, seed=run.seed,
                               recorder=run.recorder(stage))
        bundle.save(_loop_dir(run, loop_index))
    return run_loop


def _run_composition(run):
    scene = compose_scene(run.foreground, run.background, run.reference.frames[0], run.masks, run.backends,
                          run.config.trajectory_rule, run.metadata())
    scene.save(run.out_dir)


def _load_composition(run, skipped):
    run.scene = SceneBundle.load(run.out_dir)


def _stages(schedule):
    stages = [
        ('reference-video', _run_reference_video, _load_reference_video),
        ('segmentation', _run_segmentation, _load_segmentation),
        ('fg-static', _run_fg_static, _load_fg_static),
        ('fg-motion', _run_fg_motion, _load_fg_motion),
        ('fg-trajectory', _run_fg_trajectory, _load_fg_trajectory),
        ('bg-init', _run_bg_init, _background_loader(0)),
    ]
    for loop_index in range(1, len(schedule.loops) + 1):
        stages.append(('bg-loop-%d' % loop_index, _bg_loop_stage(loop_index), _background_loader(loop_index)))
    stages.append(('composition', _run_composition, _load_composition))
    return stages


def _config_document(config):
    return config.model_dump(mode='json')


def _open_manifest(run, resume):
    manifest_path = run.path('manifest.json')
    config_path = run.path('config.json')
    names = stage_names(run.schedule)
    document = _config_document(run.config)

    if resume and os.path.exists(manifest_path):
        try:
            with open(config_path) as f:
                stored = json.load(f)
        except (IOError, OSError, ValueError) as e:
            raise SceneLoadError('Cannot read the configuration of run %s: %s' % (run.out_dir, e))
        if stored != document:
            raise InvalidConfig('Run directory %s holds a different configuration; '
                                'rerun without resume to overwrite it' % run.out_dir)
        manifest = RunManifest.load(manifest_path)
        if manifest.names != names:
            raise SceneLoadError('Run manifest %s lists stages %r, expected %r' % (
                manifest_path, manifest.names, names))
        return manifest

    with open(config_path, 'w') as f:
        json.dump(document, f, indent=1, sort_keys=True)
    return RunManifest(names)


def run(config, out_dir, resume=True):
    """
    Run the whole pipeline into out_dir and return the composed scene.

    Every stage saves its artifacts and the next stage reads them back
    from disk, so a resumed run sees exactly the state a full run does.
    With resume, the leading stages the manifest records as done are
    loaded instead of recomputed; everything after the first stage that
    runs is recomputed.

    A failing stage is recorded in manifest.json with its error and
    raised as StageFailure; the artifacts of earlier stages stay on disk.

    :param config: PipelineConfig
    :param out_dir: Run directory; created when missing.
    :rtype: SceneBundle
    """
    if not os.path.isdir(out_dir):
        os.makedirs(out_dir)
    losses_dir = os.path.join(out_dir, 'losses')
    if not os.path.isdir(losses_dir):
        os.makedirs(losses_dir)

    state = _Run(config, out_dir)
    manifest = _open_manifest(state, resume)
    manifest_path = state.path('manifest.json')
    manifest.save(manifest_path)
    logging.info('Running pipeline into %s: %d stages, seed %d', out_dir, len(manifest.stages), config.seed)

    recompute = False
    for name, run_stage, load_stage in _stages(state.schedule):
        if not recompute and manifest.is_done(name):
            try:
                load_stage(state, True)
                logging.info('Stage %s already done, loaded its artifacts', name)
                continue
            except SceneLoadError as e:
                logging.warning('Stage %s is marked done but cannot be loaded, recomputing: %r', name, e)

        recompute = True
        manifest.mark(name, 'running', error=None, wall_clock=None, losses=[])
        manifest.save(manifest_path)
        state.recorders = []
        start = time.time()
        try:
            run_stage(state)
            load_stage(state, False)
        except Exception as e:
            elapsed = time.time() - start
            manifest.mark(name, 'failed', wall_clock=elapsed, error='%s: %s' % (type(e).__name__, e))
            manifest.save(manifest_path)
            logging.warning('Stage %s failed after %.1fs: %r', name, elapsed, e)
            if isinstance(e, StageFailure) and e.stage == name:
                raise
            raise StageFailure('Stage %s failed: %s' % (name, e), stage=name) from e

        losses = []
        for recorder in state.recorders:
            path = os.path.join('losses', '%s.json' % recorder.stage)
            recorder.save(state.path(path))
            losses.append(path)
        elapsed = time.time() - start
        manifest.mark(name, 'done', wall_clock=elapsed, losses=losses)
        manifest.save(manifest_path)
        logging.info('Stage %s done in %.1fs', name, elapsed)

    return state.scene


def parse_cameras(selection, scene, resolution):
    """
    Cameras for a render request: "schedule" (reference plus outpaint
    cameras), "orbit" (a full azimuth sweep at the reference elevation),
    a list of (elevation, azimuth) pairs, or a string "e:a,e:a,...".
    """
    reference = scene.reference_camera.with_resolution(resolution)
    if isinstance(selection, str):
        if selection == 'schedule':
            schedule = build_schedule(scene.metadata.get('schedule') or {})
            return [camera.with_resolution(resolution) for camera in schedule.cameras]
        if selection == 'orbit':
            step = 360. / ORBIT_VIEWS
            return [reference.with_pose(reference.elevation, reference.azimuth + i * step)
                    for i in range(ORBIT_VIEWS)]
        try:
            selection = [tuple(float(x) for x in item.split(':')) for item in selection.split(',') if item.strip()]
        except ValueError:
            raise InvalidArgument('Unknown camera selection %r' % selection)

    cameras = []
    for pose in selection:
        try:
            elevation, azimuth = pose
        except (TypeError, ValueError):
            raise InvalidArgument('Camera pose must be an (elevation, azimuth) pair, got %r' % (pose,))
        cameras.append(make_lookat_camera(float(elevation), float(azimuth), reference.radius, reference.fovy,
                                          reference.near, reference.far, resolution))
    if not cameras:
        raise InvalidArgument('Camera selection %r selects no camera' % (selection,))
    return cameras


def parse_times(selection, n_frames):
    """1-based frame indices for "all", a list of integers or a string "1,2,5"."""
    if isinstance(selection, str):
        if selection == 'all':
            return list(range(1, n_frames + 1))
        try:
            selection = [int(x) for x in selection.split(',') if x.strip()]
        except ValueError:
            raise InvalidArgument('Unknown time selection %r' % selection)
    times = [int(t) for t in selection]
    for t in times:
        if not 1 <= t <= n_frames:
            raise InvalidArgument('Frame index %d is outside [1, %d]' % (t, n_frames))
    return times


def _reference_frames(scene_dir, resolution):
    path = os.path.join(scene_dir, 'reference')
    if not os.path.exists(os.path.join(path, 'frames.npy')):
        return None
    frames = VideoBundle.load(path).frames
    return [resize_frame(frame, resolution) for frame in frames]


def render_outputs(scene_dir, cameras='schedule', times='all', out_dir=None, resolution=None, fps=8):
    """
    Render the composed scene at every requested camera and time into
    out_dir/<camera name>/frame_<t>.png plus one MP4 per camera.

    When a reference camera is rendered and the run directory still
    holds the reference video, the per-frame PSNR against it is written
    to out_dir/psnr.json.

    :return: Mapping of camera name to the written PNG paths.
    """
    scene = SceneBundle.load(scene_dir)
    if resolution is None:
        resolution = scene.metadata.get('output_resolution') or scene.reference_camera.resolution[0]
    if isinstance(resolution, int):
        resolution = (resolution, resolution)
    resolution = tuple(int(x) for x in resolution)
    camera_list = parse_cameras(cameras, scene, resolution)
    frame_indices = parse_times(times, scene.n_frames)
    out_dir = out_dir or os.path.join(scene_dir, 'renders')
    if not os.path.isdir(out_dir):
        os.makedirs(out_dir)

    reference_key = scene.reference_camera.pose_key
    reference_frames = None
    report = {}
    written = {}
    for camera in camera_list:
        directory = os.path.join(out_dir, camera.name)
        if not os.path.isdir(directory):
            os.makedirs(directory)
        frames, paths = [], []
        for t in frame_indices:
            frame = render_composed(scene, camera, t)
            path = os.path.join(directory, 'frame_%04d.png' % t)
            save_png(frame, path)
            frames.append(frame)
            paths.append(path)
        written[camera.name] = paths
        if frames:
            write_mp4(frames, os.path.join(out_dir, '%s.mp4' % camera.name), fps=fps)

        if camera.pose_key == reference_key and frames:
            if reference_frames is None:
                reference_frames = _reference_frames(scene_dir, resolution)
            if reference_frames is not None:
                report[camera.name] = psnr_report(frames, [reference_frames[t - 1] for t in frame_indices],
                                                  frame_indices)
        logging.info('Rendered %d frames at %s', len(frames), camera.name)

    if report:
        with open(os.path.join(out_dir, 'psnr.json'), 'w') as f:
            json.dump(report, f, indent=1, sort_keys=True, allow_nan=False)
    return written


def psnr_report(frames, references, frame_indices):
    """
    Per-frame PSNR keyed by 1-based frame index, plus their mean. Frames
    identical to their reference have no finite PSNR and are stored as
    None; the mean covers the finite values only and is None when there
    are none.
    """
    per_frame = {}
    for t, frame, reference in zip(frame_indices, frames, references):
        value = psnr(frame, reference)
        per_frame[str(t)] = value if math.isfinite(value) else None
    finite = [v for v in per_frame.values() if v is not None]
    return {
        'per_frame': per_frame,
        'mean': float(np.mean(finite)) if finite else None,
        'identical_frames': len(per_frame) - len(finite),
    }


class ValidationReport(object):
    def __init__(self, scene_dir):
        """Named checks of a persisted scene; each one passed or failed with a detail message."""
        self.scene_dir = scene_dir
        self.checks = []

    def check(self, name, passed, detail=''):
        self.checks.append((name, bool(passed), detail))
        if not passed:
            logging.warning('Validation check %s failed: %s', name, detail)
        return passed

    @property
    def ok(self):
        return all(passed for _, passed, _ in self.checks)

    @property
    def failures(self):
        return [name for name, passed, _ in self.checks if not passed]

    def to_dict(self):
        return {'scene_dir': self.scene_dir, 'ok': self.ok,
                'checks': [{'name': n, 'passed': p, 'detail': d} for n, p, d in self.checks]}


def _ply_columns(path):
    try:
        vertex = PlyData.read(path)['vertex']
        return dict((name, np.asarray(vertex[name], dtype=np.float64))
                    for name in ('qw', 'qx', 'qy', 'qz', 'sx', 'sy', 'sz'))
    except (IOError, OSError, KeyError, ValueError) as e:
        raise SceneLoadError('Cannot read Gaussians from %s: %s' % (path, e))


def _check_quaternions(report, name, path):
    columns = _ply_columns(path)
    norms = np.sqrt(columns['qw'] ** 2 + columns['qx'] ** 2 + columns['qy'] ** 2 + columns['qz'] ** 2)
    worst = float(np.abs(norms - 1.).max()) if len(norms) else 0.
    report.check(name, worst <= 1e-4, 'largest deviation of a quaternion norm from 1 is %.3g' % worst)
    return columns


def _brute_depth_range(values, region):
    low, high = None, None
    for row in range(values.shape[0]):
        for col in range(values.shape[1]):
            if region[row, col]:
                v = float(values[row, col])
                low = v if low is None or v < low else low
                high = v if high is None or v > high else high
    return low, high


def _brute_bbox_width(mask):
    columns = [col for col in range(mask.shape[1]) if any(bool(mask[row, col]) for row in range(mask.shape[0]))]
    return columns[-1] - columns[0] if columns else None


def _check_composition(report, scene):
    """Recompute the composition parameters from the stored raw inputs."""
    params = scene.params
    inputs = scene.composition_inputs
    try:
        bg_values, bg_valid = inputs['bg_depth'], inputs['bg_valid'].astype(bool)
        fg_mask, rendered_mask = inputs['fg_mask'].astype(bool), inputs['rendered_mask'].astype(bool)
        shifts, scales = inputs['trajectory_shifts'], inputs['trajectory_scales']
    except KeyError as e:
        raise SceneLoadError('composition_inputs.npz is missing %s' % e)
    ref_values, ref_valid = scene.ref_depth.values, scene.ref_depth.valid_mask

    region = ~fg_mask & bg_valid & ref_valid
    bg_low, bg_high = _brute_depth_range(bg_values, region)
    ref_low, ref_high = _brute_depth_range(ref_values, region)
    if bg_low is None or ref_high == ref_low:
        report.check('delta-recomputed', False, 'depth range ratio is undefined for the stored inputs')
        return
    delta = (bg_high - bg_low) / (ref_high - ref_low)
    report.check('delta-recomputed', delta == params.delta, 'stored %r, recomputed %r' % (params.delta, delta))

    fg_region = fg_mask & ref_valid
    values = [Rational(float(ref_values[r, c])) for r, c in zip(*np.nonzero(fg_region))]
    exact_mean = float(sum(values, Rational(0)) / len(values))
    ref_min, _ = _brute_depth_range(ref_values, ref_valid)
    bg_min, _ = _brute_depth_range(bg_values, bg_valid)
    depth_shift = (exact_mean - ref_min) * delta + bg_min
    tolerance = 4 * math.ulp(abs(depth_shift)) + 4 * math.ulp(abs(delta * exact_mean))
    report.check('depth-shift-recomputed', abs(depth_shift - params.depth_shift) <= tolerance,
                 'stored %r, recomputed %r' % (params.depth_shift, depth_shift))

    gt_width, rendered_width = _brute_bbox_width(fg_mask), _brute_bbox_width(rendered_mask)
    if not gt_width or not rendered_width:
        report.check('epsilon-recomputed', False, 'a stored mask has a zero-width bounding box')
        return
    epsilon = gt_width / float(rendered_width)
    report.check('epsilon-recomputed', epsilon == params.epsilon,
                 'stored %r, recomputed %r' % (params.epsilon, epsilon))

    composed = params.composed_trajectory
    expected = [(float(shifts[0][0]), float(shifts[0][1]))]
    for t in range(1, len(shifts)):
        a, b = (t - 1, t) if params.trajectory_rule == 'per_interval' else (0, 1)
        step = (float(shifts[b][0]) - float(shifts[a][0]), float(shifts[b][1]) - float(shifts[a][1]))
        expected.append((epsilon * step[0] + expected[-1][0], epsilon * step[1] + expected[-1][1]))
    stored = [tuple(float(x) for x in row) for row in composed.shifts]
    report.check('trajectory-recomputed', stored == expected,
                 'composed shifts differ from the rescaled trajectory')
    expected_scales = [epsilon * float(s) for s in scales]
    report.check('scales-recomputed', [float(s) for s in composed.scales] == expected_scales,
                 'composed scales differ from the rescaled trajectory')

    if scene.foreground is not None:
        trajectory = scene.foreground.trajectory
        report.check('trajectory-inputs', np.array_equal(trajectory.shifts, shifts)
                     and np.array_equal(trajectory.scales, scales),
                     'stored raw trajectory differs from the foreground trajectory')


def validate_scene(scene_dir):
    """
    Check the invariants of a persisted scene and recompute the
    composition parameters from the stored raw inputs.

    Missing or malformed files raise SceneLoadError.

    :rtype: ValidationReport
    """
    if not os.path.isdir(scene_dir):
        raise SceneLoadError('Scene directory %s does not exist' % scene_dir)
    scene = SceneBundle.load(scene_dir)
    report = ValidationReport(scene_dir)
    n = scene.n_frames
    params = scene.params

    bg = _check_quaternions(report, 'bg-quaternion-norms', os.path.join(scene_dir, 'bg', 'bg_gaussians.ply'))
    max_scale = scene.background.gaussians.max_scale
    if max_scale is not None:
        largest = float(np.exp(np.stack([bg['sx'], bg['sy'], bg['sz']])).max()) if len(bg['sx']) else 0.
        report.check('bg-scale-truncation', largest <= max_scale * (1 + 1e-6),
                     'largest activated scale %.6g, limit %.6g' % (largest, max_scale))
    for view in scene.background.trained_views:
        report.check('view-length-%s' % view.name, view.video.n_frames == n,
                     '%d frames, expected %d' % (view.video.n_frames, n))

    report.check('delta-positive', params.delta > 0, 'delta is %r' % params.delta)
    report.check('epsilon-positive', params.epsilon > 0, 'epsilon is %r' % params.epsilon)

    if scene.foreground is not None:
        _check_quaternions(report, 'fg-quaternion-norms', os.path.join(scene_dir, 'fg', 'fg_gaussians.ply'))
        report.check('fg-frozen', scene.foreground.gaussians.frozen, 'foreground Gaussians are not frozen')
        report.check('trajectory-length', len(scene.foreground.trajectory) == n,
                     '%d entries, expected %d' % (len(scene.foreground.trajectory), n))
        report.check('composed-trajectory-length', len(params.composed_trajectory) == n,
                     '%d entries, expected %d' % (len(params.composed_trajectory), n))
        report.check('composed-scales-positive', bool(np.all(params.composed_trajectory.scales > 0)),
                     'a composed scale is not positive')
        _check_composition(report, scene)

    logging.info('Validated %s: %d checks, %d failed', scene_dir, len(report.checks), len(report.failures))
    return report
