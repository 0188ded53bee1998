import numpy as np
import torch

from scene_completer.background import (
    BackgroundBundle, TrainedView, fill_foreground_hole, init_background, make_pseudo_video, optimize_dynamic,
    outpaint_loop, outpaint_view, progressive_outpaint, refine_static, start_background)
from scene_completer.config import BackgroundConfig, DynamicHyper, FieldHyper, GaussianHyper
from scene_completer.deformation import DeformationField
from scene_completer.errors import InvalidArgument, StageFailure
from scene_completer.gaussians import GaussianSet
from scene_completer.geometry import DepthMap, build_schedule, lift_frame
from scene_completer.media import VideoBundle
from scene_completer.mock import make_mock_suite
from scene_completer.renderer import render
from scene_completer.test.scene_tester import SceneTestCase, random_gaussians, smooth_frame, tiny_camera


def _hyper(iterations=2, fusion_iterations=2, per_view=2):
    return BackgroundConfig(
        static=GaussianHyper(iterations=iterations, initial_opacity=0.9, max_scaling=0.2, sds_weight=5e-6,
                             mask_weight=0., densification_interval=1000),
        fusion_iterations=fusion_iterations,
        dynamic=DynamicHyper(iterations_per_view=per_view,
                             field=FieldHyper(width=16, use_grid=True, grid_resolution=[4], time_resolution=3,
                                              grid_features=2)))


def _lifted(resolution=16, seed=0):
    frame = smooth_frame(resolution, seed=seed)
    y = (np.arange(resolution) + 0.5)[:, None] / resolution
    depth = DepthMap(np.broadcast_to(4. - y, (resolution, resolution)).astype(np.float32))
    return frame, lift_frame(frame, depth, tiny_camera(resolution), opacity=0.9, max_scale=0.2)


def _video(frame, n_frames=2):
    return VideoBundle(np.stack([frame] * n_frames))


class TestPseudoVideo(SceneTestCase):
    def setUp(self):
        rng = np.random.default_rng(0)
        self.rendered = VideoBundle(rng.uniform(size=(3, 8, 8, 3)))
        self.masks = np.zeros((3, 8, 8), dtype=bool)
        self.masks[:, :, 5:] = True
        self.masks[2, 0, 0] = True
        self.inpainted = rng.uniform(size=(8, 8, 3)).astype(np.float32)

    def test_paste(self):
        pseudo = make_pseudo_video(self.rendered, self.masks, self.inpainted)
        self.assertTrue(np.array_equal(pseudo.frames[0], self.inpainted))
        for t in (1, 2):
            mask = self.masks[t]
            self.assertTrue(np.array_equal(pseudo.frames[t][mask], self.inpainted[mask]))
            self.assertTrue(np.array_equal(pseudo.frames[t][~mask], self.rendered.frames[t][~mask]))
        self.assertTrue(np.array_equal(pseudo.masks, self.masks))

    def test_empty_masks_keep_the_rendering(self):
        masks = np.zeros((3, 8, 8), dtype=bool)
        pseudo = make_pseudo_video(self.rendered, masks, self.rendered.frames[0])
        self.assertTrue(np.array_equal(pseudo.frames, self.rendered.frames))

    def test_shape_mismatch(self):
        with self.assertRaises(InvalidArgument):
            make_pseudo_video(self.rendered, self.masks[:2], self.inpainted)
        with self.assertRaises(InvalidArgument):
            make_pseudo_video(self.rendered, np.zeros((3, 4, 4), dtype=bool), self.inpainted)


class TestInitBackground(SceneTestCase):
    def test_one_gaussian_per_pixel(self):
        frame = smooth_frame(16, seed=4)
        gaussians = init_background(frame, make_mock_suite(), tiny_camera(16), _hyper(),
                                    prompt='a desk', generator=torch.Generator().manual_seed(0))
        self.assertEqual(len(gaussians), 16 * 16)
        self.assertEqual(gaussians.max_scale, 0.2)
        self.assertLessEqual(float(gaussians.scales.max()), 0.2 + 1e-6)
        self.assertFalse(gaussians.frozen)

    def test_resolution_mismatch(self):
        with self.assertRaises(InvalidArgument):
            init_background(smooth_frame(8), make_mock_suite(), tiny_camera(16), _hyper())

    def test_depth_must_match_the_frame(self):
        with self.assertRaises(InvalidArgument):
            init_background(smooth_frame(16), make_mock_suite(), tiny_camera(16), _hyper(),
                            depth=DepthMap(np.ones((8, 8))))


class TestForegroundHole(SceneTestCase):
    def setUp(self):
        self.frame = smooth_frame(16, seed=2)
        self.mask = np.zeros((16, 16), dtype=bool)
        self.mask[5:11, 6:12] = True
        self.segmented = np.where(self.mask[..., None], np.float32(0.), self.frame)

    def test_fill(self):
        filled, depth = fill_foreground_hole(self.segmented, self.mask, make_mock_suite())
        self.assertTrue(np.array_equal(filled[~self.mask], self.segmented[~self.mask]))
        # the frame is a linear ramp, which harmonic filling reproduces
        self.assertAllClose(filled[self.mask], self.frame[self.mask], atol=1e-3)
        self.assertTrue(depth.valid_mask.all())
        self.assertTrue(bool((depth.values > 0).all()))

    def test_no_foreground(self):
        filled, depth = fill_foreground_hole(self.frame, np.zeros((16, 16), dtype=bool), make_mock_suite())
        self.assertTrue(np.array_equal(filled, self.frame))
        self.assertEqual(depth.values.shape, (16, 16))

    def test_no_dark_outline(self):
        suite, camera = make_mock_suite(), tiny_camera(16)
        filled, depth = fill_foreground_hole(self.segmented, self.mask, suite)
        gaussians = init_background(filled, suite, camera, _hyper(), depth=depth,
                                    generator=torch.Generator().manual_seed(0))
        rgb = render(gaussians, camera).rgb.detach().numpy()
        self.assertGreater(float(rgb[self.mask].min()), 0.2)
        self.assertLess(float(np.abs(rgb[self.mask] - self.frame[self.mask]).mean()), 0.1)


class TestRefineStatic(SceneTestCase):
    def test_frozen_rows_do_not_move(self):
        gaussians = random_gaussians(40, seed=5)
        frozen_rows = np.arange(40) < 25
        before = dict((k, v.detach().clone()) for k, v in gaussians.raw_tensors().items())
        refined = refine_static(gaussians, tiny_camera(), smooth_frame(32), make_mock_suite(), _hyper(),
                                iterations=3, frozen_rows=frozen_rows, densify=False,
                                generator=torch.Generator().manual_seed(0))
        after = refined.raw_tensors()
        for name in ('xyz', 'rotation', 'scaling', 'colors'):
            self.assertTrue(torch.equal(after[name][:25], before[name][:25]), name)
        self.assertFalse(torch.equal(after['xyz'][25:], before['xyz'][25:]))
        self.assertFalse(torch.equal(after['opacity'][:25], before['opacity'][:25]))

    def test_frozen_rows_forbid_densification(self):
        with self.assertRaises(InvalidArgument):
            refine_static(random_gaussians(4), tiny_camera(), smooth_frame(32), make_mock_suite(), _hyper(),
                          frozen_rows=np.ones(4, dtype=bool))


class TestDynamic(SceneTestCase):
    def test_static_set_is_unchanged(self):
        frame, gaussians = _lifted()
        bundle = start_background(gaussians, _video(frame), tiny_camera(16), _hyper(), seed=1,
                                  generator=torch.Generator().manual_seed(0))
        self.assertEqual(bundle.loop_index, 0)
        self.assertEqual(len(bundle.trained_views), 1)

        positions = bundle.gaussians.positions.detach().clone()
        planes = [p.detach().clone() for p in bundle.field.grid_parameters()]
        optimize_dynamic(bundle, _hyper(), iterations=3, generator=torch.Generator().manual_seed(1))
        self.assertTrue(torch.equal(bundle.gaussians.positions, positions))
        self.assertTrue(any(not torch.equal(a, b) for a, b in zip(planes, bundle.field.grid_parameters())))


class TestOutpaint(SceneTestCase):
    def test_outpaint_view(self):
        frame, gaussians = _lifted()
        field = DeformationField(width=8, use_grid=True, grid_resolution=[4], time_resolution=3, grid_features=2)
        bundle = BackgroundBundle(gaussians, field, [TrainedView(tiny_camera(16), _video(frame))])
        camera = tiny_camera(16, azimuth=30.)
        result = outpaint_view(bundle, camera, 'a desk', make_mock_suite(), _hyper(), strength=0.7,
                               generator=torch.Generator().manual_seed(0))

        self.assertTrue(result.masks[0].any())
        self.assertEqual(len(result.fragment), int(result.masks[0].sum()))
        self.assertEqual(len(result.expanded), len(gaussians) + len(result.fragment))
        self.assertTrue(torch.equal(result.expanded.positions[:len(gaussians)], gaussians.positions))
        self.assertEqual(result.training_video.n_frames, 2)
        self.assertTrue(np.array_equal(result.inpainted_first, result.training_video.frames[0]))

    def test_loop_failure_names_the_stage(self):
        field = DeformationField(width=8)
        frame = smooth_frame(16)
        bundle = BackgroundBundle(GaussianSet.empty(), field, [TrainedView(tiny_camera(16), _video(frame))])
        with self.assertRaises(StageFailure) as context:
            outpaint_loop(bundle, [tiny_camera(16, azimuth=20.)], 'a desk', make_mock_suite(), _hyper(), 1)
        self.assertEqual(context.exception.stage, 'bg-loop-1')

    def test_progressive_outpaint(self):
        frame, gaussians = _lifted()
        schedule = build_schedule({'resolution': 16, 'loops': [[[0., 30.]], [[0., -30.]]]})
        snapshots = []

        def on_loop(bundle, loop_index):
            snapshots.append((loop_index, len(bundle.gaussians), len(bundle.trained_views)))

        bundle = progressive_outpaint(gaussians, _video(frame), schedule, 'a desk', make_mock_suite(), _hyper(),
                                      loop_prompts=['a desk', 'a shelf'], on_loop_complete=on_loop)
        self.assertEqual([s[0] for s in snapshots], [0, 1, 2])
        self.assertEqual([s[2] for s in snapshots], [1, 2, 3])
        self.assertEqual(snapshots[0][1], len(gaussians))
        self.assertGreater(snapshots[1][1], snapshots[0][1])
        self.assertEqual(bundle.loop_index, 2)
        self.assertEqual([v.camera.pose_key for v in bundle.trained_views],
                         [c.pose_key for c in schedule.cameras])


class TestBackgroundBundle(SceneTestCase):
    def test_save_and_load(self):
        directory = self.make_tempdir()
        frame, gaussians = _lifted()
        field = DeformationField(width=8, use_grid=True, grid_resolution=[4], time_resolution=3, grid_features=2)
        views = [TrainedView(tiny_camera(16), _video(frame)),
                 TrainedView(tiny_camera(16, azimuth=30.), _video(frame), strength=0.7, loop=1)]
        BackgroundBundle(gaussians, field, views, loop_index=1).save(directory)

        loaded = BackgroundBundle.load(directory)
        self.assertEqual(loaded.loop_index, 1)
        self.assertEqual([v.name for v in loaded.trained_views], [v.name for v in views])
        self.assertEqual(loaded.trained_views[1].strength, 0.7)
        self.assertEqual(loaded.trained_views[1].camera, views[1].camera)
        self.assertTrue(np.array_equal(loaded.reference_view.video.frames, views[0].video.frames))
        self.assertEqual(len(loaded.gaussians), len(gaussians))

    def test_needs_a_view(self):
        with self.assertRaises(InvalidArgument):
            BackgroundBundle(GaussianSet.empty(), DeformationField(width=8), [])
