import os

import numpy as np
import torch

from scene_completer.composer import bbox_width
from scene_completer.config import FieldHyper, ForegroundConfig, GaussianHyper, MotionHyper, TrajectoryHyper
from scene_completer.deformation import DeformationField
from scene_completer.errors import DegenerateMask, InvalidArgument, MissingForeground
from scene_completer.foreground import (
    ForegroundBundle, Trajectory, normalize_frames, optimize_motion, reconstruct_static, refine_trajectory,
    sample_sds_camera, unwarp_layer, warp_layer)
from scene_completer.gaussians import GaussianSet
from scene_completer.media import VideoBundle
from scene_completer.mock import make_mock_suite
from scene_completer.renderer import render
from scene_completer.test.scene_tester import SceneTestCase, random_gaussians, slow, tiny_camera
from scene_completer.training import LossRecorder


def _blob(count=6, seed=0):
    """A compact opaque cluster around the origin."""
    return random_gaussians(count, seed=seed, spread=0.2, scale=(0.1, 0.2), opacity=(0.8, 0.95)).frozen_copy()


def _disc_frame(resolution=32, radius=6):
    y, x = np.mgrid[0:resolution, 0:resolution] + 0.5
    inside = (x - resolution / 2.) ** 2 + (y - resolution / 2.) ** 2 < radius ** 2
    return np.where(inside[..., None], np.float32([0.9, 0.2, 0.1]), np.float32(0.)), inside


def _placed_video(layers, trajectory):
    placed = warp_layer(layers, torch.as_tensor(trajectory.shifts, dtype=torch.float32),
                        torch.as_tensor(trajectory.scales, dtype=torch.float32))
    return VideoBundle(placed[..., :3].numpy(), masks=placed[..., 3].numpy() > 0.5)


class TestTrajectory(SceneTestCase):
    def test_validation(self):
        with self.assertRaises(InvalidArgument):
            Trajectory([[1., 2.], [3., 4.]], [1.])
        with self.assertRaises(InvalidArgument):
            Trajectory([[1., 2.]], [0.])

    def test_save_and_load(self):
        path = os.path.join(self.make_tempdir(), 'trajectory.json')
        trajectory = Trajectory([[10.25, 12.], [11., 13.5]], [0.5, 0.625])
        trajectory.save(path)
        loaded = Trajectory.load(path)
        self.assertTrue(np.array_equal(loaded.shifts, trajectory.shifts))
        self.assertTrue(np.array_equal(loaded.scales, trajectory.scales))


class TestWarp(SceneTestCase):
    def test_centered_unit_scale_is_identity(self):
        image = torch.rand(16, 20, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
        self.assertAllClose(warp_layer(image, (10., 8.), 1.), image, atol=1e-12)
        self.assertAllClose(unwarp_layer(image, (10., 8.), 1.), image, atol=1e-12)

    def test_integer_shift(self):
        image = torch.zeros(16, 16, 1, dtype=torch.float64)
        image[8, 8, 0] = 1.
        moved = warp_layer(image, (8. + 3., 8. - 2.), 1.)
        self.assertAllClose(moved[6, 11, 0], 1., atol=1e-12)
        self.assertAllClose(moved.sum(), 1., atol=1e-12)
        self.assertAllClose(unwarp_layer(moved, (11., 6.), 1.), image, atol=1e-12)

    def test_batched_matches_single(self):
        images = torch.rand(2, 12, 12, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
        shifts = torch.tensor([[5., 7.], [6.5, 4.]], dtype=torch.float64)
        scales = torch.tensor([0.5, 1.25], dtype=torch.float64)
        batched = warp_layer(images, shifts, scales)
        for i in range(2):
            self.assertAllClose(batched[i], warp_layer(images[i], shifts[i], scales[i]), atol=1e-12)


class TestNormalizeFrames(SceneTestCase):
    def test_shift_and_scale(self):
        masks = np.zeros((2, 32, 32), dtype=bool)
        masks[0, 4:12, 10:20] = True
        masks[1, 10:30, 2:8] = True
        frames = np.where(masks[..., None], np.float32(0.8), np.float32(0.))
        centered, trajectory = normalize_frames(VideoBundle(frames), masks, canonical_extent=0.8)

        self.assertEqual(trajectory.shifts.tolist(), [[15., 8.], [5., 20.]])
        self.assertEqual(trajectory.scales.tolist(), [9 / 25.6, 19 / 25.6])
        for mask in centered.masks:
            rows, cols = np.nonzero(mask)
            self.assertLessEqual(abs((rows.min() + rows.max() + 1) / 2. - 16.), 1.)
            self.assertLessEqual(abs((cols.min() + cols.max() + 1) / 2. - 16.), 1.)
            size = max(cols.max() - cols.min(), rows.max() - rows.min())
            self.assertLessEqual(abs(size - 25.6), 1.5)

    def test_empty_frame(self):
        masks = np.zeros((3, 16, 16), dtype=bool)
        masks[0, 4:8, 4:8] = True
        masks[2, 4:8, 4:8] = True
        with self.assertRaises(MissingForeground) as context:
            normalize_frames(VideoBundle(np.zeros((3, 16, 16, 3))), masks)
        self.assertEqual(context.exception.frame_index, 2)

    def test_single_pixel_frame(self):
        masks = np.zeros((2, 16, 16), dtype=bool)
        masks[0, 4:8, 4:8] = True
        masks[1, 9, 3] = True
        with self.assertRaises(DegenerateMask):
            normalize_frames(VideoBundle(np.zeros((2, 16, 16, 3))), masks)

    def test_box_size_matches_composition_width(self):
        mask = np.zeros((32, 32), dtype=bool)
        mask[6:10, 3:21] = True
        _, trajectory = normalize_frames(VideoBundle(np.zeros((1, 32, 32, 3))), mask[None], canonical_extent=0.5)
        self.assertEqual(trajectory.scales[0] * 0.5 * 32, bbox_width(mask))
        self.assertEqual(trajectory.shifts[0].tolist(), [12., 8.])


class TestReconstructStatic(SceneTestCase):
    def test_small_fit(self):
        frame, mask = _disc_frame()
        hyper = ForegroundConfig(static=GaussianHyper(iterations=6, initial_points=60, densification_interval=2,
                                                      densification_threshold=1e-6))
        recorder = LossRecorder('fg-static', 0)
        gaussians = reconstruct_static(frame, tiny_camera(), make_mock_suite(), hyper, mask=mask,
                                       generator=torch.Generator().manual_seed(0), recorder=recorder)
        self.assertTrue(gaussians.frozen)
        self.assertGreater(len(gaussians), 60)
        self.assertEqual(len(recorder.history), 6)
        self.assertEqual(sorted(recorder.history[0]), ['iteration', 'mask', 'rgb', 'sds', 'total'])

    def test_resolution_mismatch(self):
        frame, _ = _disc_frame(16)
        with self.assertRaises(InvalidArgument):
            reconstruct_static(frame, tiny_camera(), make_mock_suite(), ForegroundConfig())

    def test_sds_cameras(self):
        hyper = ForegroundConfig()
        generator = torch.Generator().manual_seed(0)
        seen = tiny_camera(elevation=10.)
        for _ in range(20):
            camera = sample_sds_camera(seen, hyper, generator)
            self.assertLessEqual(abs(camera.elevation - 10.), 15.)
            self.assertAlmostEqual(camera.azimuth / 10., round(camera.azimuth / 10.))
            self.assertEqual(camera.radius, seen.radius)


class TestOptimizeMotion(SceneTestCase):
    def test_loss_components(self):
        frame, mask = _disc_frame()
        video = VideoBundle(np.stack([frame] * 3), masks=np.stack([mask] * 3))
        hyper = ForegroundConfig(motion=MotionHyper(iterations=3, batch_size=2, rigidity_k=4,
                                                    field=FieldHyper(width=16)))
        recorder = LossRecorder('fg-motion', 0)
        field = optimize_motion(_blob(12), video, video.masks, tiny_camera(), make_mock_suite(), hyper,
                                generator=torch.Generator().manual_seed(0), recorder=recorder, seed=7)
        self.assertEqual(field.config['width'], 16)
        self.assertEqual(field.config['seed'], 7)
        self.assertEqual(len(recorder.history), 3)
        for entry in recorder.history:
            self.assertEqual(entry['total'], entry['sds'] + entry['vid'] + entry['rigid'])

    def test_needs_frozen_set(self):
        frame, mask = _disc_frame()
        video = VideoBundle(np.stack([frame] * 2), masks=np.stack([mask] * 2))
        with self.assertRaises(InvalidArgument):
            optimize_motion(random_gaussians(12), video, video.masks, tiny_camera(), make_mock_suite(),
                            ForegroundConfig())


class TestRefineTrajectory(SceneTestCase):
    def setUp(self):
        self.gaussians = _blob()
        self.camera = tiny_camera()
        out = render(self.gaussians, self.camera)
        layer = torch.cat([out.rgb, out.alpha[..., None]], dim=-1).detach()
        self.layers = torch.stack([layer, layer])
        self.truth = Trajectory([[14., 17.], [18., 15.]], [0.6, 0.7])
        self.video = _placed_video(self.layers, self.truth)

    def test_loss_decreases(self):
        start = Trajectory(self.truth.shifts + [[2., -1.5], [-1.5, 2.]], self.truth.scales)
        recorder = LossRecorder('fg-trajectory', 0)
        positions = self.gaussians.positions.clone()
        refined = refine_trajectory(self.gaussians, None, self.camera, self.video, self.video.masks, start,
                                    TrajectoryHyper(iterations=30), recorder=recorder)
        losses = recorder.series('total')
        self.assertEqual(len(losses), 30)
        self.assertLess(losses[-1], losses[0])
        before = np.abs(start.shifts - self.truth.shifts).sum()
        after = np.abs(refined.shifts - self.truth.shifts).sum()
        self.assertLess(after, before)
        self.assertTrue(torch.equal(self.gaussians.positions, positions))

    def test_frame_count_mismatch(self):
        with self.assertRaises(InvalidArgument):
            refine_trajectory(self.gaussians, None, self.camera, self.video, self.video.masks,
                              Trajectory([[16., 16.]], [1.]))

    @slow
    def test_recovers_mock_path(self):
        start = Trajectory(self.truth.shifts + [[1., -1.], [-1., 1.]], self.truth.scales * 1.05)
        refined = refine_trajectory(self.gaussians, None, self.camera, self.video, self.video.masks, start,
                                    TrajectoryHyper(iterations=300, lr=0.05))
        self.assertAllClose(refined.shifts, self.truth.shifts, atol=0.5)
        self.assertAllClose(refined.scales, self.truth.scales, atol=0.05)


class TestForegroundBundle(SceneTestCase):
    def test_save_and_load(self):
        directory = self.make_tempdir()
        bundle = ForegroundBundle(_blob(), DeformationField(width=8, seed=2),
                                  Trajectory([[16., 16.], [17., 15.]], [0.5, 0.55]), tiny_camera())
        bundle.save(directory)
        loaded = ForegroundBundle.load(directory)
        self.assertEqual(loaded.n_frames, 2)
        self.assertEqual(loaded.seen_view, bundle.seen_view)
        self.assertTrue(loaded.gaussians.frozen)
        self.assertTrue(torch.equal(loaded.gaussians.positions, bundle.gaussians.positions))
        self.assertEqual(loaded.trajectory.to_dict(), bundle.trajectory.to_dict())
        self.assertEqual(loaded.field.config, bundle.field.config)

    def test_needs_frozen_set(self):
        with self.assertRaises(InvalidArgument):
            ForegroundBundle(random_gaussians(3), DeformationField(width=8), Trajectory([[1., 1.]], [1.]),
                             tiny_camera())
