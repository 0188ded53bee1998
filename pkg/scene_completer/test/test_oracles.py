"""
End-to-end accuracy checks of a full-length pipeline run on the mock world.

These take a long time on CPU and only run with SCENE_COMPLETER_SLOW_TESTS=1.
"""
import os
import shutil
import tempfile

import numpy as np
import torch

from scene_completer.background import BackgroundBundle
from scene_completer.composer import composed_layers, render_composed
from scene_completer.config import parse_config
from scene_completer.deformation import DeformationField, TimeStamp, deform
from scene_completer.driver import run
from scene_completer.gaussians import GaussianSet
from scene_completer.media import VideoBundle
from scene_completer.renderer import render
from scene_completer.test.scene_tester import SceneTestCase, slow


def _mean_l1(gaussians, field, views, n_frames):
    errors = []
    with torch.no_grad():
        for view in views:
            for t in range(1, n_frames + 1):
                rgb = render(deform(gaussians, field, TimeStamp(t, n_frames)), view.camera).rgb
                errors.append(float((rgb - torch.from_numpy(view.video.frames[t - 1])).abs().mean()))
    return float(np.mean(errors))


@slow
class TestMockWorldRun(SceneTestCase):
    @classmethod
    def setUpClass(cls):
        cls.root = tempfile.mkdtemp(prefix='scene-completer-oracle-')
        cls.config = parse_config({'prompt': 'a red figurine on a desk', 'n_frames': 4,
                                   'projection_resolution': 64, 'output_resolution': 64, 'seed': 1})
        cls.run_dir = os.path.join(cls.root, 'run')
        cls.scene = run(cls.config, cls.run_dir)
        cls.n = cls.config.n_frames

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.root, ignore_errors=True)

    def test_static_foreground(self):
        static = GaussianSet.load_ply(os.path.join(self.run_dir, 'fg', 'fg_gaussians.ply'))
        centered = VideoBundle.load(os.path.join(self.run_dir, 'fg', 'centered'))
        with torch.no_grad():
            rgb, _, _ = render(static, self.scene.foreground.seen_view).numpy()
        self.assertPsnrAtLeast(rgb, centered.frames[0], 30.)

    def test_foreground_motion(self):
        foreground = self.scene.foreground
        centered = VideoBundle.load(os.path.join(self.run_dir, 'fg', 'centered'))
        for t in range(1, self.n + 1):
            with torch.no_grad():
                out = render(deform(foreground.gaussians, foreground.field, TimeStamp(t, self.n)),
                             foreground.seen_view)
            self.assertPsnrAtLeast(out.numpy()[0], centered.frames[t - 1], 25., 'frame %d' % t)

    def test_background_views(self):
        background = self.scene.background
        self.assertEqual(len(background.trained_views), 9)
        for view in background.trained_views:
            for t in range(1, self.n + 1):
                with torch.no_grad():
                    out = render(deform(background.gaussians, background.field, TimeStamp(t, self.n)), view.camera)
                rgb, alpha, _ = out.numpy()
                self.assertGreaterEqual(float((alpha >= 0.5).mean()), 0.99, '%s frame %d' % (view.name, t))
                self.assertPsnrAtLeast(rgb, view.video.frames[t - 1], 25., '%s frame %d' % (view.name, t))

    def test_composed_reference_frame(self):
        reference = VideoBundle.load(os.path.join(self.run_dir, 'reference'))
        masks = np.load(os.path.join(self.run_dir, 'reference', 'masks.npy'))
        camera = self.scene.reference_camera
        self.assertPsnrAtLeast(render_composed(self.scene, camera, 1), reference.frames[0], 22.)

        wins = composed_layers(self.scene, camera, 1).fg_wins
        iou = float((wins & masks[0]).sum()) / float((wins | masks[0]).sum())
        self.assertGreaterEqual(iou, 0.7)

    def test_warm_start_beats_a_fresh_field(self):
        loop1 = BackgroundBundle.load(os.path.join(self.run_dir, 'background', 'loop_1'))
        loop2 = BackgroundBundle.load(os.path.join(self.run_dir, 'background', 'loop_2'))
        fresh = DeformationField(aabb=loop1.field.aabb.numpy(), **loop1.field.config)
        warm = _mean_l1(loop2.gaussians, loop1.field, loop2.trained_views, self.n)
        cold = _mean_l1(loop2.gaussians, fresh, loop2.trained_views, self.n)
        self.assertLessEqual(warm, cold)
