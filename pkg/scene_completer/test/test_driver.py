import json
import os
import shutil
import tempfile

import numpy as np
from plyfile import PlyData

from scene_completer.cli import EXIT_INVALID_CONFIG, EXIT_OK, EXIT_VALIDATION_FAILURE, main
from scene_completer.composer import SceneBundle
from scene_completer.driver import (RunManifest, parse_cameras, parse_times, psnr_report, render_outputs, run,
                                    validate_scene)
from scene_completer.errors import InvalidArgument, InvalidConfig
from scene_completer.test.scene_tester import SceneTestCase, tiny_config


def _read_bytes(path):
    with open(path, 'rb') as f:
        return f.read()


class TestPipelineRun(SceneTestCase):
    @classmethod
    def setUpClass(cls):
        cls.root = tempfile.mkdtemp(prefix='scene-completer-run-')
        cls.config = tiny_config()
        cls.run_dir = os.path.join(cls.root, 'run')
        cls.scene = run(cls.config, cls.run_dir)

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.root, ignore_errors=True)

    def copy_run(self, name):
        path = os.path.join(self.root, name)
        shutil.copytree(self.run_dir, path)
        self.addCleanup(shutil.rmtree, path, ignore_errors=True)
        return path

    def test_manifest(self):
        manifest = RunManifest.load(os.path.join(self.run_dir, 'manifest.json'))
        self.assertEqual(manifest.names, ['reference-video', 'segmentation', 'fg-static', 'fg-motion',
                                          'fg-trajectory', 'bg-init', 'bg-loop-1', 'composition'])
        for stage in manifest.stages:
            self.assertEqual(stage['status'], 'done', stage['name'])
            self.assertIsNone(stage['error'])
            for path in stage['losses']:
                self.assertTrue(os.path.exists(os.path.join(self.run_dir, path)), path)
        self.assertTrue(manifest['fg-static']['losses'])

    def test_scene_layout(self):
        self.assertIsNotNone(self.scene.foreground)
        self.assertTrue(self.scene.foreground.gaussians.frozen)
        self.assertEqual(self.scene.n_frames, 4)
        self.assertEqual(len(self.scene.background.trained_views), 3)
        for name in ('scene.json', 'composition_inputs.npz', 'fg/fg_gaussians.ply', 'bg/bg_gaussians.ply',
                     'background/loop_0/bg_gaussians.ply', 'background/loop_1/bg_gaussians.ply'):
            self.assertTrue(os.path.exists(os.path.join(self.run_dir, name)), name)
        loaded = SceneBundle.load(self.run_dir)
        self.assertEqual(loaded.params.to_dict(), self.scene.params.to_dict())

    def test_deterministic(self):
        other = os.path.join(self.root, 'again')
        self.addCleanup(shutil.rmtree, other, ignore_errors=True)
        run(self.config, other)
        for name in ('scene.json', 'fg/fg_gaussians.ply', 'bg/bg_gaussians.ply'):
            self.assertEqual(_read_bytes(os.path.join(self.run_dir, name)),
                             _read_bytes(os.path.join(other, name)), name)

    def test_validate(self):
        report = validate_scene(self.run_dir)
        self.assertTrue(report.ok, report.failures)
        names = [name for name, _, _ in report.checks]
        for name in ('delta-recomputed', 'depth-shift-recomputed', 'epsilon-recomputed',
                     'trajectory-recomputed', 'fg-frozen', 'bg-scale-truncation'):
            self.assertIn(name, names)

    def test_validate_catches_bad_quaternions(self):
        path = self.copy_run('corrupt')
        ply_path = os.path.join(path, 'bg', 'bg_gaussians.ply')
        ply = PlyData.read(ply_path, mmap=False)
        ply['vertex'].data['qw'] *= 3
        ply.write(ply_path)
        report = validate_scene(path)
        self.assertFalse(report.ok)
        self.assertIn('bg-quaternion-norms', report.failures)

    def test_resume(self):
        path = self.copy_run('resumed')
        manifest_path = os.path.join(path, 'manifest.json')
        manifest = RunManifest.load(manifest_path)
        reference_clock = manifest['reference-video']['wall_clock']
        manifest.mark('bg-loop-1', 'pending')
        manifest.mark('composition', 'pending')
        manifest.save(manifest_path)

        run(self.config, path)
        manifest = RunManifest.load(manifest_path)
        self.assertEqual(manifest['reference-video']['wall_clock'], reference_clock)
        self.assertTrue(manifest.is_done('bg-loop-1'))
        self.assertEqual(_read_bytes(os.path.join(self.run_dir, 'scene.json')),
                         _read_bytes(os.path.join(path, 'scene.json')))

    def test_resume_rejects_other_config(self):
        path = self.copy_run('other-config')
        with self.assertRaises(InvalidConfig):
            run(tiny_config(seed=4), path)

    def test_render_outputs(self):
        out_dir = self.make_tempdir()
        written = render_outputs(self.run_dir, out_dir=out_dir)
        self.assertEqual(len(written), 3)
        for paths in written.values():
            self.assertEqual(len(paths), 4)
            for path in paths:
                self.assertTrue(os.path.exists(path))
        with open(os.path.join(out_dir, 'psnr.json')) as f:
            report = json.load(f)
        reference_name = self.scene.reference_camera.name
        self.assertEqual(list(report), [reference_name])
        self.assertEqual(sorted(report[reference_name]['per_frame']), ['1', '2', '3', '4'])

    def test_render_selection(self):
        out_dir = self.make_tempdir()
        written = render_outputs(self.run_dir, cameras='10:30', times='2,4', out_dir=out_dir, resolution=32)
        self.assertEqual(list(written), ['e+10_a+30'])
        self.assertEqual([os.path.basename(p) for p in written['e+10_a+30']], ['frame_0002.png', 'frame_0004.png'])
        self.assertFalse(os.path.exists(os.path.join(out_dir, 'psnr.json')))

    def test_parse_requests(self):
        self.assertEqual(len(parse_cameras('orbit', self.scene, (32, 32))), 24)
        self.assertEqual(len(parse_cameras('schedule', self.scene, (32, 32))), 3)
        self.assertEqual(parse_times('all', 4), [1, 2, 3, 4])
        self.assertEqual(parse_times('', 4), [])
        self.assertEqual(parse_times([3], 4), [3])
        with self.assertRaises(InvalidArgument):
            parse_times('0', 4)
        with self.assertRaises(InvalidArgument):
            parse_times('5', 4)
        with self.assertRaises(InvalidArgument):
            parse_cameras('overhead', self.scene, (32, 32))
        with self.assertRaises(InvalidArgument):
            parse_cameras([(10.,)], self.scene, (32, 32))

    def test_cli_validate(self):
        self.assertEqual(main(['validate', '--scene', self.run_dir]), EXIT_OK)
        self.assertEqual(main(['validate', '--scene', os.path.join(self.root, 'nothing')]),
                         EXIT_VALIDATION_FAILURE)


class TestPsnrReport(SceneTestCase):
    def test_identical_frames_are_null(self):
        frame = np.full((4, 4, 3), 0.5)
        report = psnr_report([frame, frame + 0.1], [frame, frame], [1, 2])
        self.assertIsNone(report['per_frame']['1'])
        self.assertAllClose(report['per_frame']['2'], 20., rtol=1e-9)
        self.assertAllClose(report['mean'], 20., rtol=1e-9)
        self.assertEqual(report['identical_frames'], 1)
        self.assertEqual(json.loads(json.dumps(report, allow_nan=False)), report)

    def test_all_identical(self):
        frame = np.zeros((2, 2, 3))
        report = psnr_report([frame], [frame], [3])
        self.assertEqual(report, {'per_frame': {'3': None}, 'mean': None, 'identical_frames': 1})


class TestCommandLine(SceneTestCase):
    def test_bad_config(self):
        directory = self.make_tempdir()
        path = os.path.join(directory, 'config.json')
        with open(path, 'w') as f:
            json.dump({'prompt': 'x', 'strength': 2.}, f)
        self.assertEqual(main(['run', '--config', path, '--out', os.path.join(directory, 'run')]),
                         EXIT_INVALID_CONFIG)

    def test_mock_world(self):
        directory = self.make_tempdir()
        self.assertEqual(main(['mock-world', '--seed', '2', '--n-frames', '3', '--resolution', '16',
                               '--out', directory]), EXIT_OK)
        frames = np.load(os.path.join(directory, 'frames.npy'))
        self.assertEqual(frames.shape, (3, 16, 16, 3))
        with open(os.path.join(directory, 'path.json')) as f:
            path = json.load(f)
        self.assertEqual(path['seed'], 2)
        self.assertEqual(len(path['shifts']), 3)
