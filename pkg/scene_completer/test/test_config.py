import json
import os

from scene_completer.config import load_config, parse_config
from scene_completer.errors import InvalidConfig
from scene_completer.geometry import build_schedule
from scene_completer.test.scene_tester import SceneTestCase


class TestDefaults(SceneTestCase):
    def test_defaults(self):
        config = parse_config({'prompt': 'a cat on a desk'})
        self.assertEqual(config.n_frames, 16)
        self.assertEqual(config.resolution, (256, 256))
        self.assertEqual(config.strength, 0.7)
        self.assertEqual(config.sds_noise_ratio, 0.5)
        self.assertEqual(config.trajectory_rule, 'per_interval')
        self.assertEqual(config.camera.radius, 2.5)
        self.assertEqual(config.camera.fovy, 60.)
        self.assertEqual((config.camera.near, config.camera.far), (0.1, 10000.))
        self.assertEqual(config.background.static.max_scaling, 0.2)
        self.assertEqual(config.background.static.iterations, 300)
        self.assertIsNone(config.foreground.static.max_scaling)
        self.assertEqual((config.foreground.trajectory.lr, config.foreground.trajectory.iterations), (0.1, 50))
        self.assertTrue(config.background.dynamic.field.use_grid)
        self.assertFalse(config.foreground.motion.field.use_grid)
        self.assertEqual(config.backends.mode, 'mock')

    def test_schedule_document(self):
        config = parse_config({'prompt': 'x', 'projection_resolution': 128})
        schedule = build_schedule(config.schedule_document())
        self.assertEqual(schedule.count, 9)
        self.assertEqual(schedule.reference.resolution, (128, 128))

        config = parse_config({'prompt': 'x', 'schedule': {'loops': [[[0., 40.]]]}})
        self.assertEqual(build_schedule(config.schedule_document()).count, 2)

    def test_loop_prompts(self):
        config = parse_config({'prompt': 'base', 'loop_prompts': ['first', 'second']})
        self.assertEqual(config.loop_prompt(1), 'first')
        self.assertEqual(config.loop_prompt(2), 'second')
        self.assertEqual(parse_config({'prompt': 'base'}).loop_prompt(2), 'base')


class TestInvalid(SceneTestCase):
    def assertInvalid(self, data):
        with self.assertRaises(InvalidConfig):
            parse_config(data)

    def test_rejected_documents(self):
        self.assertInvalid({})
        self.assertInvalid({'prompt': ''})
        self.assertInvalid({'prompt': 'x', 'colour': 'red'})
        self.assertInvalid({'prompt': 'x', 'foreground': {'static': {'iteration': 10}}})
        self.assertInvalid({'prompt': 'x', 'strength': 1.5})
        self.assertInvalid({'prompt': 'x', 'sds_noise_ratio': 1.})
        self.assertInvalid({'prompt': 'x', 'n_frames': 1})
        self.assertInvalid({'prompt': 'x', 'trajectory_rule': 'exponential'})
        self.assertInvalid({'prompt': 'x', 'camera': {'near': 10., 'far': 1.}})
        self.assertInvalid({'prompt': 'x', 'sds_noise_ratio': 0.1, 'background': {'gamma_min': 0.2}})

    def test_loop_prompt_count(self):
        self.assertInvalid({'prompt': 'x', 'schedule': {'loops': [[[0., 30.]]]}, 'loop_prompts': ['a', 'b']})

    def test_files(self):
        directory = self.make_tempdir()
        path = os.path.join(directory, 'config.json')
        with open(path, 'w') as f:
            f.write('{"prompt": "x",')
        with self.assertRaises(InvalidConfig):
            load_config(path)
        with self.assertRaises(InvalidConfig):
            load_config(os.path.join(directory, 'missing.json'))

        with open(path, 'w') as f:
            json.dump({'prompt': 'a lamp', 'seed': 4}, f)
        self.assertEqual(load_config(path).seed, 4)
