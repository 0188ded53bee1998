import torch

from scene_completer.backends import ScoreCondition
from scene_completer.errors import InvalidArgument
from scene_completer.mock import make_mock_suite
from scene_completer.sds import SpecifyGradient, alpha_bar, sds_step
from scene_completer.test.scene_tester import SceneTestCase, smooth_frame


class TestSds(SceneTestCase):
    def test_alpha_bar(self):
        self.assertGreater(alpha_bar(0.02), alpha_bar(0.5))
        self.assertGreater(alpha_bar(0.5), alpha_bar(0.98))
        self.assertLess(alpha_bar(0.98), 0.01)
        with self.assertRaises(InvalidArgument):
            alpha_bar(1.)

    def test_zero_gradient_at_target(self):
        frame = smooth_frame(16, seed=2)
        image = torch.tensor(frame, requires_grad=True)
        result = sds_step(image, ScoreCondition(image=frame), make_mock_suite(), kind='text',
                          generator=torch.Generator().manual_seed(0))
        result.loss.backward()
        self.assertLess(float(result.grad.abs().max()), 1e-4)
        self.assertLess(float(image.grad.abs().max()), 1e-4)

    def test_gradient_points_to_target(self):
        frame = smooth_frame(16, seed=2)
        image = torch.zeros(16, 16, 3, requires_grad=True)
        result = sds_step(image, ScoreCondition(image=frame), make_mock_suite(), kind='text',
                          gamma_range=(0.1, 0.2), generator=torch.Generator().manual_seed(0))
        result.loss.backward()
        self.assertTrue(torch.equal(image.grad, result.grad))
        # a descent step moves the image toward the brighter target
        self.assertLess(float(image.grad.sum()), 0.)

    def test_weight_scales_gradient(self):
        frame = smooth_frame(16, seed=2)
        image = torch.zeros(16, 16, 3)
        one = sds_step(image, ScoreCondition(image=frame), make_mock_suite(), kind='text',
                       generator=torch.Generator().manual_seed(5))
        two = sds_step(image, ScoreCondition(image=frame), make_mock_suite(), kind='text',
                       weight_fn=lambda gamma: 2., generator=torch.Generator().manual_seed(5))
        self.assertEqual(one.gamma, two.gamma)
        self.assertTrue(torch.equal(two.grad, 2. * one.grad))

    def test_gamma_range(self):
        result = sds_step(torch.zeros(4, 4, 3), ScoreCondition(), make_mock_suite(), kind='text',
                          gamma_range=(0.3, 0.4), generator=torch.Generator().manual_seed(1))
        self.assertTrue(0.3 <= result.gamma <= 0.4)
        with self.assertRaises(InvalidArgument):
            sds_step(torch.zeros(4, 4, 3), ScoreCondition(), make_mock_suite(), gamma_range=(0.5, 1.))

    def test_injected_gradient_is_not_rescaled(self):
        image = torch.zeros(4, 4, 3, requires_grad=True)
        SpecifyGradient.apply(image, torch.ones(4, 4, 3)).backward()
        self.assertTrue(torch.equal(image.grad, torch.ones(4, 4, 3)))

        image = torch.zeros(16, 16, 3, requires_grad=True)
        frame = smooth_frame(16, seed=2)
        result = sds_step(image, ScoreCondition(image=frame), make_mock_suite(), kind='text',
                          weight_fn=lambda gamma: 3., generator=torch.Generator().manual_seed(7))
        (0.5 * result.loss).backward()
        self.assertAllClose(image.grad, 0.5 * result.grad)

    def test_zero_weight_contributes_nothing(self):
        image = torch.zeros(8, 8, 3, requires_grad=True)
        result = sds_step(image, ScoreCondition(image=smooth_frame(8)), make_mock_suite(), kind='text',
                          weight_fn=lambda gamma: 0., generator=torch.Generator().manual_seed(7))
        result.loss.backward()
        self.assertEqual(float(image.grad.abs().max()), 0.)
