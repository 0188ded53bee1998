import math

import torch

from scene_completer.backends import score_epsilon
from scene_completer.errors import InvalidArgument

__all__ = ['alpha_bar', 'SpecifyGradient', 'SdsResult', 'sds_step']

TRAIN_STEPS = 1000
BETA_START = 1e-4
BETA_END = 0.02

_alphas_cumprod = torch.cumprod(1. - torch.linspace(BETA_START, BETA_END, TRAIN_STEPS, dtype=torch.float64), 0)


def alpha_bar(gamma):
    """Cumulative signal fraction of the linear noise schedule at noise level gamma in (0, 1)."""
    if not 0. < gamma < 1.:
        raise InvalidArgument('Noise level must be in (0, 1), got %r' % gamma)
    step = min(TRAIN_STEPS - 1, int(gamma * TRAIN_STEPS))
    return float(_alphas_cumprod[step])


class SpecifyGradient(torch.autograd.Function):
    """
    Loss whose gradient with respect to the input is exactly the given
    tensor. Its value, half the mean square of that tensor, is only logged.
    """

    @staticmethod
    def forward(ctx, input_tensor, gt_grad):
        ctx.save_for_backward(gt_grad)
        return 0.5 * (gt_grad ** 2).mean()

    @staticmethod
    def backward(ctx, grad_scale):
        gt_grad, = ctx.saved_tensors
        return grad_scale * gt_grad, None


class SdsResult(object):
    def __init__(self, loss, gamma, grad):
        self.loss = loss
        self.gamma = gamma
        self.grad = grad


def sds_step(image, condition, backends, kind='multiview', gamma_range=(0.02, 0.98),
             weight_fn=None, generator=None):
    """
    Score distillation on one rendered image.

    Noise the image at a level drawn uniformly from gamma_range, ask the
    score function for its noise estimate and return a loss whose
    gradient with respect to the image is w(gamma) * (estimate - noise).

    :param image: H x W x 3 rendering with gradients.
    :param condition: ScoreCondition
    :param kind: "multiview" or "text".
    :param weight_fn: w(gamma); constant 1 by default.
    :param generator: torch.Generator for the noise level and the noise.
    :rtype: SdsResult
    """
    low, high = gamma_range
    if not 0. < low <= high < 1.:
        raise InvalidArgument('Noise level range must lie in (0, 1), got %r' % (gamma_range,))
    gamma = low + (high - low) * float(torch.rand(1, generator=generator, dtype=torch.float64))
    gamma = min(max(gamma, low), high)
    noise = torch.randn(image.shape, generator=generator, dtype=image.dtype)
    ab = alpha_bar(gamma)

    with torch.no_grad():
        noisy = math.sqrt(ab) * image.detach() + math.sqrt(1. - ab) * noise
        eps = score_epsilon(backends, noisy, condition, gamma, kind)
        weight = 1. if weight_fn is None else weight_fn(gamma)
        grad = torch.nan_to_num(weight * (eps - noise))

    return SdsResult(SpecifyGradient.apply(image, grad), gamma, grad)
