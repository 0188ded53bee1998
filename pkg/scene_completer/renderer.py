import logging
import math

import numpy as np
import torch

from scene_completer.deformation import deform
from scene_completer.errors import InvalidArgument
from scene_completer.gaussians import quaternion_to_matrix

__all__ = ['RenderOutput', 'render', 'render_mask', 'inpaint_mask', 'render_gradcheck',
           'GradcheckReport']

ALPHA_FLOOR = 1. / 255.
ALPHA_CEILING = 0.99
LOW_PASS = 0.3


class RenderOutput(object):
    def __init__(self, rgb, alpha, depth, contributing, means2d=None, visible=None):
        """
        :param rgb: H x W x 3, composited over the background color.
        :param alpha: H x W accumulated opacity.
        :param depth: H x W expected depth, 0 where nothing was drawn.
        :param contributing: H x W count of Gaussians that touched each pixel.
        :param means2d: Projected centers of all Gaussians (N x 2), for
            densification statistics. Gaussians behind the camera hold zeros.
            Its gradient is retained after backward.
        :param visible: Boolean N mask of Gaussians inside the depth range.
        """
        self.rgb = rgb
        self.alpha = alpha
        self.depth = depth
        self.contributing = contributing
        self.means2d = means2d
        self.visible = visible

    def view_gradient_norms(self):
        """
        Norm of the gradient of every projected center, zero for Gaussians
        outside the depth range. Call after backward.

        :return: N tensor, all zeros when no gradient reached the centers.
        """
        if self.means2d is None:
            raise InvalidArgument('Render output carries no projected centers')
        grad = self.means2d.grad
        if grad is None:
            return torch.zeros(self.means2d.shape[0], dtype=self.means2d.dtype)
        norms = grad.detach().norm(dim=-1)
        if self.visible is not None:
            norms = torch.where(self.visible, norms, torch.zeros_like(norms))
        return norms

    def numpy(self):
        return (self.rgb.detach().cpu().numpy().astype(np.float32),
                self.alpha.detach().cpu().numpy().astype(np.float32),
                self.depth.detach().cpu().numpy().astype(np.float32))


def _empty_output(height, width, background, dtype):
    rgb = background.expand(height, width, 3).clone()
    zeros = torch.zeros(height, width, dtype=dtype)
    return RenderOutput(rgb, zeros, zeros.clone(), torch.zeros(height, width, dtype=torch.long))


def _composite_rank(keys):
    """Rank of every row under a lexicographic sort of the key columns, first column first."""
    order = torch.arange(keys.shape[0])
    for column in reversed(range(keys.shape[1])):
        order = order[torch.argsort(keys[order, column], stable=True)]
    rank = torch.empty_like(order)
    rank[order] = torch.arange(keys.shape[0])
    return rank


def render(gaussians, camera, background=None, max_radius=48):
    """
    Differentiable rasterization of a Gaussian set with front-to-back
    alpha compositing.

    Each Gaussian is projected with the local affine (EWA) approximation
    and covers a square of pixels out to three standard deviations. The
    (pixel, Gaussian) pairs are sorted by pixel and then by depth. Equal
    depths are ordered by camera-space x and y, then color, opacity, scale
    and rotation, so the image does not depend on storage order. Per-pair
    alpha is clamped to 0.99 and pairs below 1/255 are skipped.

    :param gaussians: GaussianSet
    :param camera: CameraPose
    :param background: RGB background color, black by default.
    :param max_radius: Upper bound on the pixel radius of one Gaussian.
    :rtype: RenderOutput
    """
    height, width = camera.resolution
    dtype = gaussians.dtype
    if background is None:
        background = torch.zeros(3, dtype=dtype)
    background = torch.as_tensor(background, dtype=dtype)

    n = len(gaussians)
    if n == 0:
        out = _empty_output(height, width, background, dtype)
        out.means2d, out.visible = torch.zeros(0, 2, dtype=dtype), torch.zeros(0, dtype=torch.bool)
        return out

    rotation = torch.as_tensor(camera.rotation, dtype=dtype)
    origin = torch.as_tensor(camera.position, dtype=dtype)
    p_cam = (gaussians.positions - origin) @ rotation.T
    z = p_cam[:, 2]

    with torch.no_grad():
        visible = (z > camera.near) & (z < camera.far)
    index = torch.nonzero(visible, as_tuple=True)[0]
    means2d = torch.zeros(n, 2, dtype=dtype)
    if index.numel() == 0:
        out = _empty_output(height, width, background, dtype)
        out.means2d, out.visible = means2d, visible
        return out

    pc = p_cam[index]
    zv = pc[:, 2]
    focal = camera.focal
    cx, cy = camera.principal_point
    u = focal * pc[:, 0] / zv + cx
    v = focal * pc[:, 1] / zv + cy
    means2d = means2d.index_put((index,), torch.stack([u, v], dim=-1))
    if means2d.requires_grad:
        means2d.retain_grad()
    u, v = means2d[index, 0], means2d[index, 1]

    # 3D covariance in camera space
    rot = quaternion_to_matrix(gaussians.rotations[index])
    m = rot * gaussians.scales[index][:, None, :]
    cov_cam = rotation @ (m @ m.transpose(1, 2)) @ rotation.T

    # Jacobian of the perspective projection, evaluated at clamped x/z and y/z
    lim_x = 1.3 * camera.tan_half_fovx
    lim_y = 1.3 * math.tan(math.radians(camera.fovy) / 2)
    tx = torch.clamp(pc[:, 0] / zv, -lim_x, lim_x) * zv
    ty = torch.clamp(pc[:, 1] / zv, -lim_y, lim_y) * zv
    zeros = torch.zeros_like(zv)
    jac = torch.stack([
        torch.stack([focal / zv, zeros, -focal * tx / (zv * zv)], dim=-1),
        torch.stack([zeros, focal / zv, -focal * ty / (zv * zv)], dim=-1),
    ], dim=1)
    cov2d = jac @ cov_cam @ jac.transpose(1, 2)
    a = cov2d[:, 0, 0] + LOW_PASS
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1] + LOW_PASS
    det = a * c - b * b
    conic_a, conic_b, conic_c = c / det, -b / det, a / det

    with torch.no_grad():
        mid = 0.5 * (a + c)
        lam = mid + torch.sqrt(torch.clamp(mid * mid - det, min=0.1))
        radius = torch.ceil(3. * torch.sqrt(lam)).clamp(max=max_radius).long()
        side = 2 * radius + 1
        counts = side * side
        owner = torch.repeat_interleave(torch.arange(index.numel()), counts)
        first = torch.cumsum(counts, 0) - counts
        local = torch.arange(owner.numel()) - first[owner]
        dx = local % side[owner] - radius[owner]
        dy = torch.div(local, side[owner], rounding_mode='floor') - radius[owner]
        px = torch.floor(u.detach()).long()[owner] + dx
        py = torch.floor(v.detach()).long()[owner] + dy
        inside = (px >= 0) & (px < width) & (py >= 0) & (py < height)
        owner, px, py = owner[inside], px[inside], py[inside]

    du = px.to(dtype) + 0.5 - u[owner]
    dv = py.to(dtype) + 0.5 - v[owner]
    power = -0.5 * (conic_a[owner] * du * du + conic_c[owner] * dv * dv) - conic_b[owner] * du * dv
    opacity = gaussians.opacities[index]
    alpha = torch.clamp(opacity[owner] * torch.exp(power), max=ALPHA_CEILING)

    with torch.no_grad():
        keep = (alpha > ALPHA_FLOOR) & (power <= 0)
        keys = torch.cat([pc.detach()[:, [2, 0, 1]], gaussians.colors.detach()[index],
                          gaussians.opacities.detach()[index][:, None], gaussians.scales.detach()[index],
                          gaussians.rotations.detach()[index]], dim=1)
        rank = _composite_rank(keys)
        pixel = (py * width + px)[keep]
        order = torch.argsort(pixel * index.numel() + rank[owner[keep]])
        pixel = pixel[order]
        owner = owner[keep][order]
        _, per_pixel = torch.unique_consecutive(pixel, return_counts=True)
        starts = torch.repeat_interleave(torch.cumsum(per_pixel, 0) - per_pixel, per_pixel)
    alpha = alpha[keep][order]

    # exclusive transmittance within each pixel's run of pairs
    log_t = torch.log1p(-alpha.to(torch.float64))
    exclusive = torch.cumsum(log_t, 0) - log_t
    transmittance = torch.exp(exclusive - exclusive[starts]).to(dtype)
    weight = alpha * transmittance

    hw = height * width
    colors = gaussians.colors[index][owner]
    rgb = torch.zeros(hw, 3, dtype=dtype).index_add(0, pixel, weight[:, None] * colors)
    acc = torch.zeros(hw, dtype=dtype).index_add(0, pixel, weight)
    depth_acc = torch.zeros(hw, dtype=dtype).index_add(0, pixel, weight * zv[owner])
    contributing = torch.bincount(pixel, minlength=hw)

    rgb = rgb + (1 - acc)[:, None] * background
    depth = torch.where(acc > 1e-8, depth_acc / acc.clamp(min=1e-8), torch.zeros_like(acc))
    return RenderOutput(rgb.reshape(height, width, 3), acc.reshape(height, width),
                        depth.reshape(height, width), contributing.reshape(height, width),
                        means2d=means2d, visible=visible)


def inpaint_mask(alpha, threshold=0.5):
    """Pixels whose accumulated opacity is below threshold."""
    if torch.is_tensor(alpha):
        alpha = alpha.detach().cpu().numpy()
    return np.asarray(alpha) < threshold


def render_mask(gaussians, field, t, camera, threshold=0.5):
    """
    Render the deformed set at time t and derive the inpainting mask.

    :return: (H x W x 3 frame, H x W boolean mask of uncovered pixels)
    """
    with torch.no_grad():
        target = deform(gaussians, field, t) if field is not None else gaussians
        out = render(target, camera)
    rgb, alpha, _ = out.numpy()
    return rgb, inpaint_mask(alpha, threshold)


class GradcheckReport(object):
    def __init__(self, errors, gradients, frozen=False):
        """
        :param errors: Dict from attribute name to the maximum relative
            error between analytic and central-difference gradients. For a
            frozen set, the largest analytic gradient that reached the
            attribute.
        :param gradients: Dict from attribute name to the largest absolute
            analytic gradient.
        """
        self.errors = errors
        self.gradients = gradients
        self.frozen = frozen

    def __getitem__(self, item):
        return self.errors[item]

    def __repr__(self):
        return '<GradcheckReport %s>' % ', '.join('%s=%.3g' % x for x in sorted(self.errors.items()))


_ATTRIBUTES = {
    'positions': 'xyz',
    'colors': 'colors',
    'opacities': 'opacity',
    'scales': 'scaling',
    'rotations': 'rotation',
}


def _default_loss(out):
    height, width = out.alpha.shape
    ys = torch.linspace(0., 1., height, dtype=out.rgb.dtype)[:, None, None]
    xs = torch.linspace(0., 1., width, dtype=out.rgb.dtype)[None, :, None]
    weights = torch.cos(3. * xs + torch.arange(3, dtype=out.rgb.dtype)) * torch.sin(2. * ys + 0.5)
    return (out.rgb * weights).sum() + 0.5 * (out.alpha ** 2).sum()


def render_gradcheck(gaussians, camera, loss_fn=None, eps=1e-6,
                     attributes=('positions', 'colors', 'opacities', 'scales')):
    """
    Compare analytic render gradients with central finite differences in
    float64, per attribute.

    A frozen set is rendered and differentiated the same way, but must
    pass no gradient to its attributes; its reported error is the largest
    gradient that reached one, so zero when the set stays frozen.

    :param loss_fn: Scalar function of a RenderOutput.
    :rtype: GradcheckReport
    """
    if loss_fn is None:
        loss_fn = _default_loss
    base = gaussians.to(torch.float64).clone()
    base.requires_grad_(True)
    raw = base.raw_tensors()
    loss = loss_fn(render(base, camera))
    if loss.requires_grad:
        loss.backward()

    analytic = {}
    for name in attributes:
        grad = raw[_ATTRIBUTES[name]].grad
        analytic[name] = torch.zeros_like(raw[_ATTRIBUTES[name]]) if grad is None else grad.detach().clone()
    gradients = dict((name, float(g.abs().max()) if g.numel() else 0.) for name, g in analytic.items())
    if gaussians.frozen:
        logging.debug('Render gradient check of a frozen set: largest gradients %r', gradients)
        return GradcheckReport(dict(gradients), gradients, frozen=True)

    errors = {}
    for name in attributes:
        tensor = raw[_ATTRIBUTES[name]]
        numeric = torch.zeros_like(analytic[name])
        flat, flat_numeric = tensor.data.view(-1), numeric.view(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + eps
                plus = loss_fn(render(base, camera)).item()
                flat[i] = original - eps
                minus = loss_fn(render(base, camera)).item()
                flat[i] = original
                flat_numeric[i] = (plus - minus) / (2 * eps)
        scale = max(float(numeric.abs().max()), 1e-12)
        errors[name] = float((analytic[name] - numeric).abs().max()) / scale
        logging.debug('Render gradient check %s: max relative error %.3g', name, errors[name])
    return GradcheckReport(errors, gradients)
