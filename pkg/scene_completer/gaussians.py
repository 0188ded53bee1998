import logging
import math

import numpy as np
import torch
from plyfile import PlyData, PlyElement

from scene_completer.errors import InvalidArgument, SceneLoadError

__author__ = 'SceneCompleter developers'
__maintainer__ = 'SceneCompleter developers'

__all__ = [
    'GaussianSet', 'quaternion_to_matrix', 'init_sphere_gaussians',
    'densify_and_prune',
]

_PLY_FIELDS = ('x', 'y', 'z', 'qw', 'qx', 'qy', 'qz', 'sx', 'sy', 'sz',
               'opacity', 'r', 'g', 'b')


def inverse_sigmoid(x):
    return torch.log(x / (1 - x))


def quaternion_to_matrix(q):
    """
    Rotation matrices from (w, x, y, z) quaternions.

    :param q: N x 4 tensor, normalized.
    :return: N x 3 x 3 tensor.
    """
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1).reshape(-1, 3, 3)


class GaussianSet(object):
    def __init__(self, xyz, rotation, scaling, opacity, colors, frozen=False, max_scale=None):
        """
        A set of anisotropic 3D Gaussians stored as raw (pre-activation)
        tensors.

        Activations: rotations are normalized quaternions, scales are
        exp(log-scale) truncated at max_scale when set, opacities are
        sigmoid(logit) and colors are clamped to [0, 1].

        :param xyz: N x 3 means.
        :param rotation: N x 4 raw quaternions (w, x, y, z).
        :param scaling: N x 3 log-scales.
        :param opacity: N opacity logits.
        :param colors: N x 3 RGB.
        :param frozen: A frozen set passes no gradient to its own tensors.
        :param max_scale: Optional upper bound on activated scales.
        """
        n = xyz.shape[0]
        for name, tensor, width in (('rotation', rotation, 4), ('scaling', scaling, 3),
                                    ('colors', colors, 3)):
            if tuple(tensor.shape) != (n, width):
                raise InvalidArgument('Gaussian %s must be %d x %d, got %r' % (
                    name, n, width, tuple(tensor.shape)))
        if tuple(xyz.shape) != (n, 3):
            raise InvalidArgument('Gaussian positions must be N x 3, got %r' % (tuple(xyz.shape),))
        if tuple(opacity.shape) != (n,):
            raise InvalidArgument('Gaussian opacity must have N entries, got %r' % (tuple(opacity.shape),))
        if max_scale is not None and not max_scale > 0:
            raise InvalidArgument('max_scale must be positive, got %r' % max_scale)

        self._xyz = xyz
        self._rotation = rotation
        self._scaling = scaling
        self._opacity = opacity
        self._colors = colors
        self.frozen = bool(frozen)
        self.max_scale = None if max_scale is None else float(max_scale)

    @classmethod
    def from_activated(cls, positions, colors, scales, opacities, rotations=None,
                       max_scale=None, dtype=torch.float32):
        positions = torch.as_tensor(np.asarray(positions), dtype=dtype)
        n = positions.shape[0]
        if rotations is None:
            rotations = torch.zeros(n, 4, dtype=dtype)
            rotations[:, 0] = 1
        scales = torch.as_tensor(np.asarray(scales), dtype=dtype)
        opacities = torch.as_tensor(np.asarray(opacities), dtype=dtype).clamp(1e-6, 1 - 1e-6)
        if torch.any(scales <= 0):
            raise InvalidArgument('Gaussian scales must be positive')
        return cls(
            xyz=positions.clone(),
            rotation=torch.as_tensor(np.asarray(rotations), dtype=dtype).clone(),
            scaling=torch.log(scales),
            opacity=inverse_sigmoid(opacities),
            colors=torch.as_tensor(np.asarray(colors), dtype=dtype).clone(),
            max_scale=max_scale)

    @classmethod
    def empty(cls, max_scale=None, dtype=torch.float32):
        return cls(torch.zeros(0, 3, dtype=dtype), torch.zeros(0, 4, dtype=dtype),
                   torch.zeros(0, 3, dtype=dtype), torch.zeros(0, dtype=dtype),
                   torch.zeros(0, 3, dtype=dtype), max_scale=max_scale)

    def __len__(self):
        return self._xyz.shape[0]

    def __repr__(self):
        return '<GaussianSet %d%s>' % (len(self), ' frozen' if self.frozen else '')

    @property
    def dtype(self):
        return self._xyz.dtype

    @property
    def positions(self):
        return self._xyz

    @property
    def rotations(self):
        return torch.nn.functional.normalize(self._rotation, dim=-1)

    @property
    def scales(self):
        scales = torch.exp(self._scaling)
        if self.max_scale is not None:
            scales = torch.clamp(scales, max=self.max_scale)
        return scales

    @property
    def opacities(self):
        return torch.sigmoid(self._opacity)

    @property
    def colors(self):
        return torch.clamp(self._colors, 0., 1.)

    def raw_tensors(self):
        return {
            'xyz': self._xyz,
            'rotation': self._rotation,
            'scaling': self._scaling,
            'opacity': self._opacity,
            'colors': self._colors,
        }

    def _rebuild(self, fn, frozen=None):
        raw = dict((k, fn(v)) for k, v in self.raw_tensors().items())
        return GaussianSet(raw['xyz'], raw['rotation'], raw['scaling'], raw['opacity'], raw['colors'],
                           frozen=self.frozen if frozen is None else frozen,
                           max_scale=self.max_scale)

    def clone(self):
        """Copy with fresh leaf tensors."""
        return self._rebuild(lambda x: x.detach().clone())

    def detach(self):
        return self._rebuild(lambda x: x.detach())

    def frozen_copy(self):
        return self._rebuild(lambda x: x.detach(), frozen=True)

    def to(self, dtype):
        return self._rebuild(lambda x: x.detach().to(dtype))

    def select(self, mask):
        mask = torch.as_tensor(mask)
        return self._rebuild(lambda x: x.detach()[mask].clone())

    def concat(self, other):
        if self.dtype != other.dtype:
            other = other.to(self.dtype)
        raw, others = self.raw_tensors(), other.raw_tensors()
        merged = dict((k, torch.cat([raw[k].detach(), others[k].detach()], dim=0)) for k in raw)
        max_scale = self.max_scale if other.max_scale is None else other.max_scale
        return GaussianSet(merged['xyz'], merged['rotation'], merged['scaling'], merged['opacity'],
                           merged['colors'], frozen=self.frozen, max_scale=max_scale)

    def requires_grad_(self, flag=True):
        for tensor in self.raw_tensors().values():
            tensor.requires_grad_(flag and not self.frozen)
        return self

    def training_setup(self, hyper):
        """
        Adam over the raw tensors, one named parameter group per attribute.

        :param hyper: Object with position_lr, rotation_lr, scaling_lr,
            opacity_lr and feature_lr attributes.
        """
        if self.frozen:
            raise InvalidArgument('Cannot train a frozen Gaussian set')
        self.requires_grad_(True)
        groups = [
            {'params': [self._xyz], 'lr': hyper.position_lr, 'name': 'xyz'},
            {'params': [self._colors], 'lr': hyper.feature_lr, 'name': 'colors'},
            {'params': [self._opacity], 'lr': hyper.opacity_lr, 'name': 'opacity'},
            {'params': [self._scaling], 'lr': hyper.scaling_lr, 'name': 'scaling'},
            {'params': [self._rotation], 'lr': hyper.rotation_lr, 'name': 'rotation'},
        ]
        return torch.optim.Adam(groups, lr=0.0, eps=1e-15)

    def post_step(self):
        """Keep raw tensors inside their valid ranges after an optimizer step."""
        with torch.no_grad():
            self._colors.clamp_(0., 1.)
            if self.max_scale is not None:
                self._scaling.clamp_(max=math.log(self.max_scale))

    def save_ply(self, path):
        rotations = self.rotations.detach().cpu().double().numpy()
        scaling = self._scaling.detach().cpu().double().numpy()
        if self.max_scale is not None:
            scaling = np.minimum(scaling, math.log(self.max_scale))
        columns = np.concatenate([
            self._xyz.detach().cpu().double().numpy(),
            rotations,
            scaling,
            self._opacity.detach().cpu().double().numpy()[:, None],
            self._colors.detach().cpu().double().numpy(),
        ], axis=1)

        dtype = [(name, '<f4') for name in _PLY_FIELDS]
        elements = np.empty(len(self), dtype=dtype)
        elements[:] = list(map(tuple, columns.astype(np.float32)))
        comments = ['frozen %d' % int(self.frozen)]
        if self.max_scale is not None:
            comments.append('max_scale %r' % self.max_scale)
        PlyData([PlyElement.describe(elements, 'vertex')], byte_order='<',
                comments=comments).write(path)
        logging.debug('Wrote %d Gaussians to %s', len(self), path)

    @classmethod
    def load_ply(cls, path, dtype=torch.float32):
        try:
            ply = PlyData.read(path)
            vertex = ply['vertex']
            columns = dict((name, np.asarray(vertex[name], dtype=np.float64)) for name in _PLY_FIELDS)
        except (IOError, OSError, KeyError, ValueError) as e:
            raise SceneLoadError('Cannot read Gaussians from %s: %s' % (path, e))

        frozen, max_scale = False, None
        for comment in ply.comments:
            key, _, value = comment.partition(' ')
            if key == 'frozen':
                frozen = bool(int(value))
            elif key == 'max_scale':
                max_scale = float(value)

        def stack(names):
            return torch.as_tensor(np.stack([columns[x] for x in names], axis=1), dtype=dtype)

        return cls(stack('xyz'), stack(('qw', 'qx', 'qy', 'qz')), stack(('sx', 'sy', 'sz')),
                   torch.as_tensor(columns['opacity'], dtype=dtype), stack('rgb'),
                   frozen=frozen, max_scale=max_scale)


def init_sphere_gaussians(count, radius, opacity=0.1, color=0.5, scale=None, dtype=torch.float32):
    """
    Gray Gaussians spread evenly over a sphere around the origin using a
    Fibonacci lattice.

    :param count: Number of Gaussians.
    :param radius: Sphere radius.
    :param scale: Activated isotropic scale; defaults to half the mean spacing.
    """
    if count <= 0:
        raise InvalidArgument('Gaussian count must be positive, got %r' % count)
    if not radius > 0:
        raise InvalidArgument('Sphere radius must be positive, got %r' % radius)

    i = np.arange(count, dtype=np.float64)
    y = 1 - 2 * (i + 0.5) / count
    ring = np.sqrt(1 - y * y)
    phi = i * math.pi * (3 - math.sqrt(5))
    positions = radius * np.stack([np.cos(phi) * ring, y, np.sin(phi) * ring], axis=1)

    if scale is None:
        scale = 0.5 * radius * math.sqrt(4 * math.pi / count)
    return GaussianSet.from_activated(
        positions=positions,
        colors=np.full((count, 3), color),
        scales=np.full((count, 3), scale),
        opacities=np.full(count, opacity),
        dtype=dtype)


def densify_and_prune(gaussians, view_grads, threshold, prune_opacity=0.005,
                      percent_dense=0.01, extent=None):
    """
    Clone or split Gaussians whose accumulated view-space gradient norm
    exceeds the threshold, then drop Gaussians with activated opacity
    below prune_opacity.

    Small Gaussians are cloned in place. Gaussians whose largest scale
    exceeds percent_dense * extent are split into two children offset
    along their longest axis, each with the scale divided by 1.6.

    :param gaussians: GaussianSet
    :param view_grads: N accumulated view-space gradient norms (see
        RenderOutput.view_gradient_norms), or N x D accumulated gradients
        whose row norms are used.
    :param threshold: Gradient norm that triggers densification.
    :return: A new GaussianSet of leaf tensors.
    """
    if view_grads.shape[0] != len(gaussians):
        raise InvalidArgument('Expected %d accumulated gradients, got %d' % (
            len(gaussians), view_grads.shape[0]))

    with torch.no_grad():
        raw = dict((k, v.detach()) for k, v in gaussians.raw_tensors().items())
        if extent is None:
            centroid = raw['xyz'].mean(dim=0)
            extent = float((raw['xyz'] - centroid).norm(dim=-1).max()) if len(gaussians) else 1.0

        norms = view_grads if view_grads.dim() == 1 else view_grads.norm(dim=-1)
        selected = norms > threshold
        scales = gaussians.scales.detach()
        large = scales.max(dim=-1).values > percent_dense * extent
        to_clone = selected & ~large
        to_split = selected & large

        pieces = dict((k, [v[~to_split]]) for k, v in raw.items())
        for k, v in raw.items():
            pieces[k].append(v[to_clone])

        if to_split.any():
            longest = scales[to_split].argmax(dim=-1)
            axes = quaternion_to_matrix(gaussians.rotations.detach()[to_split])
            axis = axes[torch.arange(axes.shape[0]), :, longest]
            offset = axis * scales[to_split].max(dim=-1).values[:, None]
            for sign in (1., -1.):
                pieces['xyz'].append(raw['xyz'][to_split] + sign * offset)
                pieces['scaling'].append(raw['scaling'][to_split] - math.log(1.6))
                for k in ('rotation', 'opacity', 'colors'):
                    pieces[k].append(raw[k][to_split])

        merged = dict((k, torch.cat(v, dim=0)) for k, v in pieces.items())
        keep = torch.sigmoid(merged['opacity']) >= prune_opacity
        merged = dict((k, v[keep].clone()) for k, v in merged.items())

    logging.debug('Densification: %d cloned, %d split, %d pruned, %d -> %d Gaussians',
                  int(to_clone.sum()), int(to_split.sum()), int((~keep).sum()),
                  len(gaussians), int(keep.sum()))
    return GaussianSet(merged['xyz'], merged['rotation'], merged['scaling'], merged['opacity'],
                       merged['colors'], frozen=gaussians.frozen, max_scale=gaussians.max_scale)
