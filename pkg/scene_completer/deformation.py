import json
import logging
import math
import os

import numpy as np
import torch
from scipy.spatial import cKDTree
from torch import nn
from torch.nn import functional as F

from scene_completer.errors import DomainError, InvalidArgument, NotApplicable, SceneLoadError
from scene_completer.gaussians import GaussianSet

__all__ = [
    'TimeStamp', 'DeformationField', 'deform', 'knn_indices', 'rigidity_loss',
    'total_variation', 'tv_loss',
]

# Feature plane axis pairs over (x, y, z, t).
_PLANE_AXES = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))


class TimeStamp(object):
    def __init__(self, frame_index, n_frames):
        """
        A 1-based frame index in a video of n_frames, normalized to [0, 1].

        :param frame_index: 1 <= frame_index <= n_frames
        :param n_frames: At least 2.
        """
        if n_frames < 2:
            raise InvalidArgument('A video needs at least 2 frames, got %r' % n_frames)
        if not 1 <= frame_index <= n_frames:
            raise InvalidArgument('Frame index %r is outside [1, %d]' % (frame_index, n_frames))
        self.frame_index = int(frame_index)
        self.n_frames = int(n_frames)

    @property
    def normalized(self):
        return (self.frame_index - 1) / float(self.n_frames - 1)

    def __repr__(self):
        return '<TimeStamp %d/%d>' % (self.frame_index, self.n_frames)


def normalized_time(t):
    value = t.normalized if isinstance(t, TimeStamp) else float(t)
    if not 0. <= value <= 1.:
        raise DomainError('Normalized time %r is outside [0, 1]' % value)
    return value


def positional_encoding(x, n_frequencies):
    if n_frequencies == 0:
        return x
    freqs = (2. ** torch.arange(n_frequencies, dtype=x.dtype)) * math.pi
    angles = x[..., None] * freqs
    return torch.cat([x, torch.sin(angles).flatten(-2), torch.cos(angles).flatten(-2)], dim=-1)


class DeformationField(nn.Module):
    def __init__(self, width=64, depth=2, position_frequencies=4, time_frequencies=4,
                 use_grid=False, grid_resolution=(16, 32), time_resolution=8,
                 grid_features=8, aabb=None, seed=0):
        """
        Maps (Gaussian mean, normalized time) to offsets of position,
        rotation and log-scale.

        Positions and time are frequency-encoded and fed to an MLP with
        three heads. With use_grid, features sampled from six
        multi-resolution planes over (x, y, z, t) are appended to the
        MLP input; positions are normalized into aabb first.

        Output heads start at zero so a fresh field is the identity.

        :param aabb: 2 x 3 bounds used to normalize positions for the grid.
        :param seed: Seed for weight and plane initialization.
        """
        super(DeformationField, self).__init__()
        self.config = {
            'width': int(width),
            'depth': int(depth),
            'position_frequencies': int(position_frequencies),
            'time_frequencies': int(time_frequencies),
            'use_grid': bool(use_grid),
            'grid_resolution': [int(x) for x in grid_resolution],
            'time_resolution': int(time_resolution),
            'grid_features': int(grid_features),
            'seed': int(seed),
        }
        if depth < 1 or width < 1:
            raise InvalidArgument('Deformation MLP needs positive width and depth')

        if aabb is None:
            aabb = [[-1., -1., -1.], [1., 1., 1.]]
        aabb = torch.as_tensor(np.asarray(aabb), dtype=torch.float32)
        if tuple(aabb.shape) != (2, 3) or torch.any(aabb[1] <= aabb[0]):
            raise InvalidArgument('aabb must be 2 x 3 with max > min, got %r' % aabb.tolist())
        self.register_buffer('aabb', aabb)

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.planes = nn.ParameterList()
            if use_grid:
                for res in self.config['grid_resolution']:
                    for axes in _PLANE_AXES:
                        size_b = time_resolution if axes[1] == 3 else res
                        plane = torch.empty(1, grid_features, size_b, res)
                        if axes[1] == 3:
                            nn.init.ones_(plane)
                        else:
                            nn.init.uniform_(plane, a=0.1, b=0.5)
                        self.planes.append(nn.Parameter(plane))

            in_dim = 3 * (1 + 2 * position_frequencies) + (1 + 2 * time_frequencies)
            if use_grid:
                in_dim += grid_features * len(self.config['grid_resolution'])
            layers = [nn.Linear(in_dim, width), nn.ReLU()]
            for _ in range(depth - 1):
                layers.extend([nn.Linear(width, width), nn.ReLU()])
            self.trunk = nn.Sequential(*layers)

            self.position_head = nn.Linear(width, 3)
            self.rotation_head = nn.Linear(width, 4)
            self.scaling_head = nn.Linear(width, 3)
            for head in (self.position_head, self.rotation_head, self.scaling_head):
                nn.init.zeros_(head.weight)
                nn.init.zeros_(head.bias)

    @property
    def use_grid(self):
        return self.config['use_grid']

    def mlp_parameters(self):
        return [p for name, p in self.named_parameters() if not name.startswith('planes')]

    def grid_parameters(self):
        return list(self.planes.parameters())

    def _grid_features(self, coords):
        aabb = self.aabb
        spatial = 2 * (coords[:, :3] - aabb[0]) / (aabb[1] - aabb[0]) - 1
        spatial = spatial.clamp(-1., 1.)
        time = coords[:, 3:] * 2 - 1
        pts = torch.cat([spatial, time], dim=-1)

        features = []
        for level in range(len(self.config['grid_resolution'])):
            product = 1.
            for k, (a, b) in enumerate(_PLANE_AXES):
                plane = self.planes[level * len(_PLANE_AXES) + k]
                grid = torch.stack([pts[:, a], pts[:, b]], dim=-1)[None, :, None, :]
                sampled = F.grid_sample(plane, grid, mode='bilinear', padding_mode='border',
                                        align_corners=True)
                product = product * sampled[0, :, :, 0].T
            features.append(product)
        return torch.cat(features, dim=-1)

    def forward(self, positions, t):
        """
        :param positions: N x 3 Gaussian means.
        :param t: Normalized time in [0, 1].
        :return: (position offsets N x 3, rotation offsets N x 4, log-scale offsets N x 3)
        """
        t = normalized_time(t)
        n = positions.shape[0]
        time = torch.full((n, 1), t, dtype=positions.dtype)

        inputs = [positional_encoding(positions, self.config['position_frequencies']),
                  positional_encoding(time, self.config['time_frequencies'])]
        if self.use_grid:
            inputs.append(self._grid_features(torch.cat([positions, time], dim=-1)))
        hidden = self.trunk(torch.cat(inputs, dim=-1))
        return (self.position_head(hidden),
                self.rotation_head(hidden),
                self.scaling_head(hidden))

    def save(self, path):
        """
        Write the parameters as a flat little-endian float32 blob at path,
        with a JSON header listing tensor names and shapes next to it.
        """
        state = self.state_dict()
        header = {
            'config': self.config,
            'tensors': [{'name': name, 'shape': list(tensor.shape)} for name, tensor in state.items()],
        }
        blob = np.concatenate([t.detach().cpu().numpy().astype('<f4').ravel() for t in state.values()])
        with open(path, 'wb') as f:
            f.write(blob.tobytes())
        with open(_header_path(path), 'w') as f:
            json.dump(header, f, indent=2, sort_keys=True)
        logging.debug('Wrote deformation field (%d values) to %s', blob.size, path)

    @classmethod
    def load(cls, path):
        try:
            with open(_header_path(path)) as f:
                header = json.load(f)
            blob = np.fromfile(path, dtype='<f4')
        except (IOError, OSError, ValueError) as e:
            raise SceneLoadError('Cannot read deformation field %s: %s' % (path, e))

        field = cls(**header['config'])
        state, offset = {}, 0
        for entry in header['tensors']:
            size = int(np.prod(entry['shape'])) if entry['shape'] else 1
            if offset + size > blob.size:
                raise SceneLoadError('Deformation blob %s is truncated' % path)
            state[entry['name']] = torch.from_numpy(
                blob[offset:offset + size].astype(np.float32).reshape(entry['shape']))
            offset += size
        if offset != blob.size:
            raise SceneLoadError('Deformation blob %s has %d trailing values' % (path, blob.size - offset))
        field.load_state_dict(state)
        return field


def _header_path(path):
    return os.path.splitext(path)[0] + '.json'


def deform(gaussians, field, t):
    """
    Apply the deformation field at time t. Opacity and color are kept.

    When the set is frozen, its tensors are detached so only the field
    receives gradients.

    :param t: TimeStamp or normalized time in [0, 1].
    :rtype: GaussianSet
    """
    t = normalized_time(t)
    raw = gaussians.raw_tensors()
    if gaussians.frozen:
        raw = dict((k, v.detach()) for k, v in raw.items())
    d_xyz, d_rotation, d_scaling = field(raw['xyz'], t)
    return GaussianSet(raw['xyz'] + d_xyz, raw['rotation'] + d_rotation, raw['scaling'] + d_scaling,
                       raw['opacity'], raw['colors'], frozen=gaussians.frozen,
                       max_scale=gaussians.max_scale)


def knn_indices(positions, k):
    """k nearest neighbours of every point, excluding the point itself."""
    points = positions.detach().cpu().double().numpy()
    if points.shape[0] < k + 1:
        raise InvalidArgument('Need at least %d Gaussians for %d neighbours, got %d' % (
            k + 1, k, points.shape[0]))
    _, indices = cKDTree(points).query(points, k=k + 1)
    own = np.arange(points.shape[0])[:, None]
    neighbours = np.empty((points.shape[0], k), dtype=np.int64)
    for i in range(points.shape[0]):
        row = indices[i][indices[i] != own[i, 0]]
        neighbours[i] = row[:k]
    return torch.from_numpy(neighbours)


def rigidity_loss(static, deformed, k=8, neighbors=None):
    """
    Mean squared change of the offsets between each Gaussian and its k
    nearest static neighbours.

    :param static: The canonical GaussianSet.
    :param deformed: The same set after deformation.
    :param neighbors: Optional precomputed N x k neighbour indices.
    """
    if len(static) != len(deformed):
        raise InvalidArgument('Static and deformed sets differ in size: %d vs %d' % (
            len(static), len(deformed)))
    if neighbors is None:
        neighbors = knn_indices(static.positions, k)

    mu0 = static.positions.detach()
    mu = deformed.positions
    rest = mu0[neighbors] - mu0[:, None, :]
    moved = mu[neighbors] - mu[:, None, :]
    return ((moved - rest) ** 2).sum(dim=-1).mean()


def total_variation(grid, dims=None):
    """
    Sum over the given axes of the mean squared difference between
    adjacent entries. Axes of size 1 contribute nothing.
    """
    if dims is None:
        dims = range(grid.dim())
    total = grid.new_zeros(())
    for dim in dims:
        if grid.shape[dim] < 2:
            continue
        diff = grid.narrow(dim, 1, grid.shape[dim] - 1) - grid.narrow(dim, 0, grid.shape[dim] - 1)
        total = total + (diff ** 2).mean()
    return total


def tv_loss(field):
    """Total variation over the spatial and temporal axes of every feature plane."""
    if not field.use_grid:
        raise NotApplicable('Deformation field has no feature planes')
    return sum(total_variation(plane, dims=(-2, -1)) for plane in field.planes)
