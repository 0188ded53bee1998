import logging
import math

import numpy as np
import torch

from scene_completer.errors import BehindCamera, InvalidArgument, InvalidConfig
from scene_completer.gaussians import GaussianSet

__author__ = 'SceneCompleter developers'
__maintainer__ = 'SceneCompleter developers'

__all__ = [
    'CameraPose', 'CameraSchedule', 'DepthMap',
    'DEFAULT_LOOPS', 'make_lookat_camera', 'project', 'unproject',
    'lift_frame', 'build_schedule', 'mask_bbox', 'box_placement',
]

# Outpaint loops as (elevation, azimuth) degrees.
DEFAULT_LOOPS = (
    ((0., 30.), (0., -30.), (15., 0.), (-15., 0.)),
    ((15., 30.), (15., -30.), (-15., 30.), (-15., -30.)),
)

_WORLD_UP = np.array([0., 1., 0.])


class CameraPose(object):
    def __init__(self, elevation, azimuth, radius=2.5, fovy=60., near=0.1,
                 far=10000., resolution=(256, 256)):
        """
        A pinhole camera on a sphere around the world origin, looking at
        the origin with world +y as up and no roll.

        Camera space follows the image: x to the right, y down, z along
        the optical axis. Pixel coordinates are continuous, with the
        center of pixel (row i, column j) at (j + 0.5, i + 0.5).

        :param elevation: Degrees above the horizontal plane.
        :param azimuth: Degrees around +y, measured from +z towards +x.
        :param radius: Distance from the origin in world units.
        :param fovy: Vertical field of view in degrees.
        :param near: Near clip distance.
        :param far: Far clip distance.
        :param resolution: (height, width) in pixels.
        """
        resolution = tuple(int(x) for x in resolution)
        if len(resolution) != 2 or min(resolution) <= 0:
            raise InvalidArgument('resolution must be two positive integers, got %r' % (resolution,))
        if not radius > 0:
            raise InvalidArgument('radius must be positive, got %r' % radius)
        if not near > 0:
            raise InvalidArgument('near must be positive, got %r' % near)
        if not far > near:
            raise InvalidArgument('far (%r) must be larger than near (%r)' % (far, near))
        if not 0 < fovy < 180:
            raise InvalidArgument('fovy must be in (0, 180) degrees, got %r' % fovy)
        if not -90 < elevation < 90:
            raise InvalidArgument('elevation must be in (-90, 90) degrees, got %r' % elevation)

        self.elevation = float(elevation)
        self.azimuth = float(azimuth)
        self.radius = float(radius)
        self.fovy = float(fovy)
        self.near = float(near)
        self.far = float(far)
        self.resolution = resolution

        self._rotation, self._position = self._look_at()

    def _look_at(self):
        elev, azim = math.radians(self.elevation), math.radians(self.azimuth)
        position = self.radius * np.array([
            math.cos(elev) * math.sin(azim),
            math.sin(elev),
            math.cos(elev) * math.cos(azim),
        ])
        forward = -position / np.linalg.norm(position)
        right = np.cross(forward, _WORLD_UP)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        return np.stack([right, down, forward]), position

    def __str__(self):
        return '<CameraPose elev=%g azim=%g r=%g %dx%d>' % (
            self.elevation, self.azimuth, self.radius, self.resolution[0], self.resolution[1])

    def __repr__(self):
        return self.__str__()

    def __eq__(self, other):
        return isinstance(other, CameraPose) and self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(tuple(sorted(self.to_dict().items(), key=lambda x: x[0])).__repr__())

    @property
    def height(self):
        return self.resolution[0]

    @property
    def width(self):
        return self.resolution[1]

    @property
    def position(self):
        return self._position.copy()

    @property
    def rotation(self):
        """World-to-camera rotation; rows are the camera axes in world space."""
        return self._rotation.copy()

    @property
    def view_matrix(self):
        view = np.eye(4)
        view[:3, :3] = self._rotation
        view[:3, 3] = -self._rotation.dot(self._position)
        return view

    @property
    def focal(self):
        return 0.5 * self.height / math.tan(math.radians(self.fovy) / 2)

    @property
    def principal_point(self):
        return 0.5 * self.width, 0.5 * self.height

    @property
    def intrinsics(self):
        cx, cy = self.principal_point
        return np.array([
            [self.focal, 0., cx],
            [0., self.focal, cy],
            [0., 0., 1.],
        ])

    @property
    def tan_half_fovx(self):
        return 0.5 * self.width / self.focal

    @property
    def pose_key(self):
        return round(self.elevation, 6), round(self.azimuth % 360., 6)

    @property
    def name(self):
        return 'e%+g_a%+g' % (self.elevation, self.azimuth)

    def with_resolution(self, resolution):
        return CameraPose(self.elevation, self.azimuth, self.radius, self.fovy,
                          self.near, self.far, resolution)

    def with_pose(self, elevation, azimuth):
        return CameraPose(elevation, azimuth, self.radius, self.fovy,
                          self.near, self.far, self.resolution)

    def relative_to(self, other):
        """(elevation, azimuth) offset of this camera from another one."""
        return self.elevation - other.elevation, self.azimuth - other.azimuth

    def to_dict(self):
        return {
            'elev': self.elevation,
            'azim': self.azimuth,
            'radius': self.radius,
            'fovy': self.fovy,
            'near': self.near,
            'far': self.far,
            'resolution': list(self.resolution),
        }

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(data['elev'], data['azim'], data['radius'], data['fovy'],
                       data['near'], data['far'], data['resolution'])
        except KeyError as e:
            raise InvalidConfig('Camera document is missing key %s' % e)


def make_lookat_camera(elevation, azimuth, radius=2.5, fovy=60., near=0.1,
                       far=10000., resolution=(256, 256)):
    return CameraPose(elevation, azimuth, radius, fovy, near, far, resolution)


class DepthMap(object):
    def __init__(self, values, valid_mask=None):
        """
        A height x width grid of depths along the camera z axis.

        :param values: Depth values, only meaningful where valid_mask is set.
        :param valid_mask: Boolean grid, defaults to all pixels.
        """
        values = np.asarray(values, dtype=np.float32)
        if values.ndim != 2:
            raise InvalidArgument('Depth map must be 2D, got shape %r' % (values.shape,))
        if valid_mask is None:
            valid_mask = np.ones(values.shape, dtype=bool)
        valid_mask = np.asarray(valid_mask, dtype=bool)
        if valid_mask.shape != values.shape:
            raise InvalidArgument('Depth valid mask shape %r does not match depth shape %r' % (
                valid_mask.shape, values.shape))
        valid = values[valid_mask]
        if not np.all(np.isfinite(valid)) or np.any(valid <= 0):
            raise InvalidArgument('Valid depth values must be positive and finite')

        self.values = values
        self.valid_mask = valid_mask

    @property
    def resolution(self):
        return self.values.shape

    def copy(self):
        return DepthMap(self.values.copy(), self.valid_mask.copy())

    def __repr__(self):
        return '<DepthMap %dx%d, %d valid>' % (
            self.values.shape[0], self.values.shape[1], int(self.valid_mask.sum()))


def mask_bbox(mask):
    """
    First and last masked column and row as (x0, y0, x1, y1), inclusive.
    Box sizes are x1 - x0 and y1 - y0, the distance between the centers of
    the outermost pixels, so a single masked column has width 0.
    """
    rows, cols = np.nonzero(np.asarray(mask, dtype=bool))
    if len(cols) == 0:
        raise InvalidArgument('Mask is empty')
    return int(cols.min()), int(rows.min()), int(cols.max()), int(rows.max())


def box_placement(mask):
    """Continuous pixel center (x, y) of the mask's box and its larger side."""
    x0, y0, x1, y1 = mask_bbox(mask)
    return (0.5 * (x0 + x1) + 0.5, 0.5 * (y0 + y1) + 0.5), max(x1 - x0, y1 - y0)


def _as_points(points):
    points = np.asarray(points, dtype=np.float64)
    single = points.ndim == 1
    return np.atleast_2d(points), single


def world_to_camera(points, camera):
    points, single = _as_points(points)
    cam = (points - camera.position).dot(camera.rotation.T)
    return cam[0] if single else cam


def project(point, camera):
    """
    Project world points to continuous pixel coordinates.

    :param point: A 3-vector or an N x 3 array of world points.
    :param camera: CameraPose
    :return: (pixels, depths); pixels are (u, v), depth is distance along camera z.
    """
    points, single = _as_points(point)
    cam = (points - camera.position).dot(camera.rotation.T)
    depth = cam[:, 2]
    if np.any(depth <= camera.near):
        raise BehindCamera('%d point(s) are not in front of %s' % (
            int(np.sum(depth <= camera.near)), camera))

    cx, cy = camera.principal_point
    pixels = np.stack([
        camera.focal * cam[:, 0] / depth + cx,
        camera.focal * cam[:, 1] / depth + cy,
    ], axis=1)
    if single:
        return pixels[0], float(depth[0])
    return pixels, depth


def unproject(pixel, depth, camera):
    """
    Lift continuous pixel coordinates at the given depths back to world space.
    Exact inverse of project() for the same camera.
    """
    pixels = np.asarray(pixel, dtype=np.float64)
    single = pixels.ndim == 1
    pixels = np.atleast_2d(pixels)
    depth = np.atleast_1d(np.asarray(depth, dtype=np.float64))
    if np.any(~(depth > 0)):
        raise InvalidArgument('Depth must be positive to unproject')

    cx, cy = camera.principal_point
    cam = np.stack([
        (pixels[:, 0] - cx) / camera.focal * depth,
        (pixels[:, 1] - cy) / camera.focal * depth,
        depth,
    ], axis=1)
    world = cam.dot(camera.rotation) + camera.position
    return world[0] if single else world


def lift_frame(image, depth, camera, opacity=0.9, scale_multiplier=1., max_scale=None):
    """
    Seed one Gaussian per valid pixel of a frame by unprojecting it
    through a depth map.

    Gaussians are isotropic with a size of one pixel footprint at their
    depth: depth * tan(fovy / 2) * 2 / height.

    :param image: H x W x 3 RGB frame in [0, 1].
    :param depth: DepthMap of the same resolution; valid_mask selects pixels.
    :param camera: The camera the frame was seen from.
    :param opacity: Initial (activated) opacity.
    :param scale_multiplier: Factor applied to the pixel footprint.
    :param max_scale: Optional truncation of activated scales.
    :rtype: GaussianSet
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidArgument('Frame must be H x W x 3, got %r' % (image.shape,))
    if image.shape[:2] != depth.values.shape:
        raise InvalidArgument('Frame resolution %r does not match depth resolution %r' % (
            image.shape[:2], depth.values.shape))
    if image.shape[:2] != tuple(camera.resolution):
        raise InvalidArgument('Frame resolution %r does not match camera resolution %r' % (
            image.shape[:2], tuple(camera.resolution)))

    rows, cols = np.nonzero(depth.valid_mask)
    if len(rows) == 0:
        return GaussianSet.empty(max_scale=max_scale)

    d = depth.values[rows, cols].astype(np.float64)
    pixels = np.stack([cols + 0.5, rows + 0.5], axis=1)
    positions = unproject(pixels, d, camera)
    if positions.ndim == 1:
        positions = positions[None]

    footprint = d * math.tan(math.radians(camera.fovy) / 2) * 2. / camera.height
    scales = np.repeat((footprint * scale_multiplier)[:, None], 3, axis=1)
    if max_scale is not None:
        scales = np.minimum(scales, max_scale)

    logging.debug('Lifted %d pixels from %s', len(rows), camera)
    return GaussianSet.from_activated(
        positions=positions,
        colors=image[rows, cols],
        scales=scales,
        opacities=np.full(len(rows), opacity),
        max_scale=max_scale)


class CameraSchedule(object):
    def __init__(self, reference, loops):
        """
        Reference camera c1 plus the outpaint loops, each a list of
        CameraPose. Poses must be distinct across the whole schedule.
        """
        self.reference = reference
        self.loops = [list(loop) for loop in loops]

        seen = {reference.pose_key}
        for loop_index, loop in enumerate(self.loops, 1):
            for camera in loop:
                if camera.pose_key in seen:
                    raise InvalidConfig(
                        'Camera pose (elev %g, azim %g) in loop %d is repeated in the schedule' % (
                            camera.elevation, camera.azimuth, loop_index))
                seen.add(camera.pose_key)

    @property
    def cameras(self):
        cameras = [self.reference]
        for loop in self.loops:
            cameras.extend(loop)
        return cameras

    @property
    def count(self):
        return len(self.cameras)

    def __len__(self):
        return self.count

    def __repr__(self):
        return '<CameraSchedule %d loops, %d cameras>' % (len(self.loops), self.count)

    def to_dict(self):
        ref = self.reference
        return {
            'reference': {'elev': ref.elevation, 'azim': ref.azimuth},
            'loops': [[{'elev': c.elevation, 'azim': c.azimuth} for c in loop] for loop in self.loops],
            'radius': ref.radius,
            'fovy': ref.fovy,
            'near': ref.near,
            'far': ref.far,
            'resolution': list(ref.resolution),
        }

    @classmethod
    def from_dict(cls, data):
        return build_schedule(data)


def _pose_pair(entry):
    if isinstance(entry, dict):
        try:
            return float(entry['elev']), float(entry['azim'])
        except KeyError as e:
            raise InvalidConfig('Camera pose entry is missing key %s: %r' % (e, entry))
    try:
        elevation, azimuth = entry
    except (TypeError, ValueError):
        raise InvalidConfig('Camera pose must be an (elevation, azimuth) pair, got %r' % (entry,))
    return float(elevation), float(azimuth)


def build_schedule(config):
    """
    Build the outpaint camera schedule.

    config is a mapping with optional keys "loops" (list of lists of
    (elevation, azimuth) pairs or {"elev", "azim"} dicts; missing means the
    two default loops), "reference", "radius", "fovy", "near", "far" and
    "resolution". An empty loop list gives a schedule holding only the
    reference camera.

    :rtype: CameraSchedule
    """
    config = dict(config or {})
    resolution = config.get('resolution') or (256, 256)
    if isinstance(resolution, int):
        resolution = (resolution, resolution)
    intrinsics = dict(
        radius=config.get('radius', 2.5),
        fovy=config.get('fovy', 60.),
        near=config.get('near', 0.1),
        far=config.get('far', 10000.),
        resolution=resolution,
    )

    loops = config.get('loops')
    if loops is None:
        loops = DEFAULT_LOOPS
    elevation, azimuth = _pose_pair(config.get('reference') or (0., 0.))

    try:
        reference = make_lookat_camera(elevation, azimuth, **intrinsics)
        camera_loops = []
        for loop in loops:
            camera_loops.append([make_lookat_camera(*_pose_pair(x), **intrinsics) for x in loop])
    except InvalidArgument as e:
        raise InvalidConfig('Invalid camera in schedule: %s' % e)

    return CameraSchedule(reference, camera_loops)
