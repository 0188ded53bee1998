"""
Deterministic stand-ins for the generative backends.

The mock world is a two-sphere figurine moving across a textured
backdrop. Everything is analytic, so tests can compare pipeline outputs
with the ground truth the world records: foreground masks, depth and the
on-screen path of the figurine.
"""
import hashlib
import logging
import math

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from scene_completer.backends import (BackendSuite, DepthEstimator, DepthInpainter, ImageInpainter,
                                      ScoreFunction, Segmenter, VideoGenerator, VideoInpainter)
from scene_completer.errors import DegenerateInput, InvalidArgument
from scene_completer.geometry import DepthMap, box_placement, make_lookat_camera
from scene_completer.media import VideoBundle, resize_frame
from scene_completer.sds import alpha_bar

__all__ = ['MockWorld', 'harmonic_fill', 'frame_key', 'make_mock_suite', 'MockBackendSuite']

_LIGHT = np.array([0.4, -0.8, 0.6]) / np.linalg.norm([0.4, -0.8, 0.6])


def frame_key(frame):
    return hashlib.sha1(np.ascontiguousarray(frame, dtype=np.float32).tobytes()).hexdigest()


def split_layers(frames, masks):
    """Foreground on black and background with the foreground blacked out."""
    fg = np.where(masks[..., None], frames, np.float32(0.))
    bg = np.where(masks[..., None], np.float32(0.), frames)
    return fg, bg


class Sphere(object):
    def __init__(self, center, radius, color):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        self.color = np.asarray(color, dtype=np.float64)


class MockWorld(object):
    # Foreground palette is strongly red, the backdrop never exceeds 0.4 in red.
    BODY_COLOR = (0.92, 0.18, 0.12)
    HEAD_COLOR = (0.95, 0.3, 0.35)
    FG_DEPTH = 1.8
    CANONICAL_EXTENT = 0.8

    def __init__(self, seed=0, n_frames=16, resolution=(64, 64), radius=2.5, fovy=60.):
        """
        :param seed: Selects the texture phase and the figurine's path.
        :param n_frames: Video length.
        :param resolution: (height, width) of every frame.
        """
        if n_frames < 2:
            raise InvalidArgument('Mock world needs at least 2 frames, got %r' % n_frames)
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.n_frames = n_frames
        self.resolution = tuple(resolution)
        self.radius = radius
        self.fovy = fovy
        self.camera = make_lookat_camera(0., 0., radius, fovy, resolution=self.resolution)

        self.phase = rng.uniform(0., 2 * math.pi)
        self.stripes = rng.uniform(3., 5.)
        self.swing_phase = rng.uniform(0., 2 * math.pi)
        self.path_start = np.array([0.35 + rng.uniform(-0.03, 0.03), 0.62])
        self.path_end = np.array([0.6 + rng.uniform(-0.03, 0.03), 0.58])
        self.scale_start, self.scale_end = 0.5, 0.6

        self.frames, self.masks, self.depth = [], [], []
        self.shifts, self.scales = [], []
        self.depth_registry = {}
        self._ref_boxes = {}

        background_depth = self.background_depth()
        for i in range(n_frames):
            t = i / float(n_frames - 1)
            fg_rgb, fg_mask = self.place_foreground(t)
            frame = np.where(fg_mask[..., None], fg_rgb, self.background_frame(t)).astype(np.float32)
            depth = np.where(fg_mask, self.FG_DEPTH, background_depth).astype(np.float32)

            self.frames.append(frame)
            self.masks.append(fg_mask)
            self.depth.append(depth)
            shift, scale = _box_placement(fg_mask, self.CANONICAL_EXTENT)
            self.shifts.append(shift)
            self.scales.append(scale)

            _, bg = split_layers(frame[None], fg_mask[None])
            self.depth_registry[frame_key(frame)] = depth
            self.depth_registry[frame_key(bg[0])] = background_depth

        self.frames = np.stack(self.frames)
        self.masks = np.stack(self.masks)
        self.depth = np.stack(self.depth)
        self.shifts = np.stack(self.shifts)
        self.scales = np.asarray(self.scales)
        logging.debug('Built mock world seed=%d with %d frames at %r', seed, n_frames, self.resolution)

    def _grid(self):
        height, width = self.resolution
        y = (np.arange(height) + 0.5)[:, None] / height
        x = (np.arange(width) + 0.5)[None, :] / width
        return np.broadcast_to(y, (height, width)), np.broadcast_to(x, (height, width))

    def block_mask(self):
        y, x = self._grid()
        return (y >= 0.55) & (x >= 0.7)

    def background_frame(self, t):
        y, x = self._grid()
        top = np.array([0.25, 0.45, 0.85])
        bottom = np.array([0.2, 0.55, 0.25])
        frame = top * (1 - y[..., None]) + bottom * y[..., None]
        frame[self.block_mask()] = (0.3, 0.28, 0.22)

        texture = 0.03 * np.sin(2 * math.pi * (7 * x + 5 * y) + self.phase)
        sway = 0.05 * np.sin(2 * math.pi * (self.stripes * x + 0.15 * math.sin(2 * math.pi * t + self.phase)))
        sway = np.where(y < 0.5, sway, 0.)
        frame = frame + (texture + sway)[..., None] * np.array([1., 0.6, 0.3])
        return np.clip(frame, 0., 1.).astype(np.float32)

    def background_depth(self):
        y, _ = self._grid()
        depth = 6. - 3. * y
        depth = np.where(self.block_mask(), 2., depth)
        return depth.astype(np.float32)

    def spheres(self, t):
        head_x = 0.2 * math.sin(2 * math.pi * t + self.swing_phase)
        return [Sphere((0., -0.15, 0.), 0.55, self.BODY_COLOR),
                Sphere((head_x, 0.4, 0.), 0.3, self.HEAD_COLOR)]

    def object_view(self, camera, t):
        """
        Ray-cast the figurine at normalized time t.

        :return: (H x W x 3 rgb on black, H x W hit mask, H x W depth)
        """
        height, width = camera.resolution
        cx, cy = camera.principal_point
        v, u = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing='ij')
        rays = np.stack([(u - cx) / camera.focal, (v - cy) / camera.focal, np.ones_like(u)], axis=-1)
        rays = rays.dot(camera.rotation)
        rays /= np.linalg.norm(rays, axis=-1, keepdims=True)
        origin = camera.position

        best = np.full((height, width), np.inf)
        rgb = np.zeros((height, width, 3))
        for sphere in self.spheres(t):
            oc = origin - sphere.center
            b = rays.dot(oc)
            disc = b * b - (oc.dot(oc) - sphere.radius ** 2)
            hit = disc >= 0
            dist = np.where(hit, -b - np.sqrt(np.where(hit, disc, 0.)), np.inf)
            closer = hit & (dist > 0) & (dist < best)
            points = origin + rays * dist[..., None]
            normals = (points - sphere.center) / sphere.radius
            shade = 0.7 + 0.3 * np.clip(-normals.dot(_LIGHT), 0., 1.)
            rgb = np.where(closer[..., None], sphere.color * shade[..., None], rgb)
            best = np.where(closer, dist, best)

        mask = np.isfinite(best)
        depth = np.where(mask, best * rays.dot(camera.rotation[2]), 0.)
        return rgb.astype(np.float32), mask, depth.astype(np.float32)

    def place_foreground(self, t):
        """Reference-view figurine moved along its screen path with nearest sampling."""
        height, width = self.resolution
        rgb, mask, _ = self.object_view(self.camera, t)
        shift = (self.path_start + (self.path_end - self.path_start) * t) * np.array([width, height])
        shift[1] += 0.02 * height * math.sin(2 * math.pi * t)
        scale = self.scale_start + (self.scale_end - self.scale_start) * t

        rows = np.floor(height / 2. + (np.arange(height) + 0.5 - shift[1]) / scale).astype(int)
        cols = np.floor(width / 2. + (np.arange(width) + 0.5 - shift[0]) / scale).astype(int)
        valid = ((rows >= 0) & (rows < height))[:, None] & ((cols >= 0) & (cols < width))[None, :]
        rows, cols = np.clip(rows, 0, height - 1), np.clip(cols, 0, width - 1)
        placed_mask = mask[rows[:, None], cols[None, :]] & valid
        placed_rgb = np.where(placed_mask[..., None], rgb[rows[:, None], cols[None, :]], 0.)
        return placed_rgb.astype(np.float32), placed_mask

    def normalized_object_view(self, relative_camera, t, resolution):
        """
        The figurine seen from a camera offset from the reference view,
        centered and scaled the way foreground frames are normalized
        (using the reference view's bounding box at the same time).
        """
        t = 0. if t is None else float(t)
        elevation, azimuth = relative_camera
        elevation = float(np.clip(elevation, -89., 89.))
        camera = make_lookat_camera(elevation, azimuth, self.radius, self.fovy, resolution=resolution)
        rgb, mask, _ = self.object_view(camera, t)

        key = (round(t, 6), tuple(resolution))
        if key not in self._ref_boxes:
            _, ref_mask, _ = self.object_view(self.camera.with_resolution(resolution), t)
            self._ref_boxes[key] = _box_placement(ref_mask, self.CANONICAL_EXTENT)
        center, scale = self._ref_boxes[key]

        height, width = resolution
        rows = np.floor(center[1] + (np.arange(height) + 0.5 - height / 2.) * scale).astype(int)
        cols = np.floor(center[0] + (np.arange(width) + 0.5 - width / 2.) * scale).astype(int)
        valid = ((rows >= 0) & (rows < height))[:, None] & ((cols >= 0) & (cols < width))[None, :]
        rows, cols = np.clip(rows, 0, height - 1), np.clip(cols, 0, width - 1)
        out = rgb[rows[:, None], cols[None, :]]
        return np.where(valid[..., None], out, 0.).astype(np.float32)

    def video(self):
        return VideoBundle(self.frames.copy())


def _box_placement(mask, extent):
    """Bounding-box center (x, y) and size relative to extent * height."""
    center, size = box_placement(mask)
    return np.array(center), size / (extent * mask.shape[0])


def harmonic_fill(values, mask):
    """
    Fill masked pixels with the solution of Laplace's equation, using the
    unmasked pixels as boundary values and zero flux at the image border.
    Unmasked pixels are returned unchanged.

    :param values: H x W or H x W x C array.
    :param mask: H x W booleans, True where values are unknown.
    """
    values = np.asarray(values)
    mask = np.asarray(mask, dtype=bool)
    if mask.all():
        raise DegenerateInput('Nothing to anchor the fill on, mask covers the whole frame')
    out = values.copy()
    if not mask.any():
        return out

    flat = values.reshape(values.shape[0], values.shape[1], -1).astype(np.float64)
    height, width = mask.shape
    rows, cols = np.nonzero(mask)
    k = len(rows)
    index = np.full(mask.shape, -1)
    index[rows, cols] = np.arange(k)

    diagonal = np.zeros(k)
    rhs = np.zeros((k, flat.shape[2]))
    off_rows, off_cols = [], []
    for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        nr, nc = rows + dr, cols + dc
        inside = (nr >= 0) & (nr < height) & (nc >= 0) & (nc < width)
        diagonal[inside] += 1
        p = np.nonzero(inside)[0]
        nr, nc = nr[inside], nc[inside]
        unknown = mask[nr, nc]
        off_rows.append(p[unknown])
        off_cols.append(index[nr[unknown], nc[unknown]])
        rhs[p[~unknown]] += flat[nr[~unknown], nc[~unknown]]

    off_rows, off_cols = np.concatenate(off_rows), np.concatenate(off_cols)
    laplacian = sparse.coo_matrix((-np.ones(len(off_rows)), (off_rows, off_cols)), shape=(k, k))
    laplacian = (laplacian + sparse.diags(diagonal)).tocsc()
    solution = splu(laplacian).solve(rhs)

    filled = flat.copy()
    filled[rows, cols] = solution
    out[mask] = filled.reshape(values.shape)[mask].astype(values.dtype)
    return out


class MockRegistry(object):
    """Ground truth shared between mock backends: the current world and known depth maps."""

    def __init__(self):
        self.world = None
        self.depth = {}

    def add_world(self, world):
        self.world = world
        self.depth.update(world.depth_registry)


class MockVideoGenerator(VideoGenerator):
    def __init__(self, registry):
        self.registry = registry

    def generate(self, prompt, image=None, seed=0, n_frames=16, resolution=(256, 256)):
        world = MockWorld(seed=seed, n_frames=n_frames, resolution=resolution)
        self.registry.add_world(world)
        video = world.video()
        if image is not None:
            video.frames[0] = image
        return video

    def generate_image(self, prompt, seed=0, resolution=(256, 256)):
        return MockWorld(seed=seed, n_frames=2, resolution=resolution).frames[0].copy()


class MockSegmenter(Segmenter):
    def segment(self, video):
        frames = video.frames
        masks = (frames[..., 0] > 0.6) & (frames[..., 1] < 0.45) & (frames[..., 2] < 0.5)
        fg, bg = split_layers(frames, masks)
        return VideoBundle(fg, masks), VideoBundle(bg, masks), masks


class MockDepthEstimator(DepthEstimator):
    def __init__(self, registry):
        self.registry = registry

    def estimate(self, image):
        depth = self.registry.depth.get(frame_key(image))
        if depth is not None:
            return DepthMap(depth.copy())
        height, width = image.shape[:2]
        y = (np.arange(height) + 0.5)[:, None] / height
        return DepthMap(np.broadcast_to(6. - 3. * y, (height, width)).copy())


class MockImageInpainter(ImageInpainter):
    def inpaint(self, image, mask, prompt):
        return np.clip(harmonic_fill(image, mask), 0., 1.)


class MockVideoInpainter(VideoInpainter):
    def __init__(self, seed=0, scale=0.05):
        """
        Keeps the pseudo video and adds a smooth, temporally coherent
        pattern of amplitude strength * scale inside the masks. The
        pattern vanishes at frame 1.
        """
        self.seed = seed
        self.scale = scale

    def inpaint(self, video, masks, strength, seed=0):
        n, height, width = masks.shape
        if n != video.n_frames:
            raise InvalidArgument('Got %d masks for %d frames' % (n, video.n_frames))
        out = video.frames.copy()
        if strength == 0:
            return VideoBundle(out, masks)

        rng = np.random.default_rng([self.seed, seed])
        fx, fy = rng.uniform(1., 3., size=2)
        phase = rng.uniform(0., 2 * math.pi)
        y = (np.arange(height) + 0.5)[:, None] / height
        x = (np.arange(width) + 0.5)[None, :] / width
        for t in range(n):
            ramp = math.sin(math.pi * t / (n - 1)) if n > 1 else 0.
            if ramp == 0:
                continue
            pattern = np.sin(2 * math.pi * (fx * x + fy * y) + phase + 0.6 * t / (n - 1))
            delta = (strength * self.scale * ramp * pattern).astype(np.float32)
            out[t] = np.where(masks[t][..., None], np.clip(out[t] + delta[..., None], 0., 1.), out[t])
        return VideoBundle(out, masks)


class MockDepthInpainter(DepthInpainter):
    def inpaint(self, depth, mask):
        log_depth = np.where(mask, 0., np.log(np.where(mask, 1., depth.values)))
        filled = np.exp(harmonic_fill(log_depth.astype(np.float64), mask))
        return DepthMap(np.where(mask, filled, depth.values).astype(np.float32))


class MockScoreFunction(ScoreFunction):
    def __init__(self, kind, registry):
        """
        Predicts noise as if the clean image were a known target:
        the world's figurine seen from the conditioning camera for
        "multiview", the conditioning image for "text".
        """
        self.kind = kind
        self.registry = registry

    def target(self, resolution, condition):
        world = self.registry.world
        if self.kind == 'multiview' and world is not None and condition.camera is not None:
            return world.normalized_object_view(condition.camera, condition.time, resolution)
        if condition.image is not None:
            return resize_frame(condition.image, resolution)
        return np.zeros(tuple(resolution) + (3,), dtype=np.float32)

    def epsilon(self, noisy, condition, gamma):
        target = self.target(tuple(noisy.shape[:2]), condition)
        ab = alpha_bar(gamma)
        noisy = noisy.detach().cpu().numpy()
        return (noisy - math.sqrt(ab) * target) / math.sqrt(1. - ab)


class MockBackendSuite(BackendSuite):
    def __init__(self, seed=0, perturbation_scale=0.05):
        self.registry = MockRegistry()
        super(MockBackendSuite, self).__init__(
            video_generator=MockVideoGenerator(self.registry),
            segmenter=MockSegmenter(),
            depth_estimator=MockDepthEstimator(self.registry),
            image_inpainter=MockImageInpainter(),
            video_inpainter=MockVideoInpainter(seed, perturbation_scale),
            depth_inpainter=MockDepthInpainter(),
            multiview_score=MockScoreFunction('multiview', self.registry),
            text_score=MockScoreFunction('text', self.registry),
            mode='mock')

    def replay_reference(self, prompt, seed=0, n_frames=16, resolution=(256, 256)):
        self.registry.add_world(MockWorld(seed=seed, n_frames=n_frames, resolution=resolution))


def make_mock_suite(seed=0, perturbation_scale=0.05):
    return MockBackendSuite(seed, perturbation_scale)
