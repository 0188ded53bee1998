import logging
import os

import imageio
import numpy as np
import torch
from torch.nn import functional as F

from scene_completer.errors import InvalidArgument, SceneLoadError
from scene_completer.geometry import DepthMap

__all__ = [
    'VideoBundle', 'to_uint8', 'save_png', 'load_image', 'resize_frame',
    'write_image_sequence', 'write_mp4', 'psnr',
]


class VideoBundle(object):
    def __init__(self, frames, masks=None, depth=None):
        """
        A short video as float RGB frames, with optional per-frame
        boolean masks and depth maps.

        :param frames: n x H x W x 3 values in [0, 1].
        :param masks: Optional n x H x W booleans.
        :param depth: Optional list of n DepthMap.
        """
        frames = np.asarray(frames, dtype=np.float32)
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise InvalidArgument('Video frames must be n x H x W x 3, got %r' % (frames.shape,))
        if masks is not None:
            masks = np.asarray(masks, dtype=bool)
            if masks.shape != frames.shape[:3]:
                raise InvalidArgument('Video masks %r do not match frames %r' % (
                    masks.shape, frames.shape[:3]))
        if depth is not None and len(depth) != frames.shape[0]:
            raise InvalidArgument('Expected %d depth maps, got %d' % (frames.shape[0], len(depth)))

        self.frames = frames
        self.masks = masks
        self.depth = depth

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def resolution(self):
        return self.frames.shape[1:3]

    def __len__(self):
        return self.n_frames

    def __repr__(self):
        return '<VideoBundle %d frames %dx%d>' % (self.n_frames, self.resolution[0], self.resolution[1])

    def copy(self):
        return VideoBundle(self.frames.copy(),
                           None if self.masks is None else self.masks.copy(),
                           None if self.depth is None else [d.copy() for d in self.depth])

    def save(self, directory, png=True):
        """Write frames.npy (and masks.npy), plus one PNG per frame."""
        if not os.path.isdir(directory):
            os.makedirs(directory)
        np.save(os.path.join(directory, 'frames.npy'), self.frames)
        if self.masks is not None:
            np.save(os.path.join(directory, 'masks.npy'), self.masks)
        if self.depth is not None:
            np.save(os.path.join(directory, 'depth.npy'), np.stack([d.values for d in self.depth]))
            np.save(os.path.join(directory, 'depth_valid.npy'), np.stack([d.valid_mask for d in self.depth]))
        if png:
            write_image_sequence(self.frames, directory)

    @classmethod
    def load(cls, directory):
        try:
            frames = np.load(os.path.join(directory, 'frames.npy'))
        except (IOError, OSError, ValueError) as e:
            raise SceneLoadError('Cannot load video from %s: %s' % (directory, e))

        masks_path = os.path.join(directory, 'masks.npy')
        masks = np.load(masks_path) if os.path.exists(masks_path) else None
        depth = None
        depth_path = os.path.join(directory, 'depth.npy')
        if os.path.exists(depth_path):
            values = np.load(depth_path)
            valid = np.load(os.path.join(directory, 'depth_valid.npy'))
            depth = [DepthMap(v, m) for v, m in zip(values, valid)]
        return cls(frames, masks, depth)


def to_uint8(frame):
    return np.round(np.clip(frame, 0., 1.) * 255.).astype(np.uint8)


def save_png(frame, path):
    imageio.imwrite(path, to_uint8(frame))


def load_image(path, resolution=None):
    """Read an image as float32 RGB in [0, 1], optionally resized to (H, W)."""
    try:
        image = np.asarray(imageio.imread(path))
    except (IOError, OSError, ValueError) as e:
        raise InvalidArgument('Cannot read image %s: %s' % (path, e))
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=-1)
    image = image[..., :3].astype(np.float32) / 255.
    if resolution is not None:
        image = resize_frame(image, resolution)
    return image


def resize_frame(frame, resolution):
    """Bilinear (area when shrinking) resize of an H x W x C frame."""
    frame = np.asarray(frame, dtype=np.float32)
    if tuple(frame.shape[:2]) == tuple(resolution):
        return frame.copy()
    tensor = torch.from_numpy(frame).permute(2, 0, 1)[None]
    shrinking = resolution[0] < frame.shape[0] and resolution[1] < frame.shape[1]
    if shrinking:
        out = F.interpolate(tensor, size=tuple(resolution), mode='area')
    else:
        out = F.interpolate(tensor, size=tuple(resolution), mode='bilinear', align_corners=False)
    return out[0].permute(1, 2, 0).numpy().clip(0., 1.)


def write_image_sequence(frames, directory, prefix='frame'):
    if not os.path.isdir(directory):
        os.makedirs(directory)
    paths = []
    for i, frame in enumerate(frames, 1):
        path = os.path.join(directory, '%s_%04d.png' % (prefix, i))
        save_png(frame, path)
        paths.append(path)
    return paths


def write_mp4(frames, path, fps=8):
    """
    Encode frames as MP4. Returns the path, or None when no encoder is
    installed.
    """
    try:
        imageio.mimwrite(path, [to_uint8(f) for f in frames], fps=fps)
    except (ImportError, RuntimeError, ValueError, OSError) as e:
        logging.warning('Cannot write %s, is imageio-ffmpeg installed? (%s)', path, e)
        return None
    return path


def psnr(a, b):
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0:
        return float('inf')
    return 10. * np.log10(1. / mse)
