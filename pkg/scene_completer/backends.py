"""
Interfaces to the generative models the pipeline consumes, the wrappers
that enforce their contracts, and an HTTP adapter to a model server.

Every wrapper takes a BackendSuite as its first argument. The mock
implementations live in scene_completer.mock.
"""
import abc
import base64
import io
import logging
import os
import warnings
from typing import Optional

import numpy as np
import requests
import torch
from pydantic import BaseModel, ConfigDict, ValidationError

from scene_completer.errors import (BackendUnavailable, DegenerateInput, EmptyForegroundWarning,
                                    InvalidArgument, InvalidConfig)
from scene_completer.geometry import DepthMap
from scene_completer.media import VideoBundle

__all__ = [
    'ScoreCondition', 'VideoGenerator', 'Segmenter', 'DepthEstimator', 'ImageInpainter',
    'VideoInpainter', 'DepthInpainter', 'ScoreFunction', 'BackendSuite',
    'generate_reference_video', 'generate_image', 'segment_video', 'estimate_depth',
    'inpaint_image', 'inpaint_video', 'inpaint_depth', 'score_epsilon', 'make_backends',
    'BACKENDS_URL_ENV',
]

BACKENDS_URL_ENV = 'SCENE_COMPLETER_BACKENDS_URL'


class ScoreCondition(object):
    def __init__(self, image=None, camera=None, time=None, text=None):
        """
        What a score function is conditioned on.

        :param image: H x W x 3 conditioning image (seen view or target frame).
        :param camera: (elevation, azimuth) offset of the rendered view from
            the conditioning view, for view-conditioned scores.
        :param time: Normalized time of the conditioning frame.
        :param text: Prompt, for text-conditioned scores.
        """
        self.image = image
        self.camera = camera
        self.time = time
        self.text = text


class VideoGenerator(abc.ABC):
    @abc.abstractmethod
    def generate(self, prompt, image=None, seed=0, n_frames=16, resolution=(256, 256)):
        """Text (and optionally image) to video. Returns a VideoBundle."""

    @abc.abstractmethod
    def generate_image(self, prompt, seed=0, resolution=(256, 256)):
        """Text to image. Returns an H x W x 3 frame."""


class Segmenter(abc.ABC):
    @abc.abstractmethod
    def segment(self, video):
        """Returns (fg VideoBundle, bg VideoBundle, n x H x W boolean masks)."""


class DepthEstimator(abc.ABC):
    @abc.abstractmethod
    def estimate(self, image):
        """Returns a DepthMap of the image resolution."""


class ImageInpainter(abc.ABC):
    @abc.abstractmethod
    def inpaint(self, image, mask, prompt):
        """Fill masked pixels. Returns an H x W x 3 frame."""


class VideoInpainter(abc.ABC):
    @abc.abstractmethod
    def inpaint(self, video, masks, strength, seed=0):
        """Fill masked pixels of every frame. Returns a VideoBundle."""


class DepthInpainter(abc.ABC):
    @abc.abstractmethod
    def inpaint(self, depth, mask):
        """Fill masked depth. Returns a DepthMap valid everywhere."""


class ScoreFunction(abc.ABC):
    @abc.abstractmethod
    def epsilon(self, noisy, condition, gamma):
        """Predicted noise for an H x W x 3 noisy image at noise level gamma."""


class BackendSuite(object):
    def __init__(self, video_generator, segmenter, depth_estimator, image_inpainter,
                 video_inpainter, depth_inpainter, multiview_score, text_score, mode='mock'):
        self.video_generator = video_generator
        self.segmenter = segmenter
        self.depth_estimator = depth_estimator
        self.image_inpainter = image_inpainter
        self.video_inpainter = video_inpainter
        self.depth_inpainter = depth_inpainter
        self.multiview_score = multiview_score
        self.text_score = text_score
        self.mode = mode

    def __repr__(self):
        return '<BackendSuite %s>' % self.mode

    def replay_reference(self, prompt, seed=0, n_frames=16, resolution=(256, 256)):
        """
        Restore backend state tied to a reference video generated by an
        earlier run, before a resumed run skips the generation. Stateless
        backends have nothing to restore.
        """


def _check_frame(image, name='image'):
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidArgument('%s must be H x W x 3, got %r' % (name, image.shape))
    return image


def _check_mask(mask, resolution):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(resolution):
        raise InvalidArgument('Mask shape %r does not match resolution %r' % (mask.shape, tuple(resolution)))
    return mask


def generate_reference_video(backends, prompt, image=None, seed=0, n_frames=16, resolution=(256, 256)):
    """
    Reference video from a prompt, or image-to-video when an image is
    given; frame 1 then equals the image.
    """
    if not prompt:
        raise InvalidArgument('Prompt must not be empty')
    if n_frames < 2:
        raise InvalidArgument('Reference video needs at least 2 frames, got %r' % n_frames)
    if image is not None:
        image = _check_frame(image)
        if image.shape[:2] != tuple(resolution):
            raise InvalidArgument('Conditioning image %r does not match resolution %r' % (
                image.shape[:2], tuple(resolution)))
    video = backends.video_generator.generate(prompt, image=image, seed=seed, n_frames=n_frames,
                                              resolution=resolution)
    if video.n_frames != n_frames or tuple(video.resolution) != tuple(resolution):
        raise BackendUnavailable('Video generator returned %r, expected %d frames at %r' % (
            video, n_frames, tuple(resolution)))
    if image is not None:
        video.frames[0] = image
    logging.debug('Generated reference video %r for prompt %r', video, prompt)
    return video


def generate_image(backends, prompt, seed=0, resolution=(256, 256)):
    if not prompt:
        raise InvalidArgument('Prompt must not be empty')
    return _check_frame(backends.video_generator.generate_image(prompt, seed=seed, resolution=resolution))


def segment_video(backends, video):
    """
    Split a video into a foreground layer on black, a background layer
    with the foreground blacked out, and the binary masks.
    """
    fg, bg, masks = backends.segmenter.segment(video)
    masks = np.asarray(masks, dtype=bool)
    if masks.shape != video.frames.shape[:3]:
        raise BackendUnavailable('Segmenter returned masks %r for video %r' % (masks.shape, video))
    for i, mask in enumerate(masks, 1):
        if not mask.any():
            warnings.warn('No foreground pixels in frame %d' % i, EmptyForegroundWarning)
    fg.masks = masks
    bg.masks = masks
    return fg, bg, masks


def estimate_depth(backends, image):
    image = _check_frame(image)
    depth = backends.depth_estimator.estimate(image)
    if depth.values.shape != image.shape[:2]:
        raise BackendUnavailable('Depth estimator returned %r for a %r image' % (
            depth.values.shape, image.shape[:2]))
    return depth


def inpaint_image(backends, image, mask, prompt=''):
    """Fill the masked pixels. Unmasked pixels are returned unchanged."""
    image = _check_frame(image)
    mask = _check_mask(mask, image.shape[:2])
    if mask.all():
        raise DegenerateInput('Inpainting mask covers the whole frame')
    if not mask.any():
        return image.copy()
    filled = _check_frame(backends.image_inpainter.inpaint(image, mask, prompt))
    return np.where(mask[..., None], filled, image)


def inpaint_video(backends, video, masks, strength, seed=0):
    """
    Video-to-video inpainting at the given strength in [0, 1]. Unmasked
    pixels of every frame are returned unchanged.
    """
    masks = np.asarray(masks, dtype=bool)
    if masks.shape[0] != video.n_frames:
        raise InvalidArgument('Got %d masks for %d frames' % (masks.shape[0], video.n_frames))
    _check_mask(masks[0], video.resolution)
    if not 0. <= strength <= 1.:
        raise InvalidArgument('Inpainting strength must be in [0, 1], got %r' % strength)
    out = backends.video_inpainter.inpaint(video, masks, strength, seed=seed)
    if out.frames.shape != video.frames.shape:
        raise BackendUnavailable('Video inpainter returned %r for %r' % (out, video))
    frames = np.where(masks[..., None], out.frames, video.frames)
    return VideoBundle(frames, masks=masks)


def inpaint_depth(backends, depth, mask):
    """Fill depth inside the mask, keeping values outside it."""
    mask = _check_mask(mask, depth.values.shape)
    if mask.all():
        raise DegenerateInput('Depth inpainting mask covers the whole frame')
    if np.any(~mask & ~depth.valid_mask):
        raise InvalidArgument('Depth outside the inpainting mask must be valid')
    filled = backends.depth_inpainter.inpaint(depth, mask)
    values = np.where(mask, filled.values, depth.values)
    return DepthMap(values, np.ones_like(mask))


def score_epsilon(backends, noisy, condition, gamma, kind='multiview'):
    """
    Predicted noise from the view-conditioned ("multiview") or the
    text-conditioned ("text") score function.

    :param gamma: Noise level in the open interval (0, 1).
    """
    if not 0. < gamma < 1.:
        raise InvalidArgument('Noise level must be in (0, 1), got %r' % gamma)
    if kind == 'multiview':
        score = backends.multiview_score
    elif kind == 'text':
        score = backends.text_score
    else:
        raise InvalidArgument('Unknown score function %r' % kind)
    eps = score.epsilon(noisy, condition, gamma)
    return torch.as_tensor(eps, dtype=noisy.dtype)


# Remote backends

class WireArray(BaseModel):
    model_config = ConfigDict(extra='forbid')

    dtype: str
    shape: list
    data: str

    @classmethod
    def encode(cls, array):
        array = np.ascontiguousarray(array)
        buf = io.BytesIO()
        np.save(buf, array, allow_pickle=False)
        return cls(dtype=str(array.dtype), shape=list(array.shape),
                   data=base64.b64encode(buf.getvalue()).decode('ascii'))

    def decode(self):
        return np.load(io.BytesIO(base64.b64decode(self.data)), allow_pickle=False)


class BackendRequest(BaseModel):
    model_config = ConfigDict(extra='forbid')

    op: str
    payload: dict
    seed: int = 0


class BackendResponse(BaseModel):
    result: dict
    error: Optional[str] = None


class RemoteClient(object):
    def __init__(self, url, timeout=600.):
        if not url:
            raise InvalidConfig('Remote backends need a URL (set %s)' % BACKENDS_URL_ENV)
        self.url = url.rstrip('/')
        self.timeout = timeout
        self.session = requests.Session()

    def call(self, op, payload, seed=0):
        """
        POST one operation. Arrays in the payload are sent as WireArray
        documents and decoded again in the result.
        """
        body = dict((k, WireArray.encode(v).model_dump() if isinstance(v, np.ndarray) else v)
                    for k, v in payload.items())
        request = BackendRequest(op=op, payload=body, seed=seed)
        logging.debug('Backend request %s to %s', op, self.url)
        try:
            reply = self.session.post('%s/%s' % (self.url, op), json=request.model_dump(),
                                      timeout=self.timeout)
            reply.raise_for_status()
            response = BackendResponse.model_validate(reply.json())
        except (requests.RequestException, ValueError, ValidationError) as e:
            raise BackendUnavailable('Backend %s failed at %s: %s' % (op, self.url, e))
        if response.error:
            raise BackendUnavailable('Backend %s reported: %s' % (op, response.error))

        result = {}
        for k, v in response.result.items():
            if isinstance(v, dict) and set(v) == {'dtype', 'shape', 'data'}:
                v = WireArray.model_validate(v).decode()
            result[k] = v
        return result


class RemoteVideoGenerator(VideoGenerator):
    def __init__(self, client):
        self.client = client

    def generate(self, prompt, image=None, seed=0, n_frames=16, resolution=(256, 256)):
        payload = {'prompt': prompt, 'n_frames': n_frames, 'resolution': list(resolution)}
        if image is not None:
            payload['image'] = image
        return VideoBundle(self.client.call('generate_video', payload, seed)['frames'])

    def generate_image(self, prompt, seed=0, resolution=(256, 256)):
        payload = {'prompt': prompt, 'resolution': list(resolution)}
        return self.client.call('generate_image', payload, seed)['image']


class RemoteSegmenter(Segmenter):
    def __init__(self, client):
        self.client = client

    def segment(self, video):
        masks = self.client.call('segment', {'frames': video.frames})['masks'].astype(bool)
        fg = np.where(masks[..., None], video.frames, 0.)
        bg = np.where(masks[..., None], 0., video.frames)
        return VideoBundle(fg, masks), VideoBundle(bg, masks), masks


class RemoteDepthEstimator(DepthEstimator):
    def __init__(self, client):
        self.client = client

    def estimate(self, image):
        return DepthMap(self.client.call('estimate_depth', {'image': image})['depth'])


class RemoteImageInpainter(ImageInpainter):
    def __init__(self, client):
        self.client = client

    def inpaint(self, image, mask, prompt):
        return self.client.call('inpaint_image', {'image': image, 'mask': mask, 'prompt': prompt})['image']


class RemoteVideoInpainter(VideoInpainter):
    def __init__(self, client):
        self.client = client

    def inpaint(self, video, masks, strength, seed=0):
        result = self.client.call('inpaint_video', {
            'frames': video.frames, 'masks': masks, 'strength': float(strength)}, seed)
        return VideoBundle(result['frames'], masks)


class RemoteDepthInpainter(DepthInpainter):
    def __init__(self, client):
        self.client = client

    def inpaint(self, depth, mask):
        result = self.client.call('inpaint_depth', {
            'depth': depth.values, 'valid': depth.valid_mask, 'mask': mask})
        return DepthMap(result['depth'])


class RemoteScoreFunction(ScoreFunction):
    def __init__(self, client, kind):
        self.client = client
        self.kind = kind

    def epsilon(self, noisy, condition, gamma):
        payload = {'noisy': noisy.detach().cpu().numpy(), 'gamma': float(gamma)}
        if condition.image is not None:
            payload['image'] = np.asarray(condition.image, dtype=np.float32)
        if condition.camera is not None:
            payload['camera'] = list(condition.camera)
        if condition.time is not None:
            payload['time'] = float(condition.time)
        if condition.text is not None:
            payload['text'] = condition.text
        return self.client.call('score_%s' % self.kind, payload)['epsilon']


def make_remote_suite(url, timeout=600.):
    client = RemoteClient(url, timeout)
    return BackendSuite(
        video_generator=RemoteVideoGenerator(client),
        segmenter=RemoteSegmenter(client),
        depth_estimator=RemoteDepthEstimator(client),
        image_inpainter=RemoteImageInpainter(client),
        video_inpainter=RemoteVideoInpainter(client),
        depth_inpainter=RemoteDepthInpainter(client),
        multiview_score=RemoteScoreFunction(client, 'multiview'),
        text_score=RemoteScoreFunction(client, 'text'),
        mode='remote')


def make_backends(config, seed=0):
    """
    Backend suite for a BackendsConfig. The environment variable
    SCENE_COMPLETER_BACKENDS_URL overrides the configured URL.
    """
    if config.mode == 'mock':
        from scene_completer.mock import make_mock_suite
        return make_mock_suite(seed=seed)
    if config.mode == 'remote':
        return make_remote_suite(os.environ.get(BACKENDS_URL_ENV) or config.url, config.timeout)
    raise InvalidConfig('Unknown backend mode %r' % config.mode)
