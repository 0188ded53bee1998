import hashlib
import json
import logging
import math

import torch

from scene_completer.errors import Diverged

__all__ = ['substream_seed', 'substream', 'LossRecorder', 'check_finite', 'mse']


def substream_seed(seed, name):
    """Seed of the named random substream derived from a run seed."""
    digest = hashlib.sha256(('%d:%s' % (seed, name)).encode('utf-8')).hexdigest()
    return int(digest[:15], 16)


def substream(seed, name):
    """A torch.Generator for the named substream."""
    generator = torch.Generator()
    generator.manual_seed(substream_seed(seed, name))
    return generator


class LossRecorder(object):
    def __init__(self, stage, log_interval=50):
        """
        Collects per-iteration loss components of one stage and logs a
        progress line every log_interval iterations.
        """
        self.stage = stage
        self.log_interval = log_interval
        self.history = []

    def record(self, iteration, **components):
        entry = dict((k, float(v)) for k, v in components.items())
        entry['iteration'] = int(iteration)
        self.history.append(entry)
        if self.log_interval and iteration % self.log_interval == 0:
            logging.info('%s iter %d: %s', self.stage, iteration,
                         ' '.join('%s=%.5g' % (k, v) for k, v in sorted(components.items())))

    def series(self, name):
        return [entry[name] for entry in self.history if name in entry]

    def save(self, path):
        with open(path, 'w') as f:
            json.dump({'stage': self.stage, 'history': self.history}, f, indent=1, sort_keys=True)


def check_finite(loss, iteration, stage=''):
    value = float(loss)
    if not math.isfinite(value):
        raise Diverged('%s loss became %r at iteration %d' % (stage or 'Optimization', value, iteration),
                       iteration=iteration)
    return value


def mse(a, b):
    return ((a - b) ** 2).mean()
