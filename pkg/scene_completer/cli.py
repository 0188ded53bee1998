import argparse
import json
import logging
import os
import sys

import numpy as np

from scene_completer.config import load_config
from scene_completer.driver import render_outputs, run, validate_scene
from scene_completer.errors import InvalidConfig, SceneCompleterError, SceneLoadError
from scene_completer.geometry import DepthMap
from scene_completer.media import VideoBundle
from scene_completer.mock import MockWorld

EXIT_OK = 0
EXIT_INVALID_CONFIG = 2
EXIT_STAGE_FAILURE = 3
EXIT_VALIDATION_FAILURE = 4


def _run(args):
    config = load_config(args.config)
    run(config, args.out, resume=not args.no_resume)
    logging.info('Scene written to %s', args.out)
    return EXIT_OK


def _render(args):
    written = render_outputs(args.scene, cameras=args.cameras, times=args.times, out_dir=args.out,
                             resolution=args.resolution, fps=args.fps)
    logging.info('Wrote %d frames for %d cameras', sum(len(x) for x in written.values()), len(written))
    return EXIT_OK


def _validate(args):
    try:
        report = validate_scene(args.scene)
    except SceneLoadError as e:
        logging.error('Cannot validate %s: %s', args.scene, e)
        return EXIT_VALIDATION_FAILURE
    print(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    if not report.ok:
        logging.error('Validation failed: %s', ', '.join(report.failures))
        return EXIT_VALIDATION_FAILURE
    return EXIT_OK


def _mock_world(args):
    world = MockWorld(seed=args.seed, n_frames=args.n_frames, resolution=(args.resolution, args.resolution))
    VideoBundle(world.frames, masks=world.masks,
                depth=[DepthMap(d) for d in world.depth]).save(args.out)
    with open(os.path.join(args.out, 'path.json'), 'w') as f:
        json.dump({'seed': args.seed, 'shifts': world.shifts.tolist(), 'scales': world.scales.tolist()},
                  f, indent=1, sort_keys=True)
    np.save(os.path.join(args.out, 'background_depth.npy'), world.background_depth())
    logging.info('Wrote mock world seed %d to %s', args.seed, args.out)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog='scene-completer',
                                     description='Generate, render and check composed 4D scenes.')
    parser.add_argument('--verbose', '-v', action='store_true', help='Log debug messages.')
    commands = parser.add_subparsers(dest='command')
    commands.required = True

    p = commands.add_parser('run', help='Run the whole pipeline.')
    p.add_argument('--config', required=True, help='JSON configuration file.')
    p.add_argument('--out', required=True, help='Run directory.')
    p.add_argument('--no-resume', action='store_true', help='Recompute every stage.')
    p.set_defaults(handler=_run)

    p = commands.add_parser('render', help='Render a composed scene.')
    p.add_argument('--scene', required=True, help='Scene (run) directory.')
    p.add_argument('--cameras', default='schedule',
                   help='"schedule", "orbit" or a list "elev:azim,elev:azim".')
    p.add_argument('--times', default='all', help='"all" or 1-based frame indices "1,2,3".')
    p.add_argument('--out', default=None, help='Output directory, SCENE/renders by default.')
    p.add_argument('--resolution', type=int, default=None, help='Output resolution in pixels.')
    p.add_argument('--fps', type=int, default=8)
    p.set_defaults(handler=_render)

    p = commands.add_parser('validate', help='Check a persisted scene.')
    p.add_argument('--scene', required=True)
    p.set_defaults(handler=_validate)

    p = commands.add_parser('mock-world', help='Write the synthetic mock world.')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--n-frames', type=int, default=16)
    p.add_argument('--resolution', type=int, default=64)
    p.add_argument('--out', required=True)
    p.set_defaults(handler=_mock_world)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s %(levelname)s %(message)s')
    try:
        return args.handler(args)
    except InvalidConfig as e:
        logging.error('%s', e)
        return EXIT_INVALID_CONFIG
    except SceneCompleterError as e:
        logging.error('%s', e)
        return EXIT_STAGE_FAILURE


if __name__ == '__main__':
    sys.exit(main())
