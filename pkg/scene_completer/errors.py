# Exceptions raised by the scene completer
#

__author__ = 'SceneCompleter developers'
__maintainer__ = 'SceneCompleter developers'


class SceneCompleterError(Exception):
    """
    A general exception raised on purpose by the scene completer.
    """
    pass


class InvalidArgument(SceneCompleterError, ValueError):
    """
    An argument is outside the range an operation accepts, for example
    a non-positive radius or frames of mismatched resolution.
    """
    pass


class BehindCamera(InvalidArgument):
    """
    A point cannot be projected because it is not in front of the
    camera (depth <= near plane).
    """
    pass


class DomainError(InvalidArgument):
    """
    A normalized timestamp falls outside the [0, 1] domain of a
    deformation field.
    """
    pass


class InvalidConfig(SceneCompleterError):
    """
    A configuration document cannot be used. List of possible reasons:

    1. The JSON cannot be parsed or fails validation.
    2. A camera pose is repeated across outpaint loops.
    """
    pass


class NotApplicable(SceneCompleterError):
    """
    The operation does not apply to this object, for example total
    variation of a deformation field without feature planes.
    """
    pass


class DegenerateInput(SceneCompleterError):
    """
    The input leaves nothing to anchor the computation on, for example
    an inpainting mask that covers the whole frame.
    """
    pass


class DegenerateDepth(DegenerateInput):
    """
    A depth map is constant over the region used to compare value
    ranges, so the relative depth scale is undefined.
    """
    pass


class DegenerateMask(DegenerateInput):
    """
    A mask has a zero-width bounding box.
    """
    pass


class MissingForeground(SceneCompleterError):
    """
    A foreground mask is empty in some frame.
    """

    def __init__(self, message, frame_index=None):
        super(MissingForeground, self).__init__(message)
        self.frame_index = frame_index


class BackendUnavailable(SceneCompleterError):
    """
    A generative backend cannot be reached or is not installed.
    """
    pass


class Diverged(SceneCompleterError):
    """
    An optimization produced a non-finite loss.
    """

    def __init__(self, message, iteration=None):
        super(Diverged, self).__init__(message)
        self.iteration = iteration


class StageFailure(SceneCompleterError):
    """
    A pipeline stage failed. The stage name (and loop/camera context
    for outpainting) is kept so the run manifest can record it.
    """

    def __init__(self, message, stage=None):
        super(StageFailure, self).__init__(message)
        self.stage = stage


class SceneLoadError(SceneCompleterError):
    """
    A persisted scene, bundle or artifact is missing or malformed.
    """
    pass


class EmptyForegroundWarning(UserWarning):
    """
    Segmentation found no foreground pixels in a frame.
    """
    pass
