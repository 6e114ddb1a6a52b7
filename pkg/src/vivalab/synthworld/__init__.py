"""Procedural shape-world videos, paired edits, oracle masks, closed grammar."""

from . import dataset, grammar, pairs, scene  # noqa: F401
from .grammar import Instruction  # noqa: F401
from .pairs import EditPair, GenerationError, WorldConfig  # noqa: F401
from .scene import MaskVideo, SceneSpec, VideoTensor  # noqa: F401
