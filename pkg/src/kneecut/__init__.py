"""Token grammar, constrained decoding, pose geometry, stream alignment, a
six-plane knee-resection bench simulator and SR/SPL/Chamfer evaluation for
language-model surgical policies."""

__version__ = "0.1.0"

from .config import ConfigError
from .decoding import (DecodeConfig, GrammarState, PlaneStatus, SafetyContext, advance, combined_mask,
                       grammar_mask, safety_mask, step, validate_sequence)
from .evaluation import (EvalConfig, EvalReport, EpisodeScore, aggregate, chamfer_bidirectional,
                         chamfer_bruteforce, episode_success, score_episode, spl)
from .geometry import (PoseGraph, ResectionPlan, ResectionPlane, SE3Transform, SurfacePatch, alignment_error,
                       compose, invert, load_plan)
from .grammar import (ActionCommand, GrammarConfig, Primitive, QuantSpec, Vocabulary, decode_tokens,
                      default_grammar, dequantize, encode_command, encode_commands, load_grammar_config, quantize)
from .sim import EpisodeResult, NoiseModel, ProsthesisModel, load_model, run_episode, shortest_path_length
from .timeline import ReferenceGrid, StampedStream, align_episode, detect_dropouts, resample, window

__all__ = [name for name in dir() if not name.startswith("_")]
