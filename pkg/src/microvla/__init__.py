"""Desk-scale vision-language-action policy with two decode regimes.

A small transformer maps an image grid plus an instruction token to a
discretized end-effector action, decoded either autoregressively (one
sequential forward per action token) or jointly (every action token from a
single forward pass). The package covers data generation, training,
evaluation and a latency/FLOP benchmark comparing the two paths.
"""

import os

# Cap worker threads before numpy loads its BLAS. Deterministic artifacts
# require a fixed reduction order, so the default is one thread.
_threads = os.environ.get("EVLA_TOY_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)
del os, _var, _threads

from .codec import ActionCodec
from .encoder import EncoderParams, ImageGrid, concat_feature_dims, encode_image
from .masks import AttentionMask, SequenceLayout, build_mask
from .policy import PolicyConfig, PolicyParams, assemble_sequence, forward, forward_cached, init_params
from .tensor import Tensor, grad_check
from .world import Episode, TaskConfig, gen_dataset, gen_episode

__version__ = "0.1.0"

__all__ = [
    "ActionCodec",
    "AttentionMask",
    "EncoderParams",
    "Episode",
    "ImageGrid",
    "PolicyConfig",
    "PolicyParams",
    "SequenceLayout",
    "TaskConfig",
    "Tensor",
    "assemble_sequence",
    "build_mask",
    "concat_feature_dims",
    "encode_image",
    "forward",
    "forward_cached",
    "gen_dataset",
    "gen_episode",
    "grad_check",
    "init_params",
]
