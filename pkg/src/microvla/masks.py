"""Attention allow-matrix construction for the two decoding regimes.

The joint regime is defined by lifting the causal restriction over the
action block: every action position may attend every prefix position and
every other action position, so all action tokens can be predicted from one
forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError


class MaskMode(str, Enum):
    CAUSAL = "causal"
    JOINT = "joint"


@dataclass(frozen=True)
class SequenceLayout:
    """Positions of the prefix (image patches + instruction) and action block.

    Action positions are always the final `action_len` positions.
    """

    prefix_len: int
    action_len: int

    def __post_init__(self):
        if self.prefix_len < 1:
            raise ConfigError(f"prefix_len must be >= 1, got {self.prefix_len}")
        if self.action_len < 1:
            raise ConfigError(f"action_len must be >= 1, got {self.action_len}")

    @property
    def total(self) -> int:
        return self.prefix_len + self.action_len

    @property
    def action_positions(self) -> range:
        return range(self.prefix_len, self.total)


@dataclass(frozen=True)
class AttentionMask:
    """Boolean allow-matrix: allow[q, k] means query q may attend key k."""

    allow: np.ndarray

    @property
    def size(self) -> int:
        return self.allow.shape[0]

    def rows(self, lo: int, hi: int) -> np.ndarray:
        return self.allow[lo:hi]


def build_mask(layout: SequenceLayout, mode: MaskMode | str,
               joint_full_bidirectional: bool = False) -> AttentionMask:
    """Build the allow-matrix for one decoding regime.

    Causal: standard lower-triangular over the whole sequence.
    Joint: the prefix stays causal among itself (keeps it compatible with a
    cached or pretrained prefix stack), while action positions attend all
    prefix positions and the whole action block bidirectionally. With
    `joint_full_bidirectional` the matrix is all-true instead, the literal
    "mask removed" reading.
    """
    mode = MaskMode(mode)
    t = layout.total
    if mode is MaskMode.CAUSAL:
        allow = np.tril(np.ones((t, t), dtype=bool))
    elif joint_full_bidirectional:
        allow = np.ones((t, t), dtype=bool)
    else:
        allow = np.tril(np.ones((t, t), dtype=bool))
        allow[layout.prefix_len:, :] = True
    return AttentionMask(allow=allow)
