"""Discretize continuous end-effector actions into per-dimension token ids.

Each action dimension gets its own uniform binning between fitted quantile
clip bounds and its own disjoint slice of the vocabulary, so a token id
identifies both the dimension and the bin. Bins are left-closed right-open
with the last bin right-closed, which makes binning total and deterministic.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DecodeError


def _sorted_quantile(sorted_vals: np.ndarray, q: float) -> float:
    """Linear-interpolation quantile over pre-sorted values."""
    n = sorted_vals.size
    virtual = q * (n - 1)
    lo = int(np.floor(virtual))
    hi = min(lo + 1, n - 1)
    frac = virtual - lo
    return float(sorted_vals[lo] + frac * (sorted_vals[hi] - sorted_vals[lo]))


@dataclass(frozen=True)
class ActionCodec:
    """Per-dimension bin edges/centers and vocabulary offsets."""

    edges: np.ndarray  # (D, B+1), strictly ascending per dim
    vocab_offsets: np.ndarray  # (D,), disjoint ranges of width B

    def __post_init__(self):
        if self.edges.ndim != 2 or self.edges.shape[1] < 3:
            raise ConfigError(f"edges must be (D, B+1) with B >= 2: {self.edges.shape}")
        if not np.all(np.diff(self.edges, axis=1) > 0):
            raise ConfigError("bin edges must be strictly ascending")
        d = self.edges.shape[0]
        if self.vocab_offsets.shape != (d,):
            raise ConfigError("one vocab offset per action dimension required")
        b = self.bins
        spans = [(int(o), int(o) + b) for o in self.vocab_offsets]
        for i, (lo_i, hi_i) in enumerate(spans):
            for lo_j, hi_j in spans[i + 1:]:
                if lo_i < hi_j and lo_j < hi_i:
                    raise ConfigError("vocab ranges overlap across dimensions")

    @property
    def dims(self) -> int:
        return self.edges.shape[0]

    @property
    def bins(self) -> int:
        return self.edges.shape[1] - 1

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:, :-1] + self.edges[:, 1:])

    @property
    def half_bin_widths(self) -> np.ndarray:
        return 0.5 * np.diff(self.edges, axis=1)

    def token_range(self, dim: int) -> tuple[int, int]:
        lo = int(self.vocab_offsets[dim])
        return lo, lo + self.bins


def fit(actions, bins: int = 256, quantile_lo: float = 0.01,
        quantile_hi: float = 0.99, vocab_base: int = 0) -> ActionCodec:
    """Fit per-dimension clip bounds at empirical quantiles, uniform bins.

    A dimension whose two quantiles coincide (constant data) is widened by a
    machine-epsilon-scaled pad so binning stays total; a warning is issued.
    """
    acts = np.asarray(actions, dtype=np.float64)
    if acts.ndim != 2 or acts.shape[0] < 2:
        raise ConfigError(f"fit needs >= 2 action vectors, got shape {acts.shape}")
    if not np.all(np.isfinite(acts)):
        raise ConfigError("fit requires finite actions")
    if not (0.0 <= quantile_lo < quantile_hi <= 1.0):
        raise ConfigError(
            f"quantiles must satisfy 0 <= lo < hi <= 1, got "
            f"{quantile_lo}/{quantile_hi}"
        )
    if bins < 2:
        raise ConfigError("bins must be >= 2")
    d = acts.shape[1]
    eps = np.finfo(np.float64).eps
    edges = np.empty((d, bins + 1), dtype=np.float64)
    for dim in range(d):
        vals = np.sort(acts[:, dim])
        lo = _sorted_quantile(vals, quantile_lo)
        hi = _sorted_quantile(vals, quantile_hi)
        if lo == hi:
            pad = bins * eps * max(1.0, abs(lo))
            lo, hi = lo - pad, hi + pad
            warnings.warn(
                f"action dim {dim} is degenerate at {float(acts[0, dim])!r}; "
                f"widened by +-{pad:.3e}",
                stacklevel=2,
            )
        row = lo + (hi - lo) * (np.arange(bins + 1) / bins)
        row[0], row[-1] = lo, hi
        edges[dim] = row
    offsets = vocab_base + bins * np.arange(d, dtype=np.int64)
    return ActionCodec(edges=edges, vocab_offsets=offsets)


def tokenize(codec: ActionCodec, action) -> list[int]:
    """Continuous D-vector -> D token ids; out-of-range values clip."""
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (codec.dims,):
        raise ConfigError(f"action shape {a.shape} != ({codec.dims},)")
    if not np.all(np.isfinite(a)):
        raise ValueError("tokenize requires a finite action")
    tokens = []
    b = codec.bins
    for dim in range(codec.dims):
        e = codec.edges[dim]
        x = min(max(float(a[dim]), e[0]), e[-1])
        idx = int(np.searchsorted(e, x, side="right")) - 1
        idx = min(max(idx, 0), b - 1)
        tokens.append(int(codec.vocab_offsets[dim]) + idx)
    return tokens


def detokenize(codec: ActionCodec, tokens) -> np.ndarray:
    """D token ids -> bin-center D-vector; wrong-range tokens are errors."""
    toks = list(tokens)
    if len(toks) != codec.dims:
        raise ConfigError(f"{len(toks)} tokens != {codec.dims} dims")
    centers = codec.centers
    out = np.empty(codec.dims, dtype=np.float64)
    for dim, tok in enumerate(toks):
        lo, hi = codec.token_range(dim)
        if not lo <= tok < hi:
            raise DecodeError(
                f"token {tok} outside dim {dim} range [{lo}, {hi})"
            )
        out[dim] = centers[dim, tok - lo]
    return out


def codec_text_dump(codec: ActionCodec) -> str:
    """Human-readable sidecar describing every dimension's binning."""
    lines = [f"dims={codec.dims} bins={codec.bins}"]
    for dim in range(codec.dims):
        e = codec.edges[dim]
        lo, hi = codec.token_range(dim)
        lines.append(
            f"dim {dim}: tokens [{lo}, {hi}) clip [{e[0]!r}, {e[-1]!r}]"
        )
        lines.append("  edges " + " ".join(repr(float(x)) for x in e))
    return "\n".join(lines) + "\n"
