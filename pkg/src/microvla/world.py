"""Deterministic synthetic manipulation scenes with analytically known actions.

Each episode renders a few colored square objects and one white gripper
marker onto an RGB grid, picks a target color, and labels the scene with the
normalized displacement from the marker to the target plus a gripper
open/close flag. The optimal action is exactly recomputable from the pixels,
so any accuracy gap is model error rather than data noise.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .encoder import ImageGrid
from .errors import ConfigError

ACTION_DIMS = 7

# Color palette for objects; the gripper marker is white and therefore never
# collides with an object color.
PALETTE: list[tuple[str, tuple[float, float, float]]] = [
    ("red", (1.0, 0.0, 0.0)),
    ("green", (0.0, 1.0, 0.0)),
    ("blue", (0.0, 0.0, 1.0)),
    ("yellow", (1.0, 1.0, 0.0)),
    ("magenta", (1.0, 0.0, 1.0)),
    ("cyan", (0.0, 1.0, 1.0)),
]
MARKER_COLOR = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class TaskConfig:
    """Scene geometry. Objects sit on a block-aligned grid (stride equal to
    their side length), so placements never overlap."""

    grid_size: int = 16
    palette_size: int = 6
    n_objects: int = 3
    object_size: int = 2
    grip_radius: float = 6.0

    def __post_init__(self):
        if self.grid_size < 4:
            raise ConfigError(f"grid_size must be >= 4, got {self.grid_size}")
        if not 2 <= self.palette_size <= len(PALETTE):
            raise ConfigError(
                f"palette_size must be in [2, {len(PALETTE)}], "
                f"got {self.palette_size}"
            )
        if self.grid_size % self.object_size:
            raise ConfigError(
                f"object_size {self.object_size} must divide grid_size "
                f"{self.grid_size}"
            )
        if self.n_objects < 1 or self.n_objects > self.palette_size:
            raise ConfigError(
                f"n_objects must be in [1, palette_size], got {self.n_objects}"
            )
        if self.n_objects + 1 > self.n_slots:
            raise ConfigError(
                f"cannot place {self.n_objects} objects plus marker on "
                f"{self.n_slots} slots"
            )

    @property
    def n_slots(self) -> int:
        side = self.grid_size // self.object_size
        return side * side

    def to_kv(self) -> dict[str, str]:
        return {
            "grid_size": str(self.grid_size),
            "palette_size": str(self.palette_size),
            "n_objects": str(self.n_objects),
            "object_size": str(self.object_size),
            "grip_radius": repr(self.grip_radius),
        }


@dataclass
class Episode:
    """One sample: scene image, instruction token, ground-truth action."""

    image: ImageGrid
    instruction: int
    action: np.ndarray  # (ACTION_DIMS,)
    seed: int


def derive_seed(base_seed: int, tag: str, index: int | None = None) -> int:
    """Stable 64-bit stream split: hash(base_seed, tag[, index])."""
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack("<q", base_seed))
    h.update(tag.encode())
    if index is not None:
        h.update(struct.pack("<Q", index))
    return int.from_bytes(h.digest(), "little")


def _slot_origin(cfg: TaskConfig, slot: int) -> tuple[int, int]:
    side = cfg.grid_size // cfg.object_size
    return (slot // side) * cfg.object_size, (slot % side) * cfg.object_size


def gen_episode(seed: int, cfg: TaskConfig) -> Episode:
    """Deterministic scene from a 64-bit seed.

    Action layout: dims 0..1 = (target - gripper) / grid_size in (row, col)
    order, dims 2..5 = 0, dim 6 = +1 if the target lies within grip_radius
    of the marker else -1.
    """
    rng = np.random.default_rng(seed)
    slots = rng.choice(cfg.n_slots, size=cfg.n_objects + 1, replace=False)
    color_ids = rng.permutation(cfg.palette_size)[: cfg.n_objects]
    target_idx = int(rng.integers(cfg.n_objects))

    g = cfg.grid_size
    s = cfg.object_size
    pixels = np.zeros((g, g, 3), dtype=np.float64)
    marker_rc = _slot_origin(cfg, int(slots[0]))
    pixels[marker_rc[0]:marker_rc[0] + s, marker_rc[1]:marker_rc[1] + s] = MARKER_COLOR
    target_rc = (0, 0)
    for i in range(cfg.n_objects):
        rc = _slot_origin(cfg, int(slots[i + 1]))
        pixels[rc[0]:rc[0] + s, rc[1]:rc[1] + s] = PALETTE[color_ids[i]][1]
        if i == target_idx:
            target_rc = rc

    action = np.zeros(ACTION_DIMS, dtype=np.float64)
    action[0] = (target_rc[0] - marker_rc[0]) / g
    action[1] = (target_rc[1] - marker_rc[1]) / g
    dist = float(np.hypot(target_rc[0] - marker_rc[0], target_rc[1] - marker_rc[1]))
    action[6] = 1.0 if dist <= cfg.grip_radius else -1.0

    return Episode(
        image=ImageGrid(height=g, width=g, pixels=pixels),
        instruction=int(color_ids[target_idx]),
        action=action,
        seed=seed,
    )


def gen_dataset(base_seed: int, n: int, split: str,
                cfg: TaskConfig) -> list[Episode]:
    """Episode i uses seed hash(base_seed, split tag, i); the tag keeps the
    train and val seed streams disjoint by construction."""
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}")
    if split not in ("train", "val"):
        raise ConfigError(f"split must be 'train' or 'val', got {split!r}")
    return [
        gen_episode(derive_seed(base_seed, f"episode-{split}", i), cfg)
        for i in range(n)
    ]


# ---------------------------------------------------------------------------
# Record-framed binary export
# ---------------------------------------------------------------------------

_REC_FIXED = struct.Struct("<QIHHH")  # seed, instruction, h, w, c


def episode_to_bytes(ep: Episode) -> bytes:
    img = ep.image
    payload = (
        _REC_FIXED.pack(ep.seed, ep.instruction, img.height, img.width,
                        img.channels)
        + ep.action.astype("<f8").tobytes()
        + np.ascontiguousarray(img.pixels, dtype="<f8").tobytes()
    )
    return struct.pack("<I", len(payload)) + payload


def episode_from_bytes(payload: bytes) -> Episode:
    seed, instruction, h, w, c = _REC_FIXED.unpack_from(payload, 0)
    off = _REC_FIXED.size
    action = np.frombuffer(payload, dtype="<f8", count=ACTION_DIMS,
                           offset=off).copy()
    off += ACTION_DIMS * 8
    pixels = np.frombuffer(payload, dtype="<f8", count=h * w * c,
                           offset=off).copy().reshape(h, w, c)
    return Episode(
        image=ImageGrid(height=h, width=w, pixels=pixels, channels=c),
        instruction=instruction,
        action=action,
        seed=seed,
    )


def save_split(path, episodes: list[Episode]):
    with open(path, "wb") as fh:
        for ep in episodes:
            fh.write(episode_to_bytes(ep))


def load_split(path) -> list[Episode]:
    episodes = []
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0
    while off < len(blob):
        (length,) = struct.unpack_from("<I", blob, off)
        off += 4
        episodes.append(episode_from_bytes(blob[off:off + length]))
        off += length
    return episodes


def write_manifest(path, info: dict[str, str]):
    with open(path, "w") as fh:
        for key in sorted(info):
            fh.write(f"{key}={info[key]}\n")


def read_manifest(path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            out[key] = value
    return out
