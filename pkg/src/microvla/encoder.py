"""Two-part visual encoder with a learned projector into the token space.

Each encoder is a single linear patch projection; their per-patch features
are concatenated channel-wise and projected to the policy's model dimension.
Both encoders and the projector train jointly with the rest of the policy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass
class ImageGrid:
    """RGB image with pixel values in [0, 1], shape (height, width, 3)."""

    height: int
    width: int
    pixels: np.ndarray
    channels: int = 3

    def __post_init__(self):
        expected = (self.height, self.width, self.channels)
        if self.pixels.shape != expected:
            raise ConfigError(
                f"image pixels shape {self.pixels.shape} != {expected}"
            )
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ConfigError("image pixels must lie in [0, 1]")


@dataclass
class EncoderParams:
    """Weights of the two patch encoders and the fusion projector."""

    patch_size: int
    w_a: Tensor  # (patch_dim, feat_a)
    b_a: Tensor
    w_b: Tensor  # (patch_dim, feat_b)
    b_b: Tensor
    w_proj: Tensor  # (feat_a + feat_b, model_dim)
    b_proj: Tensor

    def __post_init__(self):
        fused = self.w_a.shape[1] + self.w_b.shape[1]
        if self.w_proj.shape[0] != fused:
            raise ConfigError(
                f"projector input dim {self.w_proj.shape[0]} != "
                f"concatenated feature dim {fused}"
            )

    @property
    def model_dim(self) -> int:
        return self.w_proj.shape[1]

    def named_params(self) -> list[tuple[str, Tensor]]:
        return [
            ("encoder.w_a", self.w_a),
            ("encoder.b_a", self.b_a),
            ("encoder.w_b", self.w_b),
            ("encoder.b_b", self.b_b),
            ("encoder.w_proj", self.w_proj),
            ("encoder.b_proj", self.b_proj),
        ]


def init_encoder_params(rng: np.random.Generator, patch_size: int,
                        feat_a: int, feat_b: int, model_dim: int,
                        channels: int = 3, dtype=np.float64) -> EncoderParams:
    """Fan-in scaled init, draw order fixed for determinism."""
    patch_dim = patch_size * patch_size * channels

    def linear(nin, nout):
        w = rng.normal(0.0, 1.0 / np.sqrt(nin), size=(nin, nout))
        return T.parameter(w.astype(dtype)), T.parameter(np.zeros(nout, dtype=dtype))

    w_a, b_a = linear(patch_dim, feat_a)
    w_b, b_b = linear(patch_dim, feat_b)
    w_proj, b_proj = linear(feat_a + feat_b, model_dim)
    return EncoderParams(patch_size, w_a, b_a, w_b, b_b, w_proj, b_proj)


def extract_patches(img: ImageGrid, patch_size: int, dtype=np.float64) -> np.ndarray:
    """Flatten non-overlapping patches, row-major: (n_patches, ps*ps*3)."""
    if img.height % patch_size or img.width % patch_size:
        raise ConfigError(
            f"patch size {patch_size} does not divide image "
            f"{img.height}x{img.width}"
        )
    ph = img.height // patch_size
    pw = img.width // patch_size
    px = img.pixels.reshape(ph, patch_size, pw, patch_size, img.channels)
    px = px.transpose(0, 2, 1, 3, 4).reshape(ph * pw, -1)
    return np.ascontiguousarray(px, dtype=dtype)


def encode_image(img: ImageGrid, p: EncoderParams, dtype=np.float64) -> Tensor:
    """Image -> (n_patches, model_dim) rows in the policy's token space.

    Two independent linear patch embeddings are concatenated per patch and
    projected; differentiable end-to-end with respect to all encoder weights.
    """
    patches = T.constant(extract_patches(img, p.patch_size, dtype=dtype))
    feats_a = T.add_bias(T.matmul(patches, p.w_a), p.b_a)
    feats_b = T.add_bias(T.matmul(patches, p.w_b), p.b_b)
    fused = concat_feature_dims(feats_a, feats_b)
    return T.add_bias(T.matmul(fused, p.w_proj), p.b_proj)


def concat_feature_dims(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise feature concatenation (n, da) + (n, db) -> (n, da+db)."""
    if a.shape[0] != b.shape[0]:
        raise ShapeError(
            f"concat_feature_dims row mismatch: {a.shape} vs {b.shape}"
        )
    return T.concat([a, b], axis=1)
