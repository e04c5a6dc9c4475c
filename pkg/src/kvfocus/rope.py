"""Rotary position embeddings: apply, invert, and re-apply key/query rotations.

Every head-dim vector is treated as head_dim/2 independent 2-D slices, pairing
dimension 2t with 2t+1 (the "interleaved" convention recorded in cache file
headers). Slice t at position i is rotated by i * base**(-2t/head_dim).
Because 2-D rotations about the same plane commute, moving a cached key from
position i to position j collapses to a single rotation by the position
difference, which is what makes stored caches cheap to re-position.

Trigonometry runs in float64; results are returned in the caller's dtype.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

PAIRING_INTERLEAVED = 0  # convention id recorded in cache/weight file headers


class PositionOverflowWarning(UserWarning):
    """A position beyond the configured encoding range; angles extrapolate."""


@dataclass(frozen=True)
class RopeConfig:
    """Rotation schedule for one attention head.

    head_dim must be even. max_position is the model's available positional
    encoding range; larger positions are computed anyway (the schedule
    extrapolates) but raise PositionOverflowWarning so the planning layer can
    react. Policy for staying inside the range lives upstream, not here.
    """

    head_dim: int
    base: float = 10000.0
    max_position: int = 512

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2 != 0:
            raise ValueError(f"head_dim must be a positive even integer, got {self.head_dim}")
        if not self.base > 1.0:
            raise ValueError(f"base must be > 1, got {self.base}")
        if self.max_position < 1:
            raise ValueError(f"max_position must be >= 1, got {self.max_position}")

    def pair_frequencies(self) -> np.ndarray:
        """Angular frequency of each 2-D slice: base**(-2t/head_dim), float64."""
        t = np.arange(self.head_dim // 2, dtype=np.float64)
        return self.base ** (-2.0 * t / self.head_dim)


@dataclass(frozen=True)
class PositionedVector:
    """A head-dim vector together with the position its rotation encodes.

    position None marks an unrotated vector (the k_0 form).
    """

    values: np.ndarray
    position: int | None = None


def _check_positions(config: RopeConfig, positions: np.ndarray) -> None:
    if positions.size == 0:
        return
    low = int(positions.min())
    if low < 0:
        raise ValueError(f"positions must be non-negative, got {low}")
    if int(positions.max()) >= config.max_position:
        # one static message per config so repeated warnings deduplicate
        warnings.warn(
            f"positions beyond the encoding range [0, {config.max_position}); "
            "angles extrapolate",
            PositionOverflowWarning,
            stacklevel=3,
        )


def rotation_angle(config: RopeConfig, position: int, pair_index: int) -> float:
    """Angle in radians applied to slice pair_index at the given position."""
    if not 0 <= pair_index < config.head_dim // 2:
        raise ValueError(f"pair_index {pair_index} out of range for head_dim {config.head_dim}")
    _check_positions(config, np.asarray([position]))
    return float(position) * float(config.base ** (-2.0 * pair_index / config.head_dim))


def rotate(config: RopeConfig, vectors: np.ndarray, positions) -> np.ndarray:
    """Rotate vectors (..., tokens, head_dim) at per-token positions (tokens,).

    Zero-token inputs pass through unchanged. Output dtype matches input.
    """
    vec = np.asarray(vectors)
    if vec.ndim < 2 or vec.shape[-1] != config.head_dim:
        raise ValueError(f"expected trailing dimension {config.head_dim}, got shape {vec.shape}")
    pos = np.asarray(positions, dtype=np.int64)
    if pos.ndim != 1 or pos.shape[0] != vec.shape[-2]:
        raise ValueError(f"positions shape {pos.shape} does not match token count {vec.shape[-2]}")
    if pos.size == 0:
        return vec
    _check_positions(config, pos)
    angles = pos[:, None].astype(np.float64) * config.pair_frequencies()[None, :]
    return _rotate_by(vec, angles)


def reposition_array(config: RopeConfig, vectors: np.ndarray, old_positions, new_positions) -> np.ndarray:
    """Move rotated vectors from old to new positions in one rotation.

    Undo-then-redo (R_new applied after the inverse of R_old) commutes into a
    single rotation by (new - old) per slice. When all targets equal the
    sources the input array is returned untouched, bit for bit.
    """
    vec = np.asarray(vectors)
    if vec.ndim < 2 or vec.shape[-1] != config.head_dim:
        raise ValueError(f"expected trailing dimension {config.head_dim}, got shape {vec.shape}")
    old = np.asarray(old_positions, dtype=np.int64)
    new = np.asarray(new_positions, dtype=np.int64)
    if old.shape != new.shape or old.ndim != 1 or old.shape[0] != vec.shape[-2]:
        raise ValueError("old/new positions must be 1-D and match the token count")
    if old.size == 0:
        return vec
    if (old < 0).any() or (new < 0).any():
        raise ValueError("positions must be non-negative")
    _check_positions(config, new)
    delta = new - old
    if not delta.any():
        return vec
    angles = delta[:, None].astype(np.float64) * config.pair_frequencies()[None, :]
    return _rotate_by(vec, angles)


def _rotate_by(vec: np.ndarray, angles: np.ndarray) -> np.ndarray:
    cos = np.cos(angles)
    sin = np.sin(angles)
    x = vec.astype(np.float64, copy=False)
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty(x.shape, dtype=np.float64)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out.astype(vec.dtype, copy=False)


def apply_rope(config: RopeConfig, vector, position: int) -> PositionedVector:
    """Encode an unrotated head-dim vector at a position."""
    vec = np.asarray(vector, dtype=np.float32)
    if vec.shape != (config.head_dim,):
        raise ValueError(f"expected vector of shape ({config.head_dim},), got {vec.shape}")
    out = rotate(config, vec[np.newaxis, :], np.asarray([position]))[0]
    return PositionedVector(values=out, position=int(position))


def reposition(config: RopeConfig, vector: PositionedVector, target: int) -> PositionedVector:
    """Re-encode a rotated vector at a new target position."""
    if vector.position is None:
        raise ValueError("vector is unrotated; use apply_rope instead")
    vec = np.asarray(vector.values, dtype=np.float32)
    if vec.shape != (config.head_dim,):
        raise ValueError(f"expected vector of shape ({config.head_dim},), got {vec.shape}")
    out = reposition_array(
        config, vec[np.newaxis, :], np.asarray([vector.position]), np.asarray([target])
    )[0]
    return PositionedVector(values=out, position=int(target))
