"""Balanced sequence-parallel layout arithmetic.

Rank ``p`` owns the clean and the noisy tokens of the same temporal slice,
``L_loc = L / (2P)`` of each. After the Ulysses All-to-All the global order is
``[clean_0, noisy_0, clean_1, noisy_1, ...]``; the helpers here recover each
token's logical identity from its index so masks never need a permutation.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ForeignPositionError, HaloError, LayoutError


@dataclass(frozen=True)
class SpLayout:
    P: int
    L: int
    H: int | None = None  # defaults to P, one head per rank
    d: int = 1
    n_blk: int | None = None
    halo: int = 0

    def __post_init__(self):
        if self.P < 1 or self.L < 1:
            raise LayoutError("P and L must be positive")
        if self.H is None:
            object.__setattr__(self, "H", self.P)
        if self.L % (2 * self.P):
            raise LayoutError(f"L={self.L} is not divisible by 2P={2 * self.P}")
        if self.H % self.P:
            raise LayoutError(f"H={self.H} is not divisible by P={self.P}")
        if self.n_blk is not None:
            if self.n_blk % self.P:
                raise LayoutError(f"n_blk={self.n_blk} is not divisible by P={self.P}")
            if (self.L // 2) % self.n_blk:
                raise LayoutError(f"L/2={self.L // 2} temporal tokens do not split into {self.n_blk} chunks")

    @property
    def l_loc(self) -> int:
        return self.L // (2 * self.P)

    @property
    def tokens_per_chunk(self) -> int:
        if self.n_blk is None:
            raise LayoutError("layout has no chunk count")
        return (self.L // 2) // self.n_blk


@dataclass(frozen=True)
class TokenIdentity:
    rank_block: int
    within_rank_offset: int
    temporal_position: int
    is_clean: bool


def token_identity(i: int, layout: SpLayout) -> TokenIdentity:
    if not 0 <= i < layout.L:
        raise LayoutError(f"token index {i} outside [0, {layout.L})")
    l_loc = layout.l_loc
    p, r = divmod(i, 2 * l_loc)
    return TokenIdentity(p, r, p * l_loc + r % l_loc, r < l_loc)


def logical_index(ident: TokenIdentity, layout: SpLayout) -> int:
    """Position in the ``[all clean; all noisy]`` order."""
    return ident.temporal_position + (0 if ident.is_clean else layout.L // 2)


def teacher_forcing_mask(q_t: int, q_is_clean: bool, k_t: int, k_is_clean: bool, tokens_per_chunk: int) -> bool:
    """Noisy chunk sees strictly earlier clean chunks and its own noisy chunk;
    clean chunks see clean chunks up to and including their own."""
    qc, kc = q_t // tokens_per_chunk, k_t // tokens_per_chunk
    if q_is_clean:
        return k_is_clean and kc <= qc
    if k_is_clean:
        return kc < qc
    return kc == qc


def natural_mask(i: int, j: int, layout: SpLayout, tokens_per_chunk: int) -> bool:
    qi, kj = token_identity(i, layout), token_identity(j, layout)
    return teacher_forcing_mask(qi.temporal_position, qi.is_clean, kj.temporal_position, kj.is_clean, tokens_per_chunk)


def natural_mask_table(layout: SpLayout, tokens_per_chunk: int) -> np.ndarray:
    return _kernels.natural_mask_table(layout.L, layout.l_loc, tokens_per_chunk)


def logical_mask_table(length: int, tokens_per_chunk: int) -> np.ndarray:
    """Teacher-forcing mask in the ``[all clean; all noisy]`` order."""
    half = length // 2
    idx = np.arange(length)
    t = idx % half
    clean = idx < half
    return np.array(
        [[teacher_forcing_mask(t[a], clean[a], t[b], clean[b], tokens_per_chunk) for b in idx] for a in idx],
        dtype=bool,
    )


def interleaved_permutation(layout: SpLayout) -> np.ndarray:
    """``perm[i]`` is the logical index of interleaved token ``i``."""
    return np.array([logical_index(token_identity(i, layout), layout) for i in range(layout.L)], dtype=np.int64)


def noisy_tokens_per_rank(layout: SpLayout) -> list[int]:
    counts = [0] * layout.P
    for i in range(layout.L):
        ident = token_identity(i, layout)
        counts[ident.rank_block] += not ident.is_clean
    return counts


# --------------------------------------------------------------------------
# simulated Ulysses All-to-All
# --------------------------------------------------------------------------


def _check_a2a(xs, layout: SpLayout, seq_len: int, heads: int) -> None:
    if len(xs) != layout.P:
        raise LayoutError(f"expected {layout.P} rank slots, got {len(xs)}")
    for x in xs:
        if x.shape[:2] != (seq_len, heads):
            raise LayoutError(f"rank tensor shape {x.shape[:2]} != ({seq_len}, {heads})")


def all_to_all_forward(xs, layout: SpLayout) -> list[np.ndarray]:
    """Sequence-sharded ``(L/P, H, d)`` per rank -> head-sharded ``(L, H/P, d)``."""
    P, hp = layout.P, layout.H // layout.P
    _check_a2a(xs, layout, layout.L // P, layout.H)
    return [np.concatenate([x[:, p * hp : (p + 1) * hp] for x in xs], axis=0) for p in range(P)]


def all_to_all_backward(ys, layout: SpLayout) -> list[np.ndarray]:
    P, s = layout.P, layout.L // layout.P
    _check_a2a(ys, layout, layout.L, layout.H // P)
    return [np.concatenate([y[q * s : (q + 1) * s] for y in ys], axis=1) for q in range(P)]


# --------------------------------------------------------------------------
# halo-sharded causal encoding
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CausalMovingAverage:
    """Stand-in causal encoder: ``y[f] = mean(x[f-R+1 .. f])`` with zeros
    before the first frame. One latent frame per raw frame."""

    receptive_field: int

    def __post_init__(self):
        if self.receptive_field < 1:
            raise ValueError("receptive field must be >= 1")

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.receptive_field, 1.0 / self.receptive_field)

    def encode(self, frames) -> np.ndarray:
        x = np.asarray(frames, dtype=np.float64)
        flat = np.ascontiguousarray(x.reshape(x.shape[0], -1))
        return _kernels.causal_fir(flat, self.weights).reshape(x.shape)


@dataclass
class HaloEncodeResult:
    latents: list[np.ndarray]
    encoded_frames: list[int]

    def gathered(self) -> np.ndarray:
        return np.concatenate(self.latents, axis=0)


def halo_sharded_encode(frames, P: int, encoder: CausalMovingAverage, halo: int) -> HaloEncodeResult:
    """Encode each rank's ``F/P`` frames plus ``halo`` frames of left context.

    Rank 0 starts the sequence and encodes no halo. Halo frames that would
    fall before frame 0 are the encoder's own zero padding, so every other
    rank encodes exactly ``F/P + halo`` frames.
    """
    x = np.asarray(frames, dtype=np.float64)
    F = x.shape[0]
    if F % P:
        raise LayoutError(f"F={F} frames do not split over P={P} ranks")
    if halo < encoder.receptive_field - 1:
        raise HaloError(f"halo smaller than receptive field: h={halo} < R-1={encoder.receptive_field - 1}")
    n = F // P
    latents, counts = [], []
    for p in range(P):
        start = p * n
        h = 0 if p == 0 else halo
        lo = start - h
        local = x[max(lo, 0) : start + n]
        if lo < 0:
            local = np.concatenate([np.zeros((-lo,) + x.shape[1:]), local], axis=0)
        z = encoder.encode(local)
        latents.append(z[h:])
        counts.append(local.shape[0])
    return HaloEncodeResult(latents, counts)


# --------------------------------------------------------------------------
# communication accounting
# --------------------------------------------------------------------------


def comm_volume(L: int, H: int, d: int, precision: str = "bf16") -> int:
    """Bytes moved by the pre-attention Q, K, V All-to-All for one layer."""
    rows = L * H
    if precision == "bf16":
        return 3 * rows * d * 2
    if precision == "nvfp4":
        return 3 * rows * (-(-d // 2) + -(-d // 16))
    raise ValueError(f"unknown precision {precision!r}")


def comm_report(L: int, H: int, d: int) -> dict:
    bf16, fp4 = comm_volume(L, H, d, "bf16"), comm_volume(L, H, d, "nvfp4")
    return {"bf16_bytes": bf16, "nvfp4_bytes": fp4, "ratio": bf16 / fp4}


# --------------------------------------------------------------------------
# SP-sharded error-recycling buffer
# --------------------------------------------------------------------------


@dataclass
class ErrorBuffer:
    """Per-rank buckets keyed by (local block position, timestep).

    A rank only stores the ``n_blk / P`` positions it owns. Each bucket is a
    ring holding at most ``capacity`` entries.
    """

    P: int
    n_blk: int
    rank: int
    capacity: int = 16
    seed: int = 0
    _buckets: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.n_blk % self.P:
            raise LayoutError(f"n_blk={self.n_blk} is not divisible by P={self.P}")
        if not 0 <= self.rank < self.P:
            raise LayoutError(f"rank {self.rank} outside [0, {self.P})")
        self._rng = np.random.default_rng(self.seed)

    @property
    def local_positions(self) -> int:
        return self.n_blk // self.P

    @property
    def block_offset(self) -> int:
        return self.rank * self.local_positions

    def owns(self, global_block: int) -> bool:
        return self.block_offset <= global_block < self.block_offset + self.local_positions

    def insert(self, global_block: int, timestep, error_vec) -> None:
        if not self.owns(global_block):
            raise ForeignPositionError(
                f"rank {self.rank} owns blocks [{self.block_offset}, {self.block_offset + self.local_positions}), "
                f"not {global_block}"
            )
        key = (global_block - self.block_offset, timestep)
        self._buckets.setdefault(key, deque(maxlen=self.capacity)).append(np.asarray(error_vec))

    def bucket(self, local_position: int, timestep) -> list:
        return list(self._buckets.get((local_position, timestep), ()))

    def timesteps(self, local_position: int) -> list:
        return sorted(t for (pos, t), b in self._buckets.items() if pos == local_position and b)

    def _check_local(self, local_position: int) -> None:
        if not 0 <= local_position < self.local_positions:
            raise ForeignPositionError(f"local position {local_position} outside [0, {self.local_positions})")

    def sample_context(self, local_position: int):
        """Entry at ``local_position`` pooled over all timesteps, or None if empty."""
        self._check_local(local_position)
        pool = [(t, e) for t in self.timesteps(local_position) for e in self._buckets[(local_position, t)]]
        if not pool:
            return None
        t, e = pool[self._rng.integers(len(pool))]
        return t, e

    def sample_matched(self, local_position: int, timestep):
        """Entry from the exact (position, timestep) bucket, or None if empty."""
        self._check_local(local_position)
        b = self._buckets.get((local_position, timestep))
        if not b:
            return None
        return timestep, b[self._rng.integers(len(b))]

    def recycle_context(self, z_clean, local_position: int, probability: float):
        """Add a sampled context error to ``z_clean`` with the given probability."""
        if not 0.0 <= probability <= 1.0:
            raise ValueError("probability must lie in [0, 1]")
        z = np.asarray(z_clean, dtype=np.float64)
        if self._rng.random() >= probability:
            return z
        hit = self.sample_context(local_position)
        return z if hit is None else z + hit[1]
