"""Chunkwise NVFP4 KV cache with K-smoothing and a multi-shot attention sink.

Keys and values of one chunk arrive as ``(T_c, H, d)``. Keys are centred per
(token, head) along ``d`` before quantization and the means are kept as
float16 and added back on reconstruction. Both streams are stored as
``(T_c * H) x d`` scale-searched NVFP4 tensors.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .errors import MissingChunkError, ShapeError, SinkError
from .nvfp4 import PackedFp4Tensor, dequantize_nvfp4, quantize_nvfp4

FRAMES_PER_CHUNK = 8
DEFAULT_TOKENS_PER_FRAME = 64


@dataclass(eq=False)
class KvChunk:
    chunk_index: int
    t_c: int
    heads: int
    head_dim: int
    qk: PackedFp4Tensor
    qv: PackedFp4Tensor
    k_means: np.ndarray  # float16, (T_c, H)

    def keys(self) -> np.ndarray:
        k = dequantize_nvfp4(self.qk).reshape(self.t_c, self.heads, self.head_dim)
        return k + self.k_means.astype(np.float64)[..., None]

    def values(self) -> np.ndarray:
        return dequantize_nvfp4(self.qv).reshape(self.t_c, self.heads, self.head_dim)

    @property
    def nbytes(self) -> int:
        return self.qk.storage_bytes() + self.qv.storage_bytes() + self.k_means.nbytes


def smooth_keys(k: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    means = k.mean(axis=-1)
    return k - means[..., None], means


def quantize_kv_chunk(k, v, chunk_index: int, mode: str = "scale_search") -> KvChunk:
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if k.ndim != 3 or k.shape != v.shape:
        raise ShapeError(f"K and V must share a (T_c, H, d) shape, got {k.shape} and {v.shape}")
    t_c, heads, d = k.shape
    ks, means = smooth_keys(k)
    return KvChunk(
        chunk_index=int(chunk_index),
        t_c=t_c,
        heads=heads,
        head_dim=d,
        qk=quantize_nvfp4(ks.reshape(t_c * heads, d), mode),
        qv=quantize_nvfp4(v.reshape(t_c * heads, d), mode),
        k_means=means.astype(np.float16),
    )


def storage_report(chunk: KvChunk, include_means: bool = True, include_global_scales: bool = True) -> dict:
    """Byte accounting for one chunk against a BF16 K+V baseline."""
    bf16 = 4 * chunk.t_c * chunk.heads * chunk.head_dim
    nvfp4 = chunk.qk.storage_bytes(include_global_scales) + chunk.qv.storage_bytes(include_global_scales)
    if include_means:
        nvfp4 += chunk.k_means.nbytes
    return {"bf16_bytes": bf16, "nvfp4_bytes": nvfp4, "ratio": bf16 / nvfp4}


class KvCache:
    """Single-writer store of quantized chunks keyed by chunk index."""

    def __init__(self):
        self._chunks: dict[int, KvChunk] = {}

    def __contains__(self, idx: int) -> bool:
        return idx in self._chunks

    def __len__(self) -> int:
        return len(self._chunks)

    @property
    def indices(self) -> list[int]:
        return sorted(self._chunks)

    def append(self, chunk: KvChunk) -> None:
        self._chunks[chunk.chunk_index] = chunk

    def get(self, idx: int) -> KvChunk:
        try:
            return self._chunks[idx]
        except KeyError:
            raise MissingChunkError(f"chunk {idx} is not in the cache") from None

    def retain(self, keep) -> list[int]:
        keep = set(keep)
        dropped = [i for i in self._chunks if i not in keep]
        for i in dropped:
            del self._chunks[i]
        return sorted(dropped)

    @property
    def nbytes(self) -> int:
        return sum(c.nbytes for c in self._chunks.values())


def dequantize_window(cache: KvCache, eff, workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Reconstruct K and V for ``eff`` in ascending chunk order.

    Returns arrays of shape ``(sum T_c, H, d)``. ``workers > 1`` dequantizes
    chunks on a thread pool; output is identical to the serial path.
    """
    order = sorted(set(int(i) for i in eff))
    chunks = [cache.get(i) for i in order]
    if not chunks:
        return np.zeros((0, 0, 0)), np.zeros((0, 0, 0))

    def work(c: KvChunk):
        return c.keys(), c.values()

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


# --------------------------------------------------------------------------
# multi-shot attention sink
# --------------------------------------------------------------------------


def frames_to_chunks(frames: int, frames_per_chunk: int = FRAMES_PER_CHUNK) -> int:
    return math.ceil(frames / frames_per_chunk)


@dataclass(frozen=True)
class SinkState:
    """Sink bookkeeping, all in chunk units.

    The shot sink is two integers; it never owns data. ``shot_sink_chunks``
    is the configured length a shot sink grows to after a scene cut.
    """

    global_sink_chunks: frozenset
    shot_start: int
    shot_len: int
    window_chunks: int
    current_chunk: int
    shot_sink_chunks: int = 1

    @classmethod
    def initial(cls, global_sink_frames: int, shot_sink_frames: int, window_chunks: int, frames_per_chunk=FRAMES_PER_CHUNK):
        n_g = frames_to_chunks(global_sink_frames, frames_per_chunk)
        return cls(
            global_sink_chunks=frozenset(range(n_g)),
            shot_start=0,
            shot_len=0,
            window_chunks=window_chunks,
            current_chunk=0,
            shot_sink_chunks=frames_to_chunks(shot_sink_frames, frames_per_chunk),
        )

    def shot_chunks(self) -> range:
        return range(self.shot_start, self.shot_start + self.shot_len)

    def advance(self) -> SinkState:
        """Move to the next chunk; the shot sink grows while its shot is young."""
        t = self.current_chunk + 1
        return replace(self, current_chunk=t, shot_len=min(self.shot_sink_chunks, t - self.shot_start))


def sink_effective_set(state: SinkState) -> list[int]:
    t, w = state.current_chunk, state.window_chunks
    if state.shot_start > t:
        raise SinkError(f"shot_start {state.shot_start} lies after current chunk {t}")
    lo = max(0, t - w)
    window = set(range(lo, t))
    # the shot sink only becomes an extra member once the window has left it
    shot = {c for c in state.shot_chunks() if c < lo}
    glob = {c for c in state.global_sink_chunks if c < t}
    return sorted(glob | shot | window)


def on_prompt_switch(state: SinkState, k: int) -> SinkState:
    if k < state.shot_start:
        raise SinkError(f"prompt switch at {k} precedes current shot start {state.shot_start}")
    return replace(state, shot_start=int(k), shot_len=min(state.shot_sink_chunks, max(0, state.current_chunk - k)))


def footprint_bound(state: SinkState) -> int:
    return len(state.global_sink_chunks) + state.shot_sink_chunks + state.window_chunks


def run_stream(
    n_chunks: int,
    make_chunk,
    state: SinkState,
    switches=(),
) -> list[dict]:
    """Generate ``n_chunks`` chunks with eager eviction; return a per-step trace.

    ``make_chunk(t)`` returns a :class:`KvChunk` for index ``t``. A prompt
    switch at ``k`` fires before chunk ``k`` is generated.
    """
    cache = KvCache()
    switches = set(switches)
    trace = []
    for t in range(n_chunks):
        step = {"t": t}
        if t in switches:
            step["bytes_before_switch"] = cache.nbytes
            state = on_prompt_switch(state, t)
        eff = sink_effective_set(state)
        missing = [i for i in eff if i not in cache]
        if missing:
            raise MissingChunkError(f"effective set needs evicted chunks {missing}")
        step.update(effective=eff, cached=cache.indices, cache_bytes=cache.nbytes, shot=(state.shot_start, state.shot_len))
        trace.append(step)
        cache.append(make_chunk(t))
        state = state.advance()
        cache.retain(sink_effective_set(state))
    return trace
