"""Discrete-event model of denoise/decode overlap in streaming generation.

One DiT resource denoises chunks in order; one VAE resource decodes them in
FIFO order. ``centralized`` decodes only after every chunk is denoised.
``streaming_async`` hands each chunk to the decoder as soon as it is ready.
Denoised chunks wait in a latent buffer (a chunk counts as buffered from
the end of its denoise until the end of its decode). In streaming mode the
buffer is bounded and the DiT stalls while it is full.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

from .errors import CalibrationError

CENTRALIZED = "centralized"
STREAMING = "streaming_async"


@dataclass(frozen=True)
class PipelineConfig:
    chunks: int
    t_dit: float
    t_vae: float
    mode: str = STREAMING
    chunk_latent_bytes: int = 1
    buffer_capacity: int | None = 2

    def __post_init__(self):
        if self.chunks < 1:
            raise ValueError("need at least one chunk")
        if not (self.t_dit > 0 and self.t_vae > 0):
            raise ValueError("latencies must be positive")
        if self.mode not in (CENTRALIZED, STREAMING):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.buffer_capacity is not None and self.buffer_capacity < 1:
            raise ValueError("buffer capacity must be >= 1")


@dataclass
class ChunkTiming:
    denoise_start: float
    denoise_end: float
    decode_start: float = float("nan")
    decode_end: float = float("nan")


@dataclass
class PipelineTrace:
    chunks: list[ChunkTiming] = field(default_factory=list)
    e2e_latency: float = 0.0
    peak_latent_buffer_chunks: int = 0
    peak_latent_buffer_bytes: int = 0

    def schedule(self) -> list[dict]:
        return [
            {
                "chunk": i,
                "denoise_start": c.denoise_start,
                "denoise_end": c.denoise_end,
                "decode_start": c.decode_start,
                "decode_end": c.decode_end,
            }
            for i, c in enumerate(self.chunks)
        ]


# event kinds; at equal timestamps decode completions are handled first so a
# freed buffer slot is visible to the DiT at the same instant
_DECODE_DONE, _DENOISE_DONE = 0, 1


def simulate(config: PipelineConfig) -> PipelineTrace:
    C = config.chunks
    streaming = config.mode == STREAMING
    cap = config.buffer_capacity if streaming else None
    trace = PipelineTrace()

    events: list[tuple[float, int, int]] = []
    buffered: list[int] = []  # FIFO; head is being decoded when vae_busy
    held: list[int] = []  # denoised, kept by the DiT while the buffer is full
    next_denoise = 0
    dit_busy = vae_busy = False

    def start_denoise(now):
        nonlocal next_denoise, dit_busy
        trace.chunks.append(ChunkTiming(now, now + config.t_dit))
        heapq.heappush(events, (now + config.t_dit, _DENOISE_DONE, next_denoise))
        next_denoise += 1
        dit_busy = True

    start_denoise(0.0)
    while events:
        now, kind, c = heapq.heappop(events)
        if kind == _DECODE_DONE:
            buffered.remove(c)
            vae_busy = False
        else:
            dit_busy = False
            held.append(c)
        if events and events[0][0] == now:
            continue

        while held and (cap is None or len(buffered) < cap):
            buffered.append(held.pop(0))
        trace.peak_latent_buffer_chunks = max(trace.peak_latent_buffer_chunks, len(buffered))

        if not dit_busy and not held and next_denoise < C:
            start_denoise(now)
        all_denoised = next_denoise == C and not dit_busy
        if not vae_busy and buffered and (streaming or all_denoised):
            head = buffered[0]
            trace.chunks[head].decode_start = now
            trace.chunks[head].decode_end = now + config.t_vae
            heapq.heappush(events, (now + config.t_vae, _DECODE_DONE, head))
            vae_busy = True

    trace.e2e_latency = max(c.decode_end for c in trace.chunks)
    trace.peak_latent_buffer_bytes = trace.peak_latent_buffer_chunks * config.chunk_latent_bytes
    return trace


def closed_form_latency(config: PipelineConfig) -> float:
    C, a, b = config.chunks, config.t_dit, config.t_vae
    if config.mode == CENTRALIZED:
        return C * (a + b)
    return C * max(a, b) + min(a, b)


def calibrate(e2e_sync: float, e2e_async: float, chunks: int) -> tuple[float, float]:
    """Solve ``C (t_dit + t_vae) = sync`` and ``C t_dit + t_vae = async``.

    The DiT-bound regime (``t_dit >= t_vae``) is assumed; the measurements
    are rejected when they admit no positive solution in it.
    """
    if chunks < 2:
        raise CalibrationError("calibration needs at least two chunks")
    if not (e2e_sync > 0 and e2e_async > 0):
        raise CalibrationError("inconsistent measurements: latencies must be positive")
    per_chunk = e2e_sync / chunks
    t_dit = (e2e_async - per_chunk) / (chunks - 1)
    t_vae = per_chunk - t_dit
    if t_dit <= 0 or t_vae <= 0 or t_vae > t_dit:
        raise CalibrationError(
            f"inconsistent measurements: sync={e2e_sync}, async={e2e_async}, C={chunks} "
            f"give t_dit={t_dit:.6g}, t_vae={t_vae:.6g}"
        )
    return t_dit, t_vae
