import numpy as np
import pytest

from fp4stream.errors import MissingChunkError, ShapeError, SinkError
from fp4stream.kv_cache import (
    KvCache,
    SinkState,
    dequantize_window,
    footprint_bound,
    frames_to_chunks,
    on_prompt_switch,
    quantize_kv_chunk,
    run_stream,
    sink_effective_set,
    smooth_keys,
    storage_report,
)
from fp4stream.nvfp4 import dequantize_nvfp4, quantize_nvfp4


def mse(a, b):
    return float(np.mean((a - b) ** 2))


def state_at(t, shot_start=0, shot_len=1, window=4, glob=(0,), shot_cap=1):
    return SinkState(frozenset(glob), shot_start, shot_len, window, t, shot_cap)


class TestChunkQuant:
    def test_constant_rows(self):
        k = np.full((4, 2, 32), 2.5)
        c = quantize_kv_chunk(k, np.zeros_like(k), 0)
        assert np.all(c.k_means == np.float16(2.5))
        assert not c.qk.block_scales.any()
        assert np.array_equal(c.keys(), k)

    def test_zero_chunk(self):
        z = np.zeros((8, 2, 16))
        c = quantize_kv_chunk(z, z, 3)
        assert c.chunk_index == 3
        assert not c.k_means.any()
        assert not c.keys().any() and not c.values().any()

    def test_layout(self, rng):
        c = quantize_kv_chunk(rng.standard_normal((8, 4, 32)), rng.standard_normal((8, 4, 32)), 0)
        assert c.qk.dims == (32, 32) and c.qv.dims == (32, 32)
        assert c.k_means.dtype == np.float16 and c.k_means.shape == (8, 4)
        assert c.qk.block_decisions is not None

    def test_smoothed_rows_zero_mean(self, rng):
        k = rng.standard_normal((8, 2, 64)) + 5
        ks, _ = smooth_keys(k)
        assert np.max(np.abs(ks.mean(axis=-1))) <= 1e-12
        c = quantize_kv_chunk(k, k, 0)
        rows = dequantize_nvfp4(c.qk)
        # after quantization a row mean can drift by at most the row's worst element error
        worst = np.max(np.abs(rows - ks.reshape(16, 64)), axis=-1)
        assert np.all(np.abs(rows.mean(axis=-1)) <= worst)

    def test_values_unsmoothed(self, rng):
        v = rng.standard_normal((4, 2, 16)) + 3
        c = quantize_kv_chunk(np.zeros_like(v), v, 0)
        assert np.array_equal(c.values().reshape(8, 16), dequantize_nvfp4(quantize_nvfp4(v.reshape(8, 16), "scale_search")))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            quantize_kv_chunk(np.zeros((4, 2, 16)), np.zeros((4, 2, 32)), 0)

    def test_smoothing_beats_standard_unsmoothed(self, rng):
        k = rng.standard_normal((16, 2, 64))
        c = quantize_kv_chunk(k, k, 0)
        flat = k.reshape(32, 64)
        plain = mse(dequantize_nvfp4(quantize_nvfp4(flat)).reshape(k.shape), k)
        assert mse(c.keys(), k) < plain

    def test_smoothing_statistical(self):
        """100 seeded chunks whose key rows carry a per-(token, head) offset."""
        for seed in range(100):
            r = np.random.default_rng(seed)
            k = r.standard_normal((16, 2, 64)) + 3 * r.standard_normal((16, 2, 1))
            flat = k.reshape(32, 64)
            smoothed = mse(quantize_kv_chunk(k, k, 0).keys(), k)
            for mode in ("standard", "scale_search"):
                assert smoothed <= mse(dequantize_nvfp4(quantize_nvfp4(flat, mode)).reshape(k.shape), k)


class TestStorage:
    def test_worked_example(self, rng):
        c = quantize_kv_chunk(rng.standard_normal((16, 2, 16)), rng.standard_normal((16, 2, 16)), 0)
        rep = storage_report(c, include_means=False, include_global_scales=False)
        assert rep["bf16_bytes"] == 2048
        assert rep["nvfp4_bytes"] == 576
        assert rep["ratio"] == 2048 / 576

    @pytest.mark.parametrize("d", [16, 32, 64, 128])
    def test_ratio_32_over_9(self, rng, d):
        c = quantize_kv_chunk(rng.standard_normal((8, 2, d)), rng.standard_normal((8, 2, d)), 0)
        assert storage_report(c, include_means=False, include_global_scales=False)["ratio"] == 32 / 9

    def test_with_means_d128(self, rng):
        c = quantize_kv_chunk(rng.standard_normal((64, 4, 128)), rng.standard_normal((64, 4, 128)), 0)
        rep = storage_report(c, include_global_scales=False)
        assert rep["ratio"] == pytest.approx(4 * 128 / (2 * 72 + 2), rel=1e-12)
        assert rep["ratio"] >= 3.4
        full = storage_report(c)
        assert full["nvfp4_bytes"] == rep["nvfp4_bytes"] + 8

    def test_nbytes_matches_report(self, rng):
        c = quantize_kv_chunk(rng.standard_normal((8, 2, 32)), rng.standard_normal((8, 2, 32)), 0)
        assert c.nbytes == storage_report(c)["nvfp4_bytes"]


class TestWindow:
    @pytest.fixture
    def cache(self, rng):
        cache = KvCache()
        for i in range(4):
            cache.append(quantize_kv_chunk(rng.standard_normal((8, 2, 32)), rng.standard_normal((8, 2, 32)), i))
        return cache

    def test_empty(self, cache):
        k, v = dequantize_window(cache, [])
        assert k.size == 0 and v.size == 0

    def test_single_chunk(self, cache):
        k, v = dequantize_window(cache, {2})
        c = cache.get(2)
        assert np.array_equal(k, dequantize_nvfp4(c.qk).reshape(8, 2, 32) + c.k_means.astype(np.float64)[..., None])
        assert np.array_equal(v, c.values())

    def test_ascending_order(self, cache):
        k, _ = dequantize_window(cache, [3, 1])
        assert np.array_equal(k[:8], cache.get(1).keys())
        assert np.array_equal(k[8:], cache.get(3).keys())

    def test_parallel_matches_serial(self, cache):
        serial = dequantize_window(cache, [0, 1, 2, 3])
        parallel = dequantize_window(cache, [0, 1, 2, 3], workers=4)
        assert serial[0].tobytes() == parallel[0].tobytes()
        assert serial[1].tobytes() == parallel[1].tobytes()

    def test_missing_names_index(self, cache):
        with pytest.raises(MissingChunkError, match="7"):
            dequantize_window(cache, [0, 7])


class TestSink:
    def test_frames_to_chunks(self):
        assert frames_to_chunks(8) == 1 and frames_to_chunks(9) == 2 and frames_to_chunks(0) == 0

    def test_example_shot_at_5(self):
        assert sink_effective_set(state_at(10, shot_start=5)) == [0, 5, 6, 7, 8, 9]

    def test_window_covers_sinks(self):
        assert sink_effective_set(state_at(2, shot_start=0)) == [0, 1]

    def test_empty_at_start(self):
        assert sink_effective_set(state_at(0, shot_len=0)) == []

    def test_switch_at_7(self):
        s = SinkState.initial(8, 8, 3)
        for t in range(12):
            if t == 7:
                s = on_prompt_switch(s, 7)
            s = s.advance()
        assert s.current_chunk == 12
        assert sink_effective_set(s) == [0, 7, 9, 10, 11]

    def test_switch_at_current(self):
        s = on_prompt_switch(state_at(6, shot_start=2), 6)
        assert s.shot_start == 6 and s.shot_len == 0
        assert s.advance().shot_chunks() == range(6, 7)

    def test_two_switches(self):
        s = on_prompt_switch(on_prompt_switch(state_at(9), 4), 8)
        assert s.shot_start == 8 and s.global_sink_chunks == frozenset({0})

    def test_switch_in_past(self):
        with pytest.raises(SinkError):
            on_prompt_switch(state_at(9, shot_start=5), 3)

    def test_footprint_bound(self):
        s = SinkState.initial(16, 8, 4)
        for t in range(40):
            if t in (11, 23):
                s = on_prompt_switch(s, t)
            assert len(sink_effective_set(s)) <= footprint_bound(s)
            s = s.advance()


ORACLE_20 = [
    [], [0], [0, 1], [0, 1, 2], [0, 1, 2, 3],
    [0, 1, 2, 3, 4], [0, 2, 3, 4, 5], [0, 3, 4, 5, 6], [0, 4, 5, 6, 7], [0, 5, 6, 7, 8],
    [0, 6, 7, 8, 9], [0, 7, 8, 9, 10], [0, 8, 9, 10, 11], [0, 9, 10, 11, 12], [0, 9, 10, 11, 12, 13],
    [0, 9, 11, 12, 13, 14], [0, 9, 12, 13, 14, 15], [0, 9, 13, 14, 15, 16], [0, 9, 14, 15, 16, 17],
    [0, 9, 15, 16, 17, 18],
]


def _maker(seed):
    def make(t):
        r = np.random.default_rng([seed, t])
        return quantize_kv_chunk(r.standard_normal((8, 2, 16)), r.standard_normal((8, 2, 16)), t)

    return make


class TestStream:
    def test_scripted_trace(self):
        trace = run_stream(20, _maker(0), SinkState.initial(8, 8, 4), switches=[9])
        assert [s["effective"] for s in trace] == ORACLE_20

    def test_cache_holds_exactly_effective(self):
        trace = run_stream(20, _maker(0), SinkState.initial(8, 8, 4), switches=[9])
        assert all(s["cached"] == s["effective"] for s in trace)

    def test_switch_adds_no_bytes(self):
        trace = run_stream(20, _maker(1), SinkState.initial(8, 8, 4), switches=[9])
        step = trace[9]
        assert step["bytes_before_switch"] == step["cache_bytes"]

    def test_bytes_depend_only_on_retained(self):
        a = run_stream(20, _maker(2), SinkState.initial(8, 8, 4), switches=[9])
        b = run_stream(20, _maker(2), SinkState.initial(8, 8, 4), switches=[])
        for sa, sb in zip(a, b):
            if sa["cached"] == sb["cached"]:
                assert sa["cache_bytes"] == sb["cache_bytes"]
