"""``fp4stream`` command-line entry point.

Every subcommand emits one JSON report (``command``, ``config``, ``results``,
``version``). It goes to ``--report`` when given, otherwise to stdout. Logs
go to stderr. Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time

import numpy as np

from . import __version__
from . import balanced_sp as sp
from . import kv_cache as kv
from . import pipeline_sim as ps
from .errors import Fp4StreamError
from .fp_codec import read_tensor, write_tensor
from .nvfp4 import (
    PackedFp4Tensor,
    RhtContext,
    dequantize_nvfp4,
    quant_error_report,
    quantize_nvfp4,
    rht_forward,
    rht_inverse,
)
from .qcompute import qmatmul

log = logging.getLogger("fp4stream")


class DomainFailure(Fp4StreamError):
    """A check ran to completion and reported failure."""


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.generic):
        v = v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def _float_input(path) -> np.ndarray:
    t = read_tensor(path)
    if isinstance(t, PackedFp4Tensor):
        return dequantize_nvfp4(t)
    return t.astype(np.float64)


def _require_seed(args, what: str) -> int:
    if args.seed is None:
        raise argparse.ArgumentTypeError(f"{what} is randomized and needs --seed")
    return args.seed


# --------------------------------------------------------------------------
# subcommands; each returns the ``results`` mapping
# --------------------------------------------------------------------------


def cmd_quantize(args) -> dict:
    x = _float_input(args.input)
    mode = args.mode.replace("-", "_")
    if args.rht:
        seed = _require_seed(args, "--rht")
        q = quantize_nvfp4(rht_forward(x, RhtContext(seed)), mode)
    else:
        seed = None
        q = quantize_nvfp4(x, mode)
    write_tensor(args.output, q)
    rep = quant_error_report(x, mode, use_rht=args.rht, seed=seed).to_dict()
    rep.update(dims=list(q.dims), n_blocks=q.n_blocks, bytes=q.storage_bytes())
    return rep


def cmd_dequantize(args) -> dict:
    q = read_tensor(args.input)
    if not isinstance(q, PackedFp4Tensor):
        raise Fp4StreamError("input is not a packed-fp4 tensor")
    x = dequantize_nvfp4(q)
    if args.rht:
        x = rht_inverse(x, RhtContext(_require_seed(args, "--rht")))
    write_tensor(args.output, x.astype(np.float32))
    return {"dims": list(q.dims)}


def cmd_qgemm(args) -> dict:
    """``out = A @ B``. Float B is ``K x N``; packed B must already be ``N x K``."""
    a, b = read_tensor(args.a), read_tensor(args.b)
    qa = a if isinstance(a, PackedFp4Tensor) else quantize_nvfp4(np.asarray(a, np.float64), "standard")
    qb = b if isinstance(b, PackedFp4Tensor) else quantize_nvfp4(np.asarray(b, np.float64).T, "scale_search")
    out = qmatmul(qa, qb)
    oracle = dequantize_nvfp4(qa) @ dequantize_nvfp4(qb).T
    if args.output:
        write_tensor(args.output, out.astype(np.float32))
    scale = float(np.max(np.abs(oracle))) if oracle.size else 0.0
    return {
        "shape": list(out.shape),
        "max_abs_diff_vs_dequant": float(np.max(np.abs(out - oracle))) if out.size else 0.0,
        "oracle_max_abs": scale,
    }


def _synthetic_kv(rng, tc, heads, dim):
    # per-row offsets are what K-smoothing removes
    k = rng.standard_normal((tc, heads, dim)) + 3.0 * rng.standard_normal((tc, heads, 1))
    v = rng.standard_normal((tc, heads, dim))
    return k, v


def cmd_kv_bench(args) -> dict:
    seed = _require_seed(args, "kv-bench")
    rng = np.random.default_rng(seed)
    raw = {t: _synthetic_kv(rng, args.tc, args.heads, args.dim) for t in range(args.chunks)}

    t0 = time.perf_counter()
    chunks = {t: kv.quantize_kv_chunk(k, v, t) for t, (k, v) in raw.items()}
    quant_time = time.perf_counter() - t0

    state = kv.SinkState.initial(args.global_sink, args.shot_sink, args.window)
    trace = kv.run_stream(args.chunks, chunks.__getitem__, state, switches=args.switch_at or ())

    mse_s, mse_p = [], []
    cache = kv.KvCache()
    for t, (k, _) in raw.items():
        cache.append(chunks[t])
        mse_s.append(float(np.mean((chunks[t].keys() - k) ** 2)))
        plain = quantize_nvfp4(k.reshape(-1, args.dim), "scale_search")
        mse_p.append(float(np.mean((dequantize_nvfp4(plain).reshape(k.shape) - k) ** 2)))

    t0 = time.perf_counter()
    for step in trace:
        kv.dequantize_window(cache, step["effective"], workers=args.workers)
    dequant_time = time.perf_counter() - t0

    chunk = cache.get(0)
    full = kv.storage_report(chunk)
    payload = kv.storage_report(chunk, include_means=False, include_global_scales=False)
    return {
        "ratio": full["ratio"],
        "ratio_payload_only": payload["ratio"],
        "chunk_bf16_bytes": full["bf16_bytes"],
        "chunk_nvfp4_bytes": full["nvfp4_bytes"],
        "mse_smoothed": float(np.mean(mse_s)),
        "mse_plain": float(np.mean(mse_p)),
        "max_effective_chunks": max(len(s["effective"]) for s in trace),
        "max_cached_chunks": max(len(s["cached"]) for s in trace),
        "dequant_share": dequant_time / (dequant_time + quant_time) if args.timing else None,
    }


def _probe(rng, shape):
    # the checks are exact identities, so distinct ramp values suffice without a seed
    if rng is None:
        return np.arange(math.prod(shape), dtype=np.float64).reshape(shape) * 0.5 - 1.0
    return rng.standard_normal(shape)


def cmd_sp_check(args) -> dict:
    rng = None if args.seed is None else np.random.default_rng(args.seed)
    layout = sp.SpLayout(P=args.P, L=args.L, H=args.H, d=args.d, n_blk=args.chunks, halo=args.halo)
    tpc = layout.tokens_per_chunk

    idents = [sp.token_identity(i, layout) for i in range(layout.L)]
    logical = sorted(sp.logical_index(t, layout) for t in idents)
    bijective = logical == list(range(layout.L))

    perm = sp.interleaved_permutation(layout)
    mask_ok = bool(
        np.array_equal(sp.natural_mask_table(layout, tpc), sp.logical_mask_table(layout.L, tpc)[np.ix_(perm, perm)])
    )

    full = _probe(rng, (layout.L, layout.H, layout.d))
    xs = np.split(full, layout.P)
    back = sp.all_to_all_backward(sp.all_to_all_forward(xs, layout), layout)
    a2a_ok = all(np.array_equal(a, b) for a, b in zip(xs, back))
    a2a_ok = a2a_ok and np.array_equal(np.concatenate(sp.all_to_all_forward(xs, layout), axis=1), full)

    noisy = sp.noisy_tokens_per_rank(layout)
    balanced = all(n == layout.l_loc for n in noisy)

    frames = args.frames or 8 * layout.P
    enc = sp.CausalMovingAverage(args.receptive_field)
    raw = _probe(rng, (frames, 4))
    res = sp.halo_sharded_encode(raw, layout.P, enc, args.halo)
    halo_ok = bool(np.array_equal(res.gathered(), enc.encode(raw)))

    results = {
        "token_identity_bijective": bijective,
        "natural_mask_matches_logical": mask_ok,
        "all_to_all_round_trip": a2a_ok,
        "noisy_tokens_per_rank": noisy,
        "loss_balanced": balanced,
        "halo_encode_exact": halo_ok,
        "halo_encoded_frames": res.encoded_frames,
        "comm": sp.comm_report(layout.L, layout.H, layout.d),
    }
    if not all([bijective, mask_ok, a2a_ok, balanced, halo_ok]):
        raise DomainFailure(json.dumps(_jsonable(results), sort_keys=True))
    return results


def _pbm(mask: np.ndarray) -> str:
    rows = "\n".join(" ".join("1" if v else "0" for v in row) for row in mask)
    return f"P1\n{mask.shape[1]} {mask.shape[0]}\n{rows}\n"


def cmd_mask_dump(args) -> dict:
    layout = sp.SpLayout(P=args.P, L=args.L, n_blk=args.chunks)
    tpc = layout.tokens_per_chunk
    nat = sp.natural_mask_table(layout, tpc)
    logical = sp.logical_mask_table(layout.L, tpc)
    paths = {"natural": f"{args.out}.natural.pbm", "logical": f"{args.out}.logical.pbm"}
    with open(paths["natural"], "w") as fh:
        fh.write(_pbm(nat))
    with open(paths["logical"], "w") as fh:
        fh.write(_pbm(logical))
    return {"files": paths, "visible_pairs": int(nat.sum())}


def _pipeline_results(cfg: ps.PipelineConfig) -> dict:
    tr = ps.simulate(cfg)
    return {
        "e2e": tr.e2e_latency,
        "closed_form_e2e": ps.closed_form_latency(cfg),
        "peak_buffer_chunks": tr.peak_latent_buffer_chunks,
        "schedule": tr.schedule(),
    }


def cmd_pipeline_sim(args) -> dict:
    cfg = ps.PipelineConfig(args.chunks, args.t_dit, args.t_vae, args.mode.replace("-", "_"))
    return _pipeline_results(cfg)


def cmd_pipeline_calibrate(args) -> dict:
    t_dit, t_vae = ps.calibrate(args.sync, args.async_, args.chunks)
    out = {"t_dit": t_dit, "t_vae": t_vae}
    out.update(_pipeline_results(ps.PipelineConfig(args.chunks, t_dit, t_vae, ps.STREAMING)))
    out["e2e_sync"] = ps.simulate(ps.PipelineConfig(args.chunks, t_dit, t_vae, ps.CENTRALIZED)).e2e_latency
    return out


def cmd_comm_report(args) -> dict:
    return sp.comm_report(args.L, args.H, args.d)


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fp4stream", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help_):
        s = sub.add_parser(name, help=help_)
        s.set_defaults(func=fn)
        s.add_argument("--report", help="write the JSON report here instead of stdout")
        return s

    s = add("quantize", cmd_quantize, "quantize an NVT1 tensor to packed NVFP4")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", dest="output", required=True)
    s.add_argument("--mode", choices=["standard", "scale-search"], default="standard")
    s.add_argument("--rht", action="store_true", help="rotate 16-blocks with a seeded Hadamard first")
    s.add_argument("--seed", type=int)

    s = add("dequantize", cmd_dequantize, "expand packed NVFP4 to float32")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", dest="output", required=True)
    s.add_argument("--rht", action="store_true")
    s.add_argument("--seed", type=int)

    s = add("qgemm", cmd_qgemm, "W4A4 block-scaled matrix product")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--out", dest="output")

    s = add("kv-bench", cmd_kv_bench, "chunkwise NVFP4 KV cache benchmark")
    s.add_argument("--chunks", type=int, default=20)
    s.add_argument("--tc", type=int, default=8 * kv.DEFAULT_TOKENS_PER_FRAME)
    s.add_argument("--heads", type=int, default=2)
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--window", type=int, default=4)
    s.add_argument("--global-sink", type=int, default=8, help="frames")
    s.add_argument("--shot-sink", type=int, default=8, help="frames")
    s.add_argument("--switch-at", type=int, nargs="*")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--timing", action="store_true", help="report dequant_share (not deterministic)")
    s.add_argument("--seed", type=int)

    s = add("sp-check", cmd_sp_check, "verify Balanced SP layout identities")
    s.add_argument("--P", type=int, required=True)
    s.add_argument("--L", type=int, required=True)
    s.add_argument("--H", type=int)
    s.add_argument("--d", type=int, default=2)
    s.add_argument("--chunks", type=int, required=True)
    s.add_argument("--halo", type=int, default=1)
    s.add_argument("--receptive-field", type=int, default=2)
    s.add_argument("--frames", type=int)
    s.add_argument("--seed", type=int)

    s = add("mask-dump", cmd_mask_dump, "write natural and logical masks as PBM")
    s.add_argument("--P", type=int, required=True)
    s.add_argument("--L", type=int, required=True)
    s.add_argument("--chunks", type=int, required=True)
    s.add_argument("--out", required=True, help="output path prefix")

    s = add("pipeline-sim", cmd_pipeline_sim, "simulate denoise/decode scheduling")
    s.add_argument("--chunks", type=int, required=True)
    s.add_argument("--t-dit", type=float, required=True)
    s.add_argument("--t-vae", type=float, required=True)
    s.add_argument("--mode", choices=["centralized", "streaming-async", "streaming_async"], default="streaming-async")

    s = add("pipeline-calibrate", cmd_pipeline_calibrate, "fit per-chunk latencies from e2e timings")
    s.add_argument("--sync", type=float, required=True)
    s.add_argument("--async", dest="async_", type=float, required=True)
    s.add_argument("--chunks", type=int, required=True)

    s = add("comm-report", cmd_comm_report, "All-to-All payload bytes, BF16 vs NVFP4")
    s.add_argument("--L", type=int, required=True)
    s.add_argument("--H", type=int, required=True)
    s.add_argument("--d", type=int, required=True)
    return p


def _config_echo(args) -> dict:
    skip = {"func", "report", "verbose", "command"}
    return {k.rstrip("_"): v for k, v in sorted(vars(args).items()) if k not in skip}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    if getattr(args, "H", 0) is None:
        args.H = args.P
    try:
        results = args.func(args)
    except argparse.ArgumentTypeError as exc:
        parser.print_usage(sys.stderr)
        print(f"fp4stream: error: {exc}", file=sys.stderr)
        return 2
    except (Fp4StreamError, ValueError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    report = {"command": args.command, "config": _config_echo(args), "results": results, "version": __version__}
    text = json.dumps(_jsonable(report), sort_keys=True, indent=2)
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(text + "\n")
        log.info("report written to %s", args.report)
    else:
        print(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
