"""Memory and latency benchmarks, ablation sweeps and report writers.

Memory is counted by :class:`AllocationLedger`: every buffer whose size can
depend on sequence length registers its byte count under a tag, and the
ledger keeps running totals and peaks. Nothing is probed from the OS.

Reports are plain dicts. Every value that depends on wall-clock time lives
under a key named ``"timing"``; :func:`strip_timing` removes them, and what
remains is reproducible from the embedded config and seed.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from .baseline import AttentionDecoder, kv_cache_floats, recurrent_state_floats
from .needle import train_needle
from .rwkv import RecurrentDecoder
from .vision import ConfigError, VisionEncoder, merge_applies, preset


class TimerResolutionError(ConfigError):
    """Measured step is too short for the clock to time reliably."""


class AllocationLedger:
    """Live byte counts per tag, with peak tracking."""

    def __init__(self):
        self.live = {}
        self.peak = {}
        self.peak_total = 0

    def set(self, tag, nbytes):
        self.live[tag] = int(nbytes)
        self.peak[tag] = max(self.peak.get(tag, 0), int(nbytes))
        self.peak_total = max(self.peak_total, self.total)

    def register(self, tag, array):
        self.set(tag, self.live.get(tag, 0) + np.asarray(array).nbytes)

    def release(self, tag):
        self.live.pop(tag, None)

    @property
    def total(self):
        return sum(self.live.values())


def dtype_for(precision):
    return (np.float64, torch.float64) if precision == "double" else (np.float32, torch.float32)


def strip_timing(obj):
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if k != "timing"}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj


def _jsonable(x):
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


def dumps(report):
    return json.dumps(report, indent=2, sort_keys=True, default=_jsonable) + "\n"


def write_json(path, report):
    Path(path).write_text(dumps(report))


def _timestamp():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _r2(x, y):
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if len(x) < 2:
        return 1.0
    A = np.stack([x, np.ones_like(x)], 1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    ss_res = float(((A @ coef - y) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    return 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot


def _synthetic_frames(rng, n, side):
    return rng.integers(0, 256, size=(n, side, side, 3), dtype=np.uint8)


def bench_mem(cfg, frame_counts=None, max_seconds=None, log=None):
    """Stream synthetic frames through encoder + recurrent decoder per frame count.

    Measured: peak ledger bytes of the recurrent state, and of the state plus
    the in-flight frame batch. The attention baseline's cache is measured
    (filled to the same token count) while it fits ``baseline_byte_budget``.
    Analytic values use the toy dims and the matched ``memory`` dims.
    """
    enc_cfg = cfg.encoder
    counts = list(frame_counts or cfg.bench.frame_counts)
    if counts != sorted(set(counts)) or counts[0] < 1:
        raise ConfigError("frame counts must be strictly ascending positive integers")
    if cfg.language.d_model != enc_cfg.d_llm:
        raise ConfigError(f"language.d_model {cfg.language.d_model} must equal encoder.d_llm {enc_cfg.d_llm}")
    np_dt, t_dt = dtype_for(cfg.precision)
    encoder = VisionEncoder(enc_cfg, seed=cfg.seed, dtype=t_dt)
    decoder = RecurrentDecoder(cfg.language.d_model, cfg.language.n_layers, seed=cfg.seed, dtype=np_dt,
                               data_dependent=cfg.language.data_dependent)
    d, L, item = cfg.language.d_model, cfg.language.n_layers, np.dtype(np_dt).itemsize
    kv_model, st_model = cfg.memory.models()
    tpf_matched = cfg.memory.tokens_per_frame()
    matched_state = recurrent_state_floats(st_model) * st_model.bytes_per_scalar
    batch = cfg.bench.frame_batch
    points = []
    complete = True
    t_start = time.perf_counter()
    for F in counts:
        if max_seconds is not None and time.perf_counter() - t_start > max_seconds:
            complete = False
            break
        merge = merge_applies(enc_cfg, F)
        removals = enc_cfg.schedule().removals if merge else None
        tpf = enc_cfg.tokens_per_frame(merged=merge)
        ledger = AllocationLedger()
        decoder.reset()
        ledger.set("recurrent-state", decoder.state_bytes())
        n_tokens = 0
        for b0 in range(0, F, batch):
            nb = min(batch, F - b0)
            rng = np.random.default_rng([cfg.seed, F, b0])
            pix = _synthetic_frames(rng, nb, enc_cfg.image_side)
            with torch.no_grad():
                toks, sizes, _, _ = encoder(pix, removals, enc_cfg.sort_order, rng)
            if int(sizes.sum()) != nb * enc_cfg.n_patches:
                raise ArithmeticError("token mass not conserved")
            flat = toks.reshape(-1, toks.shape[-1]).cpu().numpy().astype(np_dt)
            ledger.set("frame-buffer", flat.nbytes)
            decoder.prefill(flat)
            n_tokens += len(flat)
            ledger.set("recurrent-state", decoder.state_bytes())
            ledger.release("frame-buffer")
        if not all(np.isfinite(s.a).all() and np.isfinite(s.b).all() for s in decoder.states):
            raise ArithmeticError(f"non-finite recurrent state at F={F}")
        toy_kv = 2 * n_tokens * d * L * item
        baseline_measured = None
        if toy_kv <= cfg.bench.baseline_byte_budget:
            bl = AllocationLedger()
            att = AttentionDecoder(d, L, seed=cfg.seed, dtype=np_dt, ledger=bl)
            att.fill_synthetic(n_tokens, np.random.default_rng([cfg.seed, F, 1]))
            baseline_measured = bl.peak["kv-cache"]
            del att
        T_matched = F * tpf_matched
        kv_matched = kv_cache_floats(kv_model, T_matched) * kv_model.bytes_per_scalar
        points.append({
            "frames": F,
            "tokens": n_tokens,
            "tokens_per_frame": tpf,
            "measured": {
                "recurrent_state_bytes": ledger.peak["recurrent-state"],
                "recurrent_peak_bytes": ledger.peak_total,
                "baseline_kv_bytes": baseline_measured,
            },
            "analytic": {
                "recurrent_state_bytes": 5 * d * L * item,
                "baseline_kv_bytes": toy_kv,
                "matched_tokens": T_matched,
                "matched_recurrent_state_bytes": matched_state,
                "matched_baseline_kv_bytes": kv_matched,
                "matched_ratio": kv_matched / matched_state,
            },
        })
        if log:
            log(f"F={F}: tokens={n_tokens} state={ledger.peak['recurrent-state']}B "
                f"matched ratio={kv_matched / matched_state:.1f}")
    state = [p["measured"]["recurrent_state_bytes"] for p in points]
    summary = {
        "recurrent_state_spread": (max(state) - min(state)) / min(state) if state else None,
        "baseline_linear_r2": _r2([p["frames"] for p in points],
                                  [p["analytic"]["matched_baseline_kv_bytes"] for p in points]),
        "matched_tokens_per_frame": tpf_matched,
        "comparison": "recurrent state vs causal-attention KV cache at equal token counts",
    }
    return {
        "kind": "bench-mem",
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "points": points,
        "summary": summary,
        "complete": complete,
        "timing": {"timestamp": _timestamp(), "seconds": time.perf_counter() - t_start},
    }


def _time_steps(step, restore, inputs, warmup, samples, per_sample):
    out = []
    for i in range(warmup + samples):
        x = inputs[i % len(inputs)]
        t0 = time.perf_counter()
        for _ in range(per_sample):
            step(x)
        dt = (time.perf_counter() - t0) / per_sample
        restore()
        if i >= warmup:
            out.append(dt)
    return out


def _check_resolution(samples, min_seconds, step_batch, what):
    res = time.get_clock_info("perf_counter").resolution
    med = float(np.median(samples))
    if med < max(min_seconds, 100 * res / step_batch):
        raise TimerResolutionError(
            f"{what}: median step {med:.2e}s is below timer resolution; raise bench.step_batch "
            f"(now {step_batch}) or bench.latency_d_model"
        )
    return med


def bench_latency(cfg, prefix_lengths=None, log=None):
    """Median per-token step time at each prefix length for both decoders."""
    prefixes = list(prefix_lengths or cfg.bench.prefix_lengths)
    if prefixes != sorted(set(prefixes)) or prefixes[0] < 1:
        raise ConfigError("prefix lengths must be strictly ascending positive integers")
    b = cfg.bench
    step_batch = b.step_batch
    np_dt, _ = dtype_for(cfg.precision)
    d, L = b.latency_d_model, b.latency_layers
    rng = np.random.default_rng([cfg.seed, 2])
    inputs = rng.standard_normal((16, d)).astype(np_dt)
    rec = RecurrentDecoder(d, L, seed=cfg.seed, dtype=np_dt, data_dependent=cfg.language.data_dependent)
    t_start = time.perf_counter()
    points = []
    rec_med = {}
    base_med = {}
    for P in prefixes:
        rec.reset()
        prng = np.random.default_rng([cfg.seed, 3, P])
        for s in range(0, P, 4096):
            rec.prefill(prng.standard_normal((min(4096, P - s), d)).astype(np_dt))
        saved = [s.copy() for s in rec.states]

        def restore():
            rec.states = [s.copy() for s in saved]

        rs = _time_steps(rec.step, restore, inputs, b.warmup, b.samples, step_batch)
        rec_med[P] = _check_resolution(rs, b.min_sample_seconds, step_batch, f"recurrent @ {P}")
        timing = {"recurrent_median_s": rec_med[P], "recurrent_samples_s": rs}
        base_flops = None
        if P <= b.baseline_max_prefix:
            att = AttentionDecoder(d, L, seed=cfg.seed, dtype=np_dt)
            att.fill_synthetic(P, np.random.default_rng([cfg.seed, 4, P]))
            bs = _time_steps(att.step, lambda: att.cache.truncate(P), inputs, b.warmup, b.samples, step_batch)
            base_med[P] = _check_resolution(bs, b.min_sample_seconds, step_batch, f"baseline @ {P}")
            timing.update(baseline_median_s=base_med[P], baseline_samples_s=bs)
            # projections + MLP, plus scores and weighted sum over P + 1 cached rows
            base_flops = L * (2 * 4 * d * d + 2 * 4 * d * d + 2 * 2 * (P + 1) * d)
            del att
        points.append({
            "prefix": P,
            "samples": b.samples,
            "warmup": b.warmup,
            "step_batch": step_batch,
            "analytic": {
                "recurrent_state_bytes": rec.state_bytes(),
                "recurrent_step_flops_growth": 0,
                "baseline_step_flops": base_flops,
            },
            "timing": timing,
        })
        if log:
            log(f"prefix {P}: recurrent {rec_med[P] * 1e6:.1f}us"
                + (f" baseline {base_med[P] * 1e6:.1f}us" if P in base_med else ""))
    bp = sorted(base_med)
    summary_timing = {
        "recurrent_ratio_last_first": rec_med[prefixes[-1]] / rec_med[prefixes[0]],
        "baseline_strictly_increasing": all(base_med[a] < base_med[c] for a, c in zip(bp, bp[1:])),
        "seconds": time.perf_counter() - t_start,
        "timestamp": _timestamp(),
    }
    return {
        "kind": "bench-latency",
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "dims": {"d_model": d, "n_layers": L},
        "points": points,
        "timing": summary_timing,
    }


def task_encoder(cfg, keep_ratio=None, sort_order=None):
    """Encoder config the needle task trains at (small geometry, run overrides applied)."""
    enc = cfg.encoder
    return preset(cfg.ablate.task_preset,
                  keep_ratio=keep_ratio if keep_ratio is not None else enc.keep_ratio,
                  sort_order=sort_order or enc.sort_order,
                  merge_policy=enc.merge_policy)


def toy_train(cfg, log=None):
    res = train_needle(cfg.needle, task_encoder(cfg), cfg.train, log=log)
    model = res.pop("model")
    res = {"kind": "toy-train", "config": cfg.to_dict(), "seed": cfg.seed, **res}
    return res, model


def ablate(cfg, axis, log=None):
    """Returns CSV text: one row per order (or keep ratio)."""
    if axis not in ("order", "ratio"):
        raise ConfigError("axis must be 'order' or 'ratio'")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if axis == "order":
        w.writerow(["order", "accuracy", "tokens_per_frame"])
        values = [("sort_order", o) for o in cfg.ablate.orders]
    else:
        w.writerow(["keep_ratio", "accuracy", "tokens_per_frame"])
        values = [("keep_ratio", r) for r in cfg.ablate.ratios]
    for key, val in values:
        run_enc = cfg.encoder.__class__(**{**cfg.encoder.to_dict(), key: val})
        try:
            tpf = run_enc.tokens_per_frame()
        except ValueError as e:
            raise ConfigError(f"{key}={val}: {e}") from None
        t_enc = task_encoder(cfg, **{key: val})
        res = train_needle(cfg.needle, t_enc, cfg.train, timings=False)
        acc = res["final_accuracy"]
        if not math.isfinite(acc):
            raise ArithmeticError(f"{key}={val}: non-finite accuracy")
        w.writerow([val, f"{acc:.4f}", tpf])
        if log:
            log(f"{key}={val}: accuracy {acc:.4f} tokens/frame {tpf}")
    return buf.getvalue()


def write_dat(path, report):
    """Whitespace-separated columns for gnuplot; missing values are ``?``."""
    def fmt(v):
        return "?" if v is None else (f"{v:.9g}" if isinstance(v, float) else str(v))

    lines = []
    if report["kind"] == "bench-mem":
        lines.append("# frames tokens recurrent_state_bytes recurrent_peak_bytes baseline_kv_bytes "
                     "matched_recurrent_state_bytes matched_baseline_kv_bytes matched_ratio")
        for p in report["points"]:
            m, a = p["measured"], p["analytic"]
            lines.append(" ".join(fmt(v) for v in (
                p["frames"], p["tokens"], m["recurrent_state_bytes"], m["recurrent_peak_bytes"],
                a["baseline_kv_bytes"], a["matched_recurrent_state_bytes"], a["matched_baseline_kv_bytes"],
                a["matched_ratio"])))
    elif report["kind"] == "bench-latency":
        lines.append("# prefix recurrent_median_s baseline_median_s")
        for p in report["points"]:
            t = p["timing"]
            lines.append(" ".join(fmt(v) for v in (p["prefix"], t["recurrent_median_s"], t.get("baseline_median_s"))))
    else:
        raise ValueError(f"no data layout for {report['kind']}")
    Path(path).write_text("\n".join(lines) + "\n")
