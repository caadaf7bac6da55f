"""Both inference paths plus latency/FLOP/memory measurement.

The autoregressive path runs the prefix once and then one token-emitting
forward per action dimension (with or without a KV cache); the joint path
emits every action token from a single forward. An analytic FLOP oracle
mirrors the exact matmul shapes each path executes and is cross-checked
against a counter instrumented into the numeric core.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import codec as codec_mod
from . import tensor as T
from .codec import ActionCodec
from .encoder import encode_image
from .errors import BenchError, DecodeError
from .masks import SequenceLayout, build_mask
from .policy import (
    KVCache,
    Model,
    PolicyConfig,
    assemble_sequence,
    forward_cached,
    joint_slots,
    lm_head,
    trunk,
)
from .tensor import OpCounter, instrumented
from .world import Episode

PATHS = ("ar_nocache", "ar_cache", "joint")


@dataclass
class DecodeTrace:
    """What a single decode actually did."""

    path: str
    token_emitting_forwards: int = 0
    prefix_passes: int = 0
    trunk_flops: int = 0
    peak_bytes: int = 0
    prefix_ns: int = 0
    decode_ns: int = 0
    mode_mismatch: bool = False

    @property
    def total_ns(self) -> int:
        return self.prefix_ns + self.decode_ns


def _prefix_embedding(model: Model, ep: Episode):
    """Image patch embeddings plus instruction token, with positions added."""
    pol = model.policy
    dtype = pol.token_table.data.dtype
    img_emb = encode_image(ep.image, model.encoder, dtype=dtype)
    instr = T.gather_rows(pol.token_table, [ep.instruction])
    emb = T.concat([img_emb, instr], axis=0)
    p = emb.shape[0]
    return T.add(emb, T.slice_rows(pol.pos_table, 0, p)), p


def _slot_embedding(model: Model, step: int, prev_token: int | None,
                    prefix_len: int):
    """Causal-mode slot content for one decode step, position added.

    Step 0 carries the begin-of-action marker (first learned query); later
    steps carry the embedding of the token emitted at the previous step.
    """
    pol = model.policy
    if prev_token is None:
        row = T.gather_rows(pol.action_queries, [0])
    else:
        row = T.gather_rows(pol.token_table, [prev_token])
    pos = T.slice_rows(pol.pos_table, prefix_len + step, prefix_len + step + 1)
    return T.add(row, pos)


def _emit(cfg: PolicyConfig, row: np.ndarray, dim: int,
          restrict: bool) -> int:
    lo, hi = cfg.action_token_range(dim)
    if restrict:
        return lo + int(np.argmax(row[lo:hi]))
    tok = int(np.argmax(row))
    if not lo <= tok < hi:
        raise DecodeError(
            f"emitted token {tok} outside dim {dim} range [{lo}, {hi})"
        )
    return tok


def decode_autoregressive(model: Model, ep: Episode, codec: ActionCodec,
                          use_cache: bool = True, restrict: bool = True
                          ) -> tuple[list[int], np.ndarray, DecodeTrace]:
    """Greedy sequential decode: prefix once, then D steps feeding back the
    previously emitted token's embedding.

    Without the cache each step recomputes the full sequence so far; the
    emitted tokens are identical either way.
    """
    cfg = model.config
    d_dims = cfg.action_dims
    trace = DecodeTrace(path="ar_cache" if use_cache else "ar_nocache",
                        mode_mismatch=cfg.mask_mode != "causal")
    counter = OpCounter()
    with T.no_grad():
        t0 = time.perf_counter_ns()
        prefix_emb, p = _prefix_embedding(model, ep)
        causal = build_mask(SequenceLayout(p, d_dims), "causal").allow
        cache = KVCache.empty(model.policy,
                              dtype=model.policy.token_table.data.dtype)
        with instrumented(counter):
            # Prefix pass: primes the cache; its logits are never used, so
            # the head is skipped. Run uncached too, to keep the two traces
            # structurally identical.
            if use_cache:
                forward_cached(model.policy, prefix_emb, cache,
                               causal[:p, :p], want_logits=False)
            else:
                trunk(model.policy, prefix_emb, causal[:p, :p])
        trace.prefix_passes = 1
        t1 = time.perf_counter_ns()
        trace.prefix_ns = t1 - t0

        tokens: list[int] = []
        slot_rows = []
        for step in range(d_dims):
            prev = tokens[-1] if tokens else None
            slot = _slot_embedding(model, step, prev, p)
            with instrumented(counter):
                if use_cache:
                    logits, cache = forward_cached(
                        model.policy, slot, cache,
                        np.ones((1, p + step + 1), dtype=bool),
                    )
                    row = logits.data[0]
                else:
                    slot_rows.append(slot)
                    full = T.concat([prefix_emb] + slot_rows, axis=0)
                    n = full.shape[0]
                    hidden = trunk(model.policy, full, causal[:n, :n])
                    row = lm_head(model.policy,
                                  T.slice_rows(hidden, n - 1, n)).data[0]
            trace.token_emitting_forwards += 1
            tokens.append(_emit(cfg, row, step, restrict))
        trace.decode_ns = time.perf_counter_ns() - t1
    trace.trunk_flops = counter.flops
    trace.peak_bytes = counter.peak_bytes
    return tokens, codec_mod.detokenize(codec, tokens), trace


def decode_joint(model: Model, ep: Episode, codec: ActionCodec,
                 restrict: bool = True
                 ) -> tuple[list[int], np.ndarray, DecodeTrace]:
    """Greedy single-pass decode: one forward over prefix plus D query slots
    under the joint mask, argmax at each action position."""
    cfg = model.config
    trace = DecodeTrace(path="joint", mode_mismatch=cfg.mask_mode != "joint")
    counter = OpCounter()
    with T.no_grad():
        t0 = time.perf_counter_ns()
        dtype = model.policy.token_table.data.dtype
        img_emb = encode_image(ep.image, model.encoder, dtype=dtype)
        t1 = time.perf_counter_ns()
        trace.prefix_ns = t1 - t0
        with instrumented(counter):
            emb, layout = assemble_sequence(
                model.policy, img_emb, [ep.instruction],
                joint_slots(model.policy),
            )
            mask = build_mask(
                layout, "joint",
                joint_full_bidirectional=cfg.joint_full_bidirectional,
            )
            hidden = trunk(model.policy, emb, mask.allow)
            action_hidden = T.slice_rows(hidden, layout.prefix_len,
                                         layout.total)
            logits = lm_head(model.policy, action_hidden)
        trace.token_emitting_forwards = 1
        tokens = [
            _emit(cfg, logits.data[dim], dim, restrict)
            for dim in range(cfg.action_dims)
        ]
        trace.decode_ns = time.perf_counter_ns() - t1
    trace.trunk_flops = counter.flops
    trace.peak_bytes = counter.peak_bytes
    return tokens, codec_mod.detokenize(codec, tokens), trace


# ---------------------------------------------------------------------------
# Analytic FLOP oracle
# ---------------------------------------------------------------------------


def _trunk_flops(cfg: PolicyConfig, t: int) -> int:
    """Matmul FLOPs of one trunk pass over t positions (no head)."""
    d, m = cfg.model_dim, cfg.mlp_hidden
    per_layer = 8 * t * d * d + 4 * t * t * d + 4 * t * d * m
    return cfg.n_layers * per_layer


def _cached_step_flops(cfg: PolicyConfig, keys: int) -> int:
    """Matmul FLOPs of one incremental position attending `keys` keys."""
    d, m = cfg.model_dim, cfg.mlp_hidden
    per_layer = 8 * d * d + 4 * d * keys + 4 * d * m
    return cfg.n_layers * per_layer


def _head_flops(cfg: PolicyConfig, rows: int) -> int:
    return 2 * rows * cfg.model_dim * cfg.vocab_size


def count_flops(cfg: PolicyConfig, layout: SequenceLayout, path: str) -> int:
    """Closed-form matmul FLOP count for one decode, mirroring the exact
    shapes the implementation executes; must match the instrumented counter
    bit-for-bit."""
    p, d_dims = layout.prefix_len, layout.action_len
    if path == "joint":
        return _trunk_flops(cfg, layout.total) + _head_flops(cfg, d_dims)
    if path == "ar_nocache":
        total = _trunk_flops(cfg, p)
        for t in range(1, d_dims + 1):
            total += _trunk_flops(cfg, p + t) + _head_flops(cfg, 1)
        return total
    if path == "ar_cache":
        total = _trunk_flops(cfg, p)
        for t in range(1, d_dims + 1):
            total += _cached_step_flops(cfg, p + t) + _head_flops(cfg, 1)
        return total
    raise BenchError(f"unknown path {path!r}")


# ---------------------------------------------------------------------------
# Benchmark harness
# ---------------------------------------------------------------------------


@dataclass
class PathStats:
    median_ns: float
    p10_ns: float
    p90_ns: float
    prefix_median_ns: float
    decode_median_ns: float
    flops: int
    peak_bytes: int
    token_emitting_forwards: int
    prefix_passes: int
    tokens: list[int]


@dataclass
class BenchReport:
    config: dict[str, str]
    repeats: int
    warmup: int
    paths: dict[str, PathStats] = field(default_factory=dict)
    ratios: dict[str, float] = field(default_factory=dict)


def _timer_granularity_ns(samples: int = 2000) -> int:
    last = time.perf_counter_ns()
    best = None
    for _ in range(samples):
        now = time.perf_counter_ns()
        delta = now - last
        if delta > 0 and (best is None or delta < best):
            best = delta
        last = now
    return best or 1


def _percentile(sorted_vals: list[int], q: float) -> float:
    n = len(sorted_vals)
    virtual = q * (n - 1)
    lo = int(virtual)
    hi = min(lo + 1, n - 1)
    frac = virtual - lo
    return sorted_vals[lo] + frac * (sorted_vals[hi] - sorted_vals[lo])


def run_bench(model: Model, codec: ActionCodec, ep: Episode,
              repeats: int = 50, warmup: int = 10,
              allow_noisy: bool = False, timing: bool = True,
              config_echo: dict[str, str] | None = None) -> BenchReport:
    """Time all three decode paths single-threaded, warmup discarded.

    Latency/FLOP/memory ratios are computed from the same run. Emitted
    tokens must be bit-stable across repeats; a coarse timer relative to the
    workload is an error advising a larger config.
    """
    if repeats < 30 and not allow_noisy:
        raise BenchError(f"repeats must be >= 30 (got {repeats}); "
                         "pass allow_noisy to override")
    if warmup < 5 and not allow_noisy:
        raise BenchError(f"warmup must be >= 5 (got {warmup}); "
                         "pass allow_noisy to override")

    def run_path(path):
        if path == "joint":
            return lambda: decode_joint(model, ep, codec)
        return lambda: decode_autoregressive(model, ep, codec,
                                             use_cache=path == "ar_cache")

    report = BenchReport(config=dict(config_echo or {}), repeats=repeats,
                         warmup=warmup)
    for path in PATHS:
        fn = run_path(path)
        for _ in range(warmup):
            fn()
        totals: list[int] = []
        prefixes: list[int] = []
        decodes: list[int] = []
        first_tokens = None
        first_trace = None
        for _ in range(repeats):
            t0 = time.perf_counter_ns()
            tokens, _, trace = fn()
            totals.append(time.perf_counter_ns() - t0)
            prefixes.append(trace.prefix_ns)
            decodes.append(trace.decode_ns)
            if first_tokens is None:
                first_tokens, first_trace = tokens, trace
            elif tokens != first_tokens:
                raise BenchError(f"{path}: greedy decode not bit-stable")
        totals.sort()
        prefixes.sort()
        decodes.sort()
        if timing:
            gran = _timer_granularity_ns()
            if _percentile(totals, 0.5) < 100 * gran:
                raise BenchError(
                    f"{path}: median {_percentile(totals, 0.5):.0f} ns is "
                    f"below 100x timer granularity ({gran} ns); use a "
                    "larger config"
                )
        z = 1.0 if timing else 0.0
        report.paths[path] = PathStats(
            median_ns=z * _percentile(totals, 0.5),
            p10_ns=z * _percentile(totals, 0.1),
            p90_ns=z * _percentile(totals, 0.9),
            prefix_median_ns=z * _percentile(prefixes, 0.5),
            decode_median_ns=z * _percentile(decodes, 0.5),
            flops=first_trace.trunk_flops,
            peak_bytes=first_trace.peak_bytes,
            token_emitting_forwards=first_trace.token_emitting_forwards,
            prefix_passes=first_trace.prefix_passes,
            tokens=first_tokens,
        )

    joint = report.paths["joint"]
    for path in ("ar_nocache", "ar_cache"):
        ps = report.paths[path]
        key = f"{path}_over_joint"
        report.ratios[f"latency.{key}"] = (
            ps.median_ns / joint.median_ns if timing else 0.0
        )
        report.ratios[f"flops.{key}"] = ps.flops / joint.flops
        report.ratios[f"memory.{key}"] = (
            ps.peak_bytes / joint.peak_bytes if joint.peak_bytes else 0.0
        )
    return report


def report_kv_lines(report: BenchReport) -> list[str]:
    lines = []
    for key in sorted(report.config):
        lines.append(f"config.{key}={report.config[key]}")
    lines.append(f"bench.repeats={report.repeats}")
    lines.append(f"bench.warmup={report.warmup}")
    for path in PATHS:
        ps = report.paths[path]
        pre = f"path.{path}"
        lines.append(f"{pre}.median_ns={ps.median_ns!r}")
        lines.append(f"{pre}.p10_ns={ps.p10_ns!r}")
        lines.append(f"{pre}.p90_ns={ps.p90_ns!r}")
        lines.append(f"{pre}.prefix_median_ns={ps.prefix_median_ns!r}")
        lines.append(f"{pre}.decode_median_ns={ps.decode_median_ns!r}")
        lines.append(f"{pre}.flops={ps.flops}")
        lines.append(f"{pre}.peak_bytes={ps.peak_bytes}")
        lines.append(f"{pre}.token_emitting_forwards={ps.token_emitting_forwards}")
        lines.append(f"{pre}.prefix_passes={ps.prefix_passes}")
        lines.append(f"{pre}.tokens=" + ",".join(str(t) for t in ps.tokens))
    for key in sorted(report.ratios):
        lines.append(f"ratio.{key}={report.ratios[key]!r}")
    return lines


def render_table(report: BenchReport) -> str:
    """Text table: latency and memory per decode path plus ratio rows."""
    rows = [("path", "median_ns", "p10_ns", "p90_ns", "flops", "peak_bytes")]
    for path in PATHS:
        ps = report.paths[path]
        rows.append((path, f"{ps.median_ns:.0f}", f"{ps.p10_ns:.0f}",
                     f"{ps.p90_ns:.0f}", str(ps.flops), str(ps.peak_bytes)))
    for path in ("ar_nocache", "ar_cache"):
        key = f"{path}_over_joint"
        rows.append((
            f"ratio {path}/joint",
            f"{report.ratios[f'latency.{key}']:.2f}x",
            "",
            "",
            f"{report.ratios[f'flops.{key}']:.2f}x",
            f"{report.ratios[f'memory.{key}']:.2f}x",
        ))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    out = []
    for r in rows:
        out.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    return "\n".join(out) + "\n"


def write_report(path_txt, path_kv, report: BenchReport):
    with open(path_kv, "w") as fh:
        fh.write("\n".join(report_kv_lines(report)) + "\n")
    with open(path_txt, "w") as fh:
        fh.write(render_table(report))
