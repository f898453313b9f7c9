"""Efficiency benchmarks: cache reduction, time to first token, decode throughput."""

import logging
import statistics
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from kvx2l.compressor import LEVEL_HIGH, LEVEL_LOW, CompressedKV, compress_level
from kvx2l.config import PipelineConfig
from kvx2l.engine import Engine
from kvx2l.errors import ConfigurationError, PreconditionError, ResourceError
from kvx2l.hybrid import HybridContext, build_plan, merge_hybrid, open_session
from kvx2l.kvstore import HotStore, entry_bytes, predict_reduction
from kvx2l.niah import DEFAULT_DEPTHS, NiahSetting, eval_niah, gen_niah
from kvx2l.pipeline import score_chunks, uncompressed_hybrid

logger = logging.getLogger(__name__)

WARMUPS = 2
MIN_REPETITIONS = 3
DECODE_STEPS = 4
DEFAULT_K_GRID = (1, 2, 3, 4, 5, 6)
DEFAULT_RATIO_GRID = ((2, 8), (2, 16), (2, 32), (2, 72))

UNCOMPRESSED = "w/o cmpr"
UNIFORM = "uniform"
HYBRID = "hybrid"


@dataclass
class BenchRecord:
    pipeline: str
    alpha_low: int
    alpha_high: int
    k: int
    oracle: str
    n: int
    m: int
    context_entries: int
    ttft_ms: float
    baseline_ttft_ms: float
    speedup_vs_baseline: float
    decode_tok_per_s: float
    step_ms: float
    reduction_pct: float
    predicted_reduction_pct: float
    niah_accuracy: Optional[float] = None

    def to_row(self) -> Dict:
        return asdict(self)


RECORD_FIELDS = [f.name for f in fields(BenchRecord)]


def check_memory_budget(engine: Engine, n: int, budget_mb: float):
    """Raise ResourceError when the uncompressed KV for ``n`` tokens exceeds the budget."""
    needed = n * entry_bytes(engine.config)
    if needed > budget_mb * 1024 * 1024:
        raise ResourceError(
            f"uncompressed context of {n} tokens needs {needed / 2 ** 20:.1f} MB of KV", budget_mb
        )


def time_context(engine: Engine, context: HybridContext, task: np.ndarray,
                 repetitions: int, warmups: int = WARMUPS) -> Tuple[float, float, float]:
    """Median TTFT (ms), median decode step (ms) and decode tokens/s over a ready context."""
    ttfts, steps = [], []
    for rep in range(warmups + repetitions):
        session = open_session(engine, context)
        start = time.perf_counter()
        logits = session.prefill(task)
        int(np.argmax(logits))
        elapsed = time.perf_counter() - start
        session.generate(logits, DECODE_STEPS, clock=time.perf_counter)
        if rep >= warmups:
            ttfts.append(elapsed)
            steps.extend(session.step_seconds)
    step = statistics.median(steps)
    return 1000 * statistics.median(ttfts), 1000 * step, (1.0 / step if step > 0 else float("inf"))


class BenchWorkload:
    """One synthetic context shared by every benchmark point."""

    def __init__(self, engine: Engine, config: PipelineConfig, n: int, seed: Optional[int] = None):
        check_memory_budget(engine, n, config.memory_budget_mb)
        self.engine = engine
        self.config = config
        self.n = n
        self.instance = gen_niah(
            engine, n, depth=0.5, seed=config.seed if seed is None else seed,
            tokens_per_frame=config.tokens_per_frame, chunk_frames=config.chunk_frames,
        )
        self.chunks = self.instance.chunks
        self.widths = [c.width for c in self.chunks]
        self._passes: Dict[Tuple[int, str], List[CompressedKV]] = {}
        self._lock = threading.Lock()
        self._baseline_ms: Optional[float] = None

    @property
    def task(self) -> np.ndarray:
        return self.instance.query.text_tokens

    def caches(self, ratio: int, level: str) -> List[CompressedKV]:
        with self._lock:
            key = (ratio, level)
            if key not in self._passes:
                self._passes[key] = compress_level(self.engine, self.instance.tokens, self.chunks, ratio, level)
            return self._passes[key]

    def baseline_ttft_ms(self, repetitions: int) -> float:
        """Uncompressed baseline, measured once per workload."""
        with self._lock:
            if self._baseline_ms is None:
                context = uncompressed_hybrid(self.engine, self.instance.tokens, self.chunks)
                self._baseline_ms = time_context(self.engine, context, self.task, repetitions)[0]
                logger.info(f"Baseline ({UNCOMPRESSED}) TTFT: {self._baseline_ms:.3f} ms over {len(context)} entries")
            return self._baseline_ms

    def build(self, alpha_low: int, alpha_high: int, k: int, oracle: str) -> Tuple[HybridContext, HotStore, Tuple[int, ...]]:
        high = self.caches(alpha_high, LEVEL_HIGH)
        scores = score_chunks(
            oracle, self.engine, self.instance.query, self.chunks, high, k,
            seed=self.config.seed, tokens=self.instance.tokens, noise=self.config.oracle_noise,
        )
        plan = build_plan(scores, k)
        low = self.caches(alpha_low, LEVEL_LOW) if plan.selected else []
        hot = HotStore()
        for i in plan.selected:
            hot.put(low[i])
        for i in plan.complement:
            hot.put(high[i])
        hybrid = merge_hybrid(
            [low[i] for i in plan.selected], [high[i] for i in plan.complement],
            self.config.keep_original_positions, plan,
        )
        return hybrid, hot, plan.selected


def _pipeline_label(alpha_low: int, alpha_high: int, k: int, m: int) -> str:
    if alpha_low == alpha_high or k == 0 or k >= m:
        return UNIFORM
    return HYBRID


def bench_point(
    workload: BenchWorkload,
    alpha_low: int,
    alpha_high: int,
    k: int,
    oracle: str,
    repetitions: int,
    niah_trials: int = 0,
) -> BenchRecord:
    if repetitions < MIN_REPETITIONS:
        raise PreconditionError(f"need at least {MIN_REPETITIONS} repetitions, got {repetitions}")
    if alpha_low > alpha_high:
        raise ConfigurationError(f"alpha_low ({alpha_low}) must not exceed alpha_high ({alpha_high})")
    m = len(workload.chunks)
    k = min(k, m)
    baseline_ms = workload.baseline_ttft_ms(repetitions)
    hybrid, hot, selected = workload.build(alpha_low, alpha_high, k, oracle)
    ttft_ms, step_ms, tok_per_s = time_context(workload.engine, hybrid, workload.task, repetitions)
    measured = hot.measure_reduction(workload.widths)
    predicted = predict_reduction(workload.widths, alpha_low, alpha_high, k, selected)

    accuracy = None
    if niah_trials > 0:
        setting = NiahSetting("point", alpha_low, alpha_high, k, oracle, workload.config.oracle_noise)
        matrices = eval_niah(
            workload.engine, [workload.n], DEFAULT_DEPTHS, niah_trials, [setting],
            seed=workload.config.seed, tokens_per_frame=workload.config.tokens_per_frame,
            chunk_frames=workload.config.chunk_frames,
        )
        accuracy = matrices["point"].mean()

    record = BenchRecord(
        pipeline=_pipeline_label(alpha_low, alpha_high, k, m),
        alpha_low=alpha_low,
        alpha_high=alpha_high,
        k=k,
        oracle=oracle,
        n=workload.n,
        m=m,
        context_entries=len(hybrid),
        ttft_ms=ttft_ms,
        baseline_ttft_ms=baseline_ms,
        speedup_vs_baseline=baseline_ms / ttft_ms if ttft_ms > 0 else float("inf"),
        decode_tok_per_s=tok_per_s,
        step_ms=step_ms,
        reduction_pct=measured.reduction_pct,
        predicted_reduction_pct=predicted.reduction_pct,
        niah_accuracy=accuracy,
    )
    logger.info(
        f"{record.pipeline} {alpha_low}x/{alpha_high}x k={k}: {record.context_entries} entries, "
        f"reduction {record.reduction_pct:.1f}%, TTFT {ttft_ms:.3f} ms ({record.speedup_vs_baseline:.2f}x)"
    )
    return record


def bench_config(
    engine: Engine,
    config: PipelineConfig,
    n: int,
    repetitions: int = 5,
    workload: Optional[BenchWorkload] = None,
) -> BenchRecord:
    """Benchmark the configured pipeline against the uncompressed baseline."""
    if repetitions < MIN_REPETITIONS:
        raise PreconditionError(f"need at least {MIN_REPETITIONS} repetitions, got {repetitions}")
    workload = workload or BenchWorkload(engine, config, n)
    return bench_point(workload, config.alpha_low, config.alpha_high, config.topk, config.oracle, repetitions)


def bench_table(engine: Engine, config: PipelineConfig, n: int, repetitions: int = 5) -> List[BenchRecord]:
    """Uncompressed, uniform-alpha_low, uniform-alpha_high and hybrid rows from one workload."""
    workload = BenchWorkload(engine, config, n)
    m = len(workload.chunks)
    return [
        baseline_record(workload, config.oracle, repetitions),
        bench_point(workload, config.alpha_low, config.alpha_low, m, config.oracle, repetitions),
        bench_point(workload, config.alpha_low, config.alpha_high, 0, config.oracle, repetitions),
        bench_point(workload, config.alpha_low, config.alpha_high, config.topk, config.oracle, repetitions),
    ]


def baseline_record(workload: BenchWorkload, oracle: str, repetitions: int) -> BenchRecord:
    """The uncompressed context: every token's KV kept."""
    context = uncompressed_hybrid(workload.engine, workload.instance.tokens, workload.chunks)
    baseline_ms = workload.baseline_ttft_ms(repetitions)
    _, step_ms, tok_per_s = time_context(workload.engine, context, workload.task, repetitions)
    return BenchRecord(
        pipeline=UNCOMPRESSED,
        alpha_low=1,
        alpha_high=1,
        k=len(workload.chunks),
        oracle=oracle,
        n=workload.n,
        m=len(workload.chunks),
        context_entries=len(context),
        ttft_ms=baseline_ms,
        baseline_ttft_ms=baseline_ms,
        speedup_vs_baseline=1.0,
        decode_tok_per_s=tok_per_s,
        step_ms=step_ms,
        reduction_pct=0.0,
        predicted_reduction_pct=0.0,
    )


def sweep(
    engine: Engine,
    config: PipelineConfig,
    dimension: str,
    n: int,
    values: Optional[Sequence] = None,
    repetitions: int = 5,
    workers: int = 1,
    strict_timing: bool = False,
    niah_trials: int = 0,
) -> List[BenchRecord]:
    """One BenchRecord per sweep point over k or (alpha_low, alpha_high) pairs."""
    if dimension == "k":
        values = list(DEFAULT_K_GRID if values is None else values)
        points = [(config.alpha_low, config.alpha_high, int(k)) for k in values]
    elif dimension == "ratio":
        values = list(DEFAULT_RATIO_GRID if values is None else values)
        points = [(int(lo), int(hi), config.topk) for lo, hi in values]
    else:
        raise ConfigurationError(f"unknown sweep dimension '{dimension}', expected 'k' or 'ratio'")
    if not points:
        logger.info("Empty sweep grid")
        return []

    workload = BenchWorkload(engine, config, n)
    logger.info(f"Sweeping {dimension} over {len(points)} points (n={n}, m={len(workload.chunks)})")

    def run(point):
        lo, hi, k = point
        return bench_point(workload, lo, hi, k, config.oracle, repetitions, niah_trials)

    if workers > 1 and not strict_timing:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, points))
    return [run(point) for point in points]
