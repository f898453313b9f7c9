"""End-to-end orchestration.

Phases:
1. Bi-level prefill (L and H passes)
2. Offload to the cold store
3. Relevance scoring and reload plan
4. Hybrid merge and decoding
"""

import logging
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from kvx2l.chunking import ChunkSpec, VideoTokens, partition
from kvx2l.compressor import LEVEL_HIGH, LEVEL_LOW, CompressedKV, CompressionConfig, compress_bilevel, compress_level
from kvx2l.config import PipelineConfig
from kvx2l.engine import DTYPE, Engine, KVBlock, KVBuffer, TokenEmbedding
from kvx2l.errors import ConfigurationError, DimensionError, IntegrityError, PreconditionError
from kvx2l.hybrid import HybridContext, ReloadPlan, build_plan, decode_answer, merge_hybrid
from kvx2l.kvstore import TieredKVStore, predict_reduction
from kvx2l.oracle import (
    BASELINES,
    RelevanceScores,
    TaskQuery,
    chunk_frame_embeddings,
    load_embedding_file,
    perturb_scores,
    score_attention,
    score_baseline,
    score_cosine,
    score_perfect,
    write_embedding_file,
)

logger = logging.getLogger(__name__)

FRAMES_FILE = "frames.vxem"
# Block size for encoding the uncompressed baseline context.
BASELINE_BLOCK = 256


@dataclass
class CompressionResult:
    chunks: List[ChunkSpec]
    low: List[CompressedKV]
    high: List[CompressedKV]

    @property
    def widths(self) -> List[int]:
        return [c.width for c in self.chunks]


def score_chunks(
    oracle: str,
    engine: Engine,
    query: TaskQuery,
    chunks: Sequence[ChunkSpec],
    high: Sequence[CompressedKV],
    k: int,
    seed: int = 0,
    tokens: Optional[VideoTokens] = None,
    frame_embeddings: Optional[np.ndarray] = None,
    noise: float = 0.0,
) -> RelevanceScores:
    """Dispatch to the named relevance oracle."""
    m = len(chunks)
    if oracle == "cosine":
        if query.embedding is None:
            raise PreconditionError("cosine oracle needs a query embedding")
        scores = score_cosine(query.embedding, chunk_frame_embeddings(chunks, tokens, frame_embeddings))
    elif oracle == "attention":
        scores = score_attention(engine, query, high)
    elif oracle in BASELINES:
        scores = score_baseline(oracle, m, k, seed)
    elif oracle == "perfect":
        scores = score_perfect(m, query.target_chunks)
    else:
        raise ConfigurationError(f"unknown oracle '{oracle}'")
    return perturb_scores(scores, noise, seed)


def check_frame_count(chunks: Sequence[ChunkSpec], frame_embeddings: np.ndarray) -> np.ndarray:
    """Frame embeddings must hold exactly one row per frame the chunks span."""
    frame_embeddings = np.atleast_2d(np.asarray(frame_embeddings, dtype=DTYPE))
    expected = chunks[-1].frame_span[1] + 1 if chunks else 0
    if frame_embeddings.shape[0] != expected:
        raise DimensionError(
            f"{frame_embeddings.shape[0]} frame embeddings given, chunks span {expected} frames"
        )
    return frame_embeddings


def select_caches(result: CompressionResult, plan: ReloadPlan):
    low = [result.low[i] for i in plan.selected]
    high = [result.high[i] for i in plan.complement]
    return low, high


def build_uniform_context(engine: Engine, tokens: VideoTokens, chunks: Sequence[ChunkSpec], ratio: int) -> HybridContext:
    """Single-level context: every chunk at ``ratio``."""
    level = LEVEL_LOW
    caches = compress_level(engine, tokens, chunks, ratio, level)
    return merge_hybrid(caches, [])


def build_uncompressed_context(engine: Engine, tokens: VideoTokens, block: int = BASELINE_BLOCK) -> KVBlock:
    """Plain causal prefill of every token at positions 0..n-1."""
    buffer = KVBuffer(engine.config, capacity=tokens.n)
    for start in range(0, tokens.n, block):
        rows = tokens.embeddings[start: start + block]
        sequence = [TokenEmbedding(v, start + i) for i, v in enumerate(rows)]
        buffer.append(engine.prefill(sequence, buffer.view()).kvs)
    return buffer.view()


def uncompressed_hybrid(engine: Engine, tokens: VideoTokens, chunks: Sequence[ChunkSpec]) -> HybridContext:
    kv = build_uncompressed_context(engine, tokens)
    owner = np.repeat(np.arange(len(chunks)), [c.width for c in chunks])
    return HybridContext(kv, owner, np.full(len(kv), "-"))


def run_uniform(
    engine: Engine,
    tokens: VideoTokens,
    chunks: Sequence[ChunkSpec],
    ratio: int,
    task_tokens,
    max_new: int = 1,
) -> List[int]:
    """Single-level pipeline; ``ratio=1`` keeps one summary per token."""
    return decode_answer(engine, build_uniform_context(engine, tokens, chunks, ratio), task_tokens, max_new)


def run_uncompressed(engine: Engine, tokens: VideoTokens, chunks: Sequence[ChunkSpec], task_tokens, max_new: int = 1) -> List[int]:
    """The w/o-compression baseline."""
    return decode_answer(engine, uncompressed_hybrid(engine, tokens, chunks), task_tokens, max_new)


class BiLevelPipeline:
    """Prefill, offload, score, reload and decode for one video."""

    def __init__(self, engine: Engine, config: PipelineConfig, parallel_passes: bool = False):
        self.engine = engine
        self.config = config.validate()
        self.compression = CompressionConfig(
            config.alpha_low,
            config.alpha_high,
            single_level=config.alpha_low == config.alpha_high,
            parallel_passes=parallel_passes,
        )
        self.store: Optional[TieredKVStore] = None

    def partition(self, tokens: VideoTokens) -> List[ChunkSpec]:
        return partition(tokens, self.config.chunk_frames, self.config.tokens_per_frame)

    def compress(self, tokens: VideoTokens, chunks: Optional[Sequence[ChunkSpec]] = None) -> CompressionResult:
        chunks = list(chunks) if chunks is not None else self.partition(tokens)
        low, high = compress_bilevel(self.engine, tokens, chunks, self.compression)
        return CompressionResult(chunks, low, high)

    def answer(
        self,
        result: CompressionResult,
        query: TaskQuery,
        task_tokens,
        tokens: Optional[VideoTokens] = None,
        frame_embeddings: Optional[np.ndarray] = None,
    ) -> Dict:
        scores = score_chunks(
            self.config.oracle, self.engine, query, result.chunks, result.high, self.config.topk,
            seed=self.config.seed, tokens=tokens, frame_embeddings=frame_embeddings,
            noise=self.config.oracle_noise,
        )
        plan = build_plan(scores, self.config.topk)
        low, high = select_caches(result, plan)
        hybrid = merge_hybrid(low, high, self.config.keep_original_positions, plan)
        generated = decode_answer(self.engine, hybrid, task_tokens, self.config.max_new)
        return {"plan": plan, "scores": scores, "hybrid": hybrid, "tokens": generated}

    def run(self, tokens: VideoTokens, query: TaskQuery, task_tokens) -> Dict:
        """Complete cycle in memory; returns the stats dict."""
        stats = {"n": tokens.n, "chunks": 0, "l_entries": 0, "h_entries": 0,
                 "hybrid_entries": 0, "reduction_pct": 0.0, "tokens": []}

        logger.info("=" * 50)
        logger.info("Bi-level pipeline starting...")
        logger.info(f"Ratios: {self.config.alpha_low}x / {self.config.alpha_high}x, "
                    f"k={self.config.topk}, oracle={self.config.oracle}")
        logger.info("=" * 50)

        logger.info("\n--- Phase 1: Bi-level prefill ---")
        result = self.compress(tokens)
        stats["chunks"] = len(result.chunks)
        stats["l_entries"] = sum(len(c) for c in result.low)
        stats["h_entries"] = sum(len(c) for c in result.high)

        logger.info("\n--- Phase 2: Score, merge, decode ---")
        outcome = self.answer(result, query, task_tokens, tokens=tokens)
        plan = outcome["plan"]
        stats["selected"] = list(plan.selected)
        stats["hybrid_entries"] = len(outcome["hybrid"])
        stats["reduction_pct"] = predict_reduction(
            result.widths, self.config.alpha_low, self.config.alpha_high, plan.k, plan.selected
        ).reduction_pct
        stats["tokens"] = outcome["tokens"]

        self._log_summary(stats)
        return stats

    # -- cold-store backed flow ---------------------------------------------

    def prefill_to_store(
        self,
        tokens: VideoTokens,
        cache_dir: str,
        extra: Optional[Dict] = None,
        frame_embeddings: Optional[np.ndarray] = None,
    ) -> Dict:
        """Compress, offload both levels and write the manifest.

        ``frame_embeddings`` replaces the per-frame token means stored for the
        cosine oracle.
        """
        stats = {"n": tokens.n, "chunks": 0, "records": 0, "bytes": 0}
        started = time.perf_counter()

        chunks = self.partition(tokens)
        if frame_embeddings is None:
            frame_embeddings = tokens.frame_embeddings()
        frame_embeddings = check_frame_count(chunks, frame_embeddings)

        logger.info("\n--- Phase 1: Bi-level prefill ---")
        result = self.compress(tokens, chunks)
        stats["chunks"] = len(result.chunks)

        logger.info("\n--- Phase 2: Offload ---")
        self.store = TieredKVStore(cache_dir, self.engine.config)
        handles = self.store.offload(result.low + result.high)
        write_embedding_file(f"{cache_dir}/{FRAMES_FILE}", frame_embeddings)
        manifest = {
            "pipeline": self.config.to_dict(),
            "chunks": [
                {"index": c.index, "start": c.start, "width": c.width, "frame_span": list(c.frame_span)}
                for c in result.chunks
            ],
        }
        manifest.update(extra or {})
        self.store.write_manifest(manifest)

        stats["records"] = len(handles)
        stats["bytes"] = sum(h.byte_size for h in handles)
        stats["seconds"] = time.perf_counter() - started
        return stats

    @classmethod
    def from_store(cls, engine_factory, cache_dir: str, overrides: Optional[Dict] = None):
        """Reopen a prefilled cache; ``overrides`` replace stored query-time settings."""
        store, manifest = TieredKVStore.open(cache_dir)
        settings = dict(manifest["pipeline"])
        for key, value in (overrides or {}).items():
            if value is not None:
                settings[key] = value
        if settings["alpha_low"] != manifest["pipeline"]["alpha_low"] or \
                settings["alpha_high"] != manifest["pipeline"]["alpha_high"]:
            raise ConfigurationError("compression ratios are fixed at prefill time")
        pipeline = cls(engine_factory(store.engine_config), PipelineConfig(**settings))
        pipeline.store = store
        return pipeline, manifest

    def query_store(
        self,
        manifest: Dict,
        query: TaskQuery,
        task_tokens,
        frame_embeddings: Optional[np.ndarray] = None,
    ) -> Dict:
        """Score, reload the plan's caches from the cold store and decode.

        The cosine oracle scores ``frame_embeddings`` when given, else the
        frames stored at prefill time.
        """
        if self.store is None:
            raise PreconditionError("no cache store is open")
        chunks = [
            ChunkSpec(c["index"], c["start"], c["width"], tuple(c["frame_span"]))
            for c in manifest["chunks"]
        ]
        m = len(chunks)
        stats = {"chunks": m, "reload_ms": 0.0, "tokens": []}

        logger.info("\n--- Phase 3: Relevance scoring ---")
        high = []
        if self.config.oracle == "attention":
            for i in range(m):
                if not self.store.has(i, LEVEL_HIGH):
                    raise IntegrityError(f"H record for chunk {i} missing from {self.store.cache_dir}")
                high.append(self.store.cold.read(self.store.handles[(i, LEVEL_HIGH)]))
        frames = None
        if self.config.oracle == "cosine":
            if frame_embeddings is None:
                frame_embeddings = load_embedding_file(f"{self.store.cache_dir}/{FRAMES_FILE}")
            frames = check_frame_count(chunks, frame_embeddings)
        scores = score_chunks(
            self.config.oracle, self.engine, query, chunks, high, self.config.topk,
            seed=self.config.seed, frame_embeddings=frames, noise=self.config.oracle_noise,
        )
        plan = build_plan(scores, self.config.topk)
        logger.info(f"Selected chunks {list(plan.selected)} of {m}")

        logger.info("\n--- Phase 4: Reload & decode ---")
        started = time.perf_counter()
        resident = self.store.reload(plan)
        stats["reload_ms"] = 1000 * (time.perf_counter() - started)
        low = [c for c in resident if c.level == LEVEL_LOW]
        high = [c for c in resident if c.level == LEVEL_HIGH]
        hybrid = merge_hybrid(low, high, self.config.keep_original_positions, plan)
        stats["tokens"] = decode_answer(self.engine, hybrid, task_tokens, self.config.max_new)
        stats["selected"] = list(plan.selected)
        stats["hybrid_entries"] = len(hybrid)
        stats["reduction_pct"] = self.store.hot.measure_reduction([c.width for c in chunks]).reduction_pct
        return stats

    def _log_summary(self, stats: Dict):
        logger.info("\n" + "=" * 50)
        logger.info("PIPELINE COMPLETE")
        logger.info(f"  Tokens:          {stats['n']}")
        logger.info(f"  Chunks:          {stats['chunks']}")
        logger.info(f"  L entries:       {stats['l_entries']}")
        logger.info(f"  H entries:       {stats['h_entries']}")
        logger.info(f"  Hybrid entries:  {stats['hybrid_entries']}")
        logger.info(f"  Reduction:       {stats['reduction_pct']:.1f}%")
        logger.info(f"  Answer:          {stats['tokens']}")
        logger.info("=" * 50)
