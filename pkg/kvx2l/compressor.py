"""Two-pass bi-level KV compression.

Each chunk is prefilled with summary tokens interleaved into it, attending to
the summary KVs of every earlier chunk from the same pass. Only the summary
entries are kept; the chunk's regular-token KVs are dropped right after the
chunk is processed.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from kvx2l.chunking import ChunkSpec, SummaryLayout, VideoTokens, interleave, layout_summaries
from kvx2l.engine import Engine, KVBlock, KVBuffer, TokenEmbedding
from kvx2l.errors import ConfigurationError, PreconditionError

logger = logging.getLogger(__name__)

LEVEL_LOW = "L"
LEVEL_HIGH = "H"
LEVELS = (LEVEL_LOW, LEVEL_HIGH)


@dataclass(frozen=True)
class CompressionConfig:
    """Low/high compression ratios for the two passes.

    ``alpha_low == alpha_high`` is only accepted with ``single_level=True``.
    """

    alpha_low: int
    alpha_high: int
    single_level: bool = False
    parallel_passes: bool = False

    def __post_init__(self):
        for name in ("alpha_low", "alpha_high"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value}")
        if self.alpha_low > self.alpha_high:
            raise ConfigurationError(
                f"alpha_low ({self.alpha_low}) must be below alpha_high ({self.alpha_high})"
            )
        if self.alpha_low == self.alpha_high and not self.single_level:
            raise ConfigurationError(
                f"alpha_low == alpha_high == {self.alpha_low} requires single_level=True"
            )

    def ratio(self, level: str) -> int:
        if level == LEVEL_LOW:
            return self.alpha_low
        if level == LEVEL_HIGH:
            return self.alpha_high
        raise ConfigurationError(f"unknown level '{level}'")


@dataclass
class CompressedKV:
    """Summary-token KVs of one chunk at one level."""

    chunk_index: int
    level: str
    kv: KVBlock
    source_width: int
    ratio: int
    # Index of the last raw token preceding each summary entry.
    source_offsets: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.level not in LEVELS:
            raise PreconditionError(f"unknown level '{self.level}'")
        if self.source_offsets is None:
            self.source_offsets = np.zeros(len(self.kv), dtype=np.int64)
        self.source_offsets = np.asarray(self.source_offsets, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.kv)

    @property
    def nbytes(self) -> int:
        return self.kv.nbytes


def _check_priors(prior_summaries: Sequence[CompressedKV], chunk_index: int, level: str):
    for expected, prior in enumerate(prior_summaries):
        if prior.level != level:
            raise PreconditionError(
                f"chunk {chunk_index} ({level}) given prior summaries of level {prior.level}"
            )
        if prior.chunk_index != expected:
            raise PreconditionError(
                f"prior summaries for chunk {chunk_index} out of order: "
                f"got chunk {prior.chunk_index} at slot {expected}"
            )
    if len(prior_summaries) != chunk_index:
        raise PreconditionError(
            f"chunk {chunk_index} needs {chunk_index} prior summaries, got {len(prior_summaries)}"
        )


def prefill_chunk(
    engine: Engine,
    interleaved: Sequence[TokenEmbedding],
    prior_summaries: Sequence[CompressedKV],
    layout: SummaryLayout,
    level: str,
    context: Optional[KVBlock] = None,
) -> CompressedKV:
    """Compression attention for one chunk; returns only its summary-token KVs.

    ``context`` may carry the already concatenated prior summaries; it must
    hold exactly their entries.
    """
    chunk = layout.chunk
    _check_priors(prior_summaries, chunk.index, level)
    if len(interleaved) != layout.interleaved_length:
        raise PreconditionError(
            f"chunk {chunk.index}: expected {layout.interleaved_length} interleaved tokens, got {len(interleaved)}"
        )

    expected = sum(len(p) for p in prior_summaries)
    if context is None:
        context = KVBlock.concat([p.kv for p in prior_summaries], engine.config)
    elif len(context) != expected:
        raise PreconditionError(
            f"chunk {chunk.index}: context holds {len(context)} entries, prior summaries hold {expected}"
        )

    result = engine.prefill(interleaved, context)
    summary_idx = [i for i, t in enumerate(interleaved) if t.is_summary]
    if len(summary_idx) != layout.vst_count:
        raise PreconditionError(
            f"chunk {chunk.index}: found {len(summary_idx)} summary tokens, layout has {layout.vst_count}"
        )
    kept = result.kvs.take(summary_idx).copy()
    offsets = chunk.start + np.asarray(layout.insert_offsets, dtype=np.int64) - 1
    return CompressedKV(
        chunk_index=chunk.index,
        level=level,
        kv=kept,
        source_width=chunk.width,
        ratio=layout.ratio,
        source_offsets=offsets,
    )


def compress_level(
    engine: Engine,
    tokens: VideoTokens,
    chunks: Sequence[ChunkSpec],
    ratio: int,
    level: str,
) -> List[CompressedKV]:
    """One compression pass over every chunk, strictly in temporal order."""
    outputs: List[CompressedKV] = []
    context = KVBuffer(engine.config, capacity=sum(layout_summaries(c, ratio).vst_count for c in chunks))
    start_position = 0
    for chunk in chunks:
        layout = layout_summaries(chunk, ratio)
        sequence = interleave(tokens.chunk_tokens(chunk), layout, engine.placeholder, start_position)
        compressed = prefill_chunk(engine, sequence, outputs, layout, level, context=context.view())
        context.append(compressed.kv)
        outputs.append(compressed)
        start_position += layout.interleaved_length
    return outputs


def compress_bilevel(
    engine: Engine,
    tokens: VideoTokens,
    chunks: Sequence[ChunkSpec],
    config: CompressionConfig,
    order: Sequence[str] = (LEVEL_LOW, LEVEL_HIGH),
) -> Tuple[List[CompressedKV], List[CompressedKV]]:
    """Run the L and H passes independently; returns (L, H)."""
    if sorted(order) != sorted(LEVELS):
        raise PreconditionError(f"pass order must name L and H once each, got {order}")

    def run(level: str) -> List[CompressedKV]:
        started = time.perf_counter()
        outputs = compress_level(engine, tokens, chunks, config.ratio(level), level)
        entries = sum(len(c) for c in outputs)
        logger.info(
            f"{level} pass: {len(outputs)} chunks -> {entries} entries "
            f"(ratio {config.ratio(level)}x, {time.perf_counter() - started:.2f}s)"
        )
        return outputs

    results: Dict[str, List[CompressedKV]] = {}
    if config.parallel_passes:
        with ThreadPoolExecutor(max_workers=2) as pool:
            futures = {level: pool.submit(run, level) for level in order}
            for level, future in futures.items():
                results[level] = future.result()
    else:
        for level in order:
            results[level] = run(level)
    return results[LEVEL_LOW], results[LEVEL_HIGH]
