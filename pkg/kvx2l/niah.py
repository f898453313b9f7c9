"""Synthetic needle-in-a-haystack generation and evaluation.

A haystack is Gaussian noise with per-entry variance noise_scale^2 / embed_dim,
so each noise token has norm close to ``noise_scale``. The needle is one vocab
embedding (unit norm) added to every token of one full-width chunk. The task
prompt is a single zero vector; the answer is correct when the first decoded
token is the needle's vocab id.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from kvx2l.chunking import ChunkSpec, VideoTokens, partition
from kvx2l.compressor import LEVEL_HIGH, LEVEL_LOW, CompressedKV, compress_level
from kvx2l.engine import DTYPE, Engine
from kvx2l.errors import ConfigurationError, PreconditionError
from kvx2l.hybrid import build_plan, decode_answer, merge_hybrid
from kvx2l.pipeline import score_chunks
from kvx2l.oracle import TaskQuery

logger = logging.getLogger(__name__)

DEFAULT_LENGTHS = (128, 512, 2048, 8192)
DEFAULT_DEPTHS = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass
class NiahInstance:
    n_chunks: int
    needle_chunk_index: int
    needle_id: int
    tokens: VideoTokens
    query: TaskQuery
    seed: int
    noise_scale: float
    chunks: List[ChunkSpec] = field(default_factory=list)


@dataclass(frozen=True)
class NiahSetting:
    """One pipeline configuration evaluated on every instance."""

    label: str
    alpha_low: int
    alpha_high: int
    k: int
    oracle: str = "cosine"
    oracle_noise: float = 0.0


@dataclass
class NiahMatrix:
    """Accuracy per (depth, length) cell."""

    label: str
    lengths: List[int]
    depths: List[float]
    accuracy: np.ndarray  # [depths, lengths]
    trials: int

    def mean(self) -> float:
        return float(self.accuracy.mean()) if self.accuracy.size else 0.0


def default_settings(alpha_low: int = 2, alpha_high: int = 32, k: int = 1, oracle: str = "cosine") -> List[NiahSetting]:
    """The hybrid at k and the single-level alpha_high baseline (k=0)."""
    return [
        NiahSetting(f"hybrid-k{k}", alpha_low, alpha_high, k, oracle),
        NiahSetting(f"uniform-{alpha_high}x", alpha_low, alpha_high, 0, oracle),
    ]


def needle_chunk_for(depth: float, n_chunks: int) -> int:
    if not 0.0 <= depth <= 1.0:
        raise ConfigurationError(f"needle depth must lie in [0, 1], got {depth}")
    return int(round(depth * (n_chunks - 1)))


def gen_niah(
    engine: Engine,
    context_tokens: int,
    depth: float,
    seed: int,
    noise_scale: float = 0.5,
    tokens_per_frame: int = 4,
    chunk_frames: int = 10,
) -> NiahInstance:
    """Deterministic haystack with one needle chunk."""
    if context_tokens < tokens_per_frame or context_tokens % tokens_per_frame:
        raise ConfigurationError(
            f"context of {context_tokens} tokens must be a positive multiple of {tokens_per_frame}"
        )
    if noise_scale < 0:
        raise ConfigurationError(f"noise_scale must be >= 0, got {noise_scale}")

    dim = engine.config.embed_dim
    rng = np.random.default_rng(seed)
    needle_id = int(rng.integers(engine.config.vocab))
    embeddings = rng.standard_normal((context_tokens, dim)) * (noise_scale / np.sqrt(dim))

    chunks = partition(context_tokens, chunk_frames, tokens_per_frame)
    # Depth spans the full-width chunks only; a short tail chunk never holds the needle.
    full_width = chunk_frames * tokens_per_frame
    candidates = sum(1 for c in chunks if c.width == full_width) or len(chunks)
    needle_chunk = needle_chunk_for(depth, candidates)
    target = chunks[needle_chunk]
    needle = engine.token_vector(needle_id)
    embeddings[target.start: target.end] += needle

    tokens = VideoTokens(embeddings.astype(DTYPE), tokens_per_frame)
    query = TaskQuery(
        text_tokens=np.zeros((1, dim), DTYPE),
        embedding=needle.copy(),
        prompt="which item was planted in the haystack?",
        target_chunks=(needle_chunk,),
    )
    return NiahInstance(
        n_chunks=len(chunks),
        needle_chunk_index=needle_chunk,
        needle_id=needle_id,
        tokens=tokens,
        query=query,
        seed=seed,
        noise_scale=noise_scale,
        chunks=chunks,
    )


def trial_seed(master: int, length_index: int, depth_index: int, trial: int) -> int:
    """Per-trial seed independent of execution order."""
    sequence = np.random.SeedSequence([master, length_index, depth_index, trial])
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def run_instance(engine: Engine, instance: NiahInstance, settings: Sequence[NiahSetting]) -> Dict[str, bool]:
    """Compress once per ratio and answer every setting from the shared caches."""
    passes: Dict[Tuple[int, str], List[CompressedKV]] = {}

    def caches(ratio: int, level: str) -> List[CompressedKV]:
        key = (ratio, level)
        if key not in passes:
            passes[key] = compress_level(engine, instance.tokens, instance.chunks, ratio, level)
        return passes[key]

    outcome = {}
    for setting in settings:
        high = caches(setting.alpha_high, LEVEL_HIGH)
        scores = score_chunks(
            setting.oracle, engine, instance.query, instance.chunks, high, setting.k,
            seed=instance.seed, tokens=instance.tokens, noise=setting.oracle_noise,
        )
        plan = build_plan(scores, setting.k)
        low = caches(setting.alpha_low, LEVEL_LOW) if plan.selected else []
        hybrid = merge_hybrid(
            [low[i] for i in plan.selected], [high[i] for i in plan.complement], plan=plan
        )
        answer = decode_answer(engine, hybrid, instance.query.text_tokens, max_new=1)
        outcome[setting.label] = answer[0] == instance.needle_id
    return outcome


def eval_niah(
    engine: Engine,
    lengths: Sequence[int] = DEFAULT_LENGTHS,
    depths: Sequence[float] = DEFAULT_DEPTHS,
    trials: int = 100,
    settings: Optional[Sequence[NiahSetting]] = None,
    noise_scale: float = 0.5,
    seed: int = 0,
    tokens_per_frame: int = 4,
    chunk_frames: int = 10,
    workers: int = 1,
) -> Dict[str, NiahMatrix]:
    """Accuracy matrices keyed by setting label."""
    lengths, depths = list(lengths), list(depths)
    if not lengths or not depths:
        raise PreconditionError("NIAH grid needs at least one length and one depth")
    if trials < 0:
        raise ConfigurationError(f"trials must be >= 0, got {trials}")
    settings = list(settings) if settings is not None else default_settings()

    if trials == 0:
        logger.info("No NIAH trials requested")
        return {s.label: NiahMatrix(s.label, [], [], np.zeros((0, 0)), 0) for s in settings}

    cells = [(li, di) for li in range(len(lengths)) for di in range(len(depths))]

    def run_cell(cell: Tuple[int, int]) -> Dict[str, int]:
        li, di = cell
        hits = {s.label: 0 for s in settings}
        for trial in range(trials):
            instance = gen_niah(
                engine, lengths[li], depths[di], trial_seed(seed, li, di, trial),
                noise_scale, tokens_per_frame, chunk_frames,
            )
            for label, correct in run_instance(engine, instance, settings).items():
                hits[label] += int(correct)
        logger.info(f"NIAH length={lengths[li]} depth={depths[di]:.2f}: {hits}")
        return hits

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_cell, cells))
    else:
        results = [run_cell(cell) for cell in cells]

    matrices = {}
    for setting in settings:
        accuracy = np.zeros((len(depths), len(lengths)))
        for (li, di), hits in zip(cells, results):
            accuracy[di, li] = hits[setting.label] / trials
        matrices[setting.label] = NiahMatrix(setting.label, lengths, depths, accuracy, trials)
    return matrices
