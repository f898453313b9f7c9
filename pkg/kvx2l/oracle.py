"""Chunk relevance scoring and top-k selection."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from kvx2l.chunking import ChunkSpec, VideoTokens
from kvx2l.compressor import LEVEL_HIGH, CompressedKV
from kvx2l.engine import DTYPE, Engine, KVBlock, TokenEmbedding
from kvx2l.errors import CacheIOError, DimensionError, IntegrityError, PreconditionError

logger = logging.getLogger(__name__)

BASELINES = ("random", "lastn", "uniform")

EMBEDDING_MAGIC = b"VXEM"
EMBEDDING_HEADER = np.dtype([("magic", "S4"), ("dim", "<u4"), ("count", "<u4")])


@dataclass
class TaskQuery:
    """A task in whichever representations the oracles need."""

    text_tokens: Optional[np.ndarray] = None  # [tokens, embed_dim]
    embedding: Optional[np.ndarray] = None  # [embed_dim]
    prompt: str = ""
    # Ground-truth chunks, known only for synthetic tasks.
    target_chunks: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.text_tokens is not None:
            self.text_tokens = np.atleast_2d(np.asarray(self.text_tokens, dtype=DTYPE))
        if self.embedding is not None:
            self.embedding = np.asarray(self.embedding, dtype=DTYPE)
        if self.text_tokens is None and self.embedding is None and not self.prompt:
            raise PreconditionError("a task query needs text tokens, an embedding or a prompt")
        self.target_chunks = tuple(int(i) for i in self.target_chunks)

    def token_vectors(self) -> np.ndarray:
        if self.text_tokens is not None:
            return self.text_tokens
        if self.embedding is not None:
            return self.embedding[None, :]
        raise PreconditionError("task query has no vector representation")


@dataclass
class RelevanceScores:
    """Per-chunk relevance, one finite score per chunk."""

    scores: np.ndarray
    oracle_name: str

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.scores)):
            raise PreconditionError(f"{self.oracle_name} produced non-finite scores")

    def __len__(self) -> int:
        return int(self.scores.shape[0])


def _cosine(query: np.ndarray, frames: np.ndarray) -> np.ndarray:
    qn = np.linalg.norm(query)
    fn = np.linalg.norm(frames, axis=1)
    denom = qn * fn
    dots = frames.astype(np.float64) @ query.astype(np.float64)
    # Zero-norm vectors score 0.
    return np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)


def score_cosine(query_embedding: np.ndarray, chunk_frame_embeddings: Sequence[np.ndarray]) -> RelevanceScores:
    """Mean over each chunk's frames of cosine(query, frame)."""
    query = np.asarray(query_embedding, dtype=np.float64).reshape(-1)
    scores = []
    for i, frames in enumerate(chunk_frame_embeddings):
        frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
        if frames.shape[1] != query.shape[0]:
            raise DimensionError(
                f"chunk {i} frame width {frames.shape[1]} != query width {query.shape[0]}"
            )
        scores.append(float(_cosine(query, frames).mean()) if frames.shape[0] else 0.0)
    return RelevanceScores(np.array(scores), "cosine")


def chunk_frame_embeddings(
    chunks: Sequence[ChunkSpec],
    tokens: Optional[VideoTokens] = None,
    frame_embeddings: Optional[np.ndarray] = None,
) -> List[np.ndarray]:
    """Frame embeddings grouped by chunk; falls back to per-frame token means."""
    if frame_embeddings is None:
        if tokens is None:
            raise PreconditionError("need either tokens or frame embeddings")
        frame_embeddings = tokens.frame_embeddings()
    frame_embeddings = np.asarray(frame_embeddings, dtype=DTYPE)
    last = chunks[-1].frame_span[1] if chunks else -1
    if last >= frame_embeddings.shape[0]:
        raise DimensionError(
            f"chunks cover {last + 1} frames but only {frame_embeddings.shape[0]} embeddings given"
        )
    return [frame_embeddings[c.frame_span[0]: c.frame_span[1] + 1] for c in chunks]


def score_attention(engine: Engine, task_query: TaskQuery, high: Sequence[CompressedKV]) -> RelevanceScores:
    """Final-layer attention mass of the task tokens on each chunk's H summaries.

    H entries are laid out in chunk order at positions 0..N-1 and the task
    tokens follow them. Weights are summed over heads and task tokens and the
    per-chunk totals normalised to sum to 1.
    """
    if not high:
        raise IntegrityError("attention oracle needs H summaries for every chunk")
    ordered = sorted(high, key=lambda c: c.chunk_index)
    indices = [c.chunk_index for c in ordered]
    if indices != list(range(len(ordered))):
        raise IntegrityError(f"attention oracle needs H summaries for chunks 0..{len(ordered) - 1}, got {indices}")
    if any(c.level != LEVEL_HIGH for c in ordered):
        raise IntegrityError("attention oracle scores H summaries only")

    context = KVBlock.concat([c.kv for c in ordered], engine.config)
    context = context.with_positions(np.arange(len(context)))
    vectors = task_query.token_vectors()
    tokens = [TokenEmbedding(v, len(context) + i) for i, v in enumerate(vectors)]
    result = engine.prefill(tokens, context, return_attention=True)

    # [tokens, heads, context + tokens] -> mass on each context entry
    mass = result.attention[:, :, : len(context)].sum(axis=(0, 1), dtype=np.float64)
    owner = np.repeat(np.arange(len(ordered)), [len(c) for c in ordered])
    per_chunk = np.bincount(owner, weights=mass, minlength=len(ordered))
    total = per_chunk.sum()
    if total <= 0:
        per_chunk = np.full(len(ordered), 1.0 / len(ordered))
    else:
        per_chunk = per_chunk / total
    return RelevanceScores(per_chunk, "attention")


def score_baseline(kind: str, m: int, k: int, seed: int = 0) -> RelevanceScores:
    """Scores that induce the random, last-N or uniform-stride selection."""
    if m < 1:
        raise PreconditionError(f"need at least one chunk, got m={m}")
    if kind == "random":
        rng = np.random.default_rng(seed)
        scores = rng.permutation(m).astype(np.float64)
    elif kind == "lastn":
        scores = np.arange(m, dtype=np.float64)
    elif kind == "uniform":
        scores = np.zeros(m)
        k = min(max(k, 0), m)
        if k:
            stride = max(1, m // k)
            scores[np.arange(k) * stride] = 1.0
    else:
        raise PreconditionError(f"unknown baseline '{kind}', expected one of {BASELINES}")
    return RelevanceScores(scores, kind)


def score_perfect(m: int, target_chunks: Sequence[int]) -> RelevanceScores:
    """Ground-truth oracle: 1 on the target chunks, 0 elsewhere."""
    if not target_chunks:
        raise PreconditionError("perfect oracle needs the ground-truth chunks")
    scores = np.zeros(m)
    for i in target_chunks:
        if not 0 <= i < m:
            raise PreconditionError(f"target chunk {i} outside 0..{m - 1}")
        scores[i] = 1.0
    return RelevanceScores(scores, "perfect")


def perturb_scores(scores: RelevanceScores, noise: float, seed: int = 0) -> RelevanceScores:
    """Add Gaussian noise scaled by ``noise`` times the score spread."""
    if noise <= 0:
        return scores
    rng = np.random.default_rng(seed)
    spread = float(scores.scores.std()) or 1.0
    noisy = scores.scores + noise * spread * rng.standard_normal(len(scores))
    return RelevanceScores(noisy, f"{scores.oracle_name}+noise")


def select_topk(scores: RelevanceScores, k: int) -> List[int]:
    """Indices of the k highest scores, ties toward the earlier chunk, sorted."""
    m = len(scores)
    if k < 0:
        raise PreconditionError(f"k must be >= 0, got {k}")
    if k > m:
        logger.warning(f"k={k} exceeds chunk count {m}; clamping to {m}")
        k = m
    order = sorted(range(m), key=lambda i: (-scores.scores[i], i))
    return sorted(order[:k])


def write_embedding_file(path: str, frames: np.ndarray) -> Path:
    """One float32 vector per frame after a (magic, dim, count) header."""
    frames = np.atleast_2d(np.asarray(frames, dtype="<f4"))
    header = np.zeros(1, dtype=EMBEDDING_HEADER)
    header["magic"] = EMBEDDING_MAGIC
    header["count"], header["dim"] = frames.shape
    path = Path(path)
    try:
        with open(path, "wb") as handle:
            handle.write(header.tobytes())
            handle.write(np.ascontiguousarray(frames).tobytes())
    except OSError as e:
        logger.error(f"Error writing {path}: {e}")
        raise CacheIOError(f"cannot write embedding file {path}: {e}")
    return path


def load_embedding_file(path: str) -> np.ndarray:
    """Read frame embeddings written by write_embedding_file, ``[count, dim]``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CacheIOError(f"cannot read embedding file {path}: {e}")
    if len(raw) < EMBEDDING_HEADER.itemsize:
        raise IntegrityError(f"{path}: truncated embedding header")
    header = np.frombuffer(raw[: EMBEDDING_HEADER.itemsize], dtype=EMBEDDING_HEADER)[0]
    if bytes(header["magic"]) != EMBEDDING_MAGIC:
        raise IntegrityError(f"{path}: not an embedding file")
    dim, count = int(header["dim"]), int(header["count"])
    payload = raw[EMBEDDING_HEADER.itemsize:]
    if len(payload) != dim * count * 4:
        raise IntegrityError(f"{path}: expected {count}x{dim} floats, got {len(payload)} bytes")
    return np.frombuffer(payload, dtype="<f4").reshape(count, dim).astype(DTYPE)
