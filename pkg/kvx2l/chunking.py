"""Chunk partitioning and summary-token interleaving."""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from kvx2l.engine import DTYPE, TokenEmbedding
from kvx2l.errors import ConfigurationError, PreconditionError

logger = logging.getLogger(__name__)


@dataclass
class VideoTokens:
    """Visual token sequence grouped into frames of equal token count."""

    embeddings: np.ndarray  # [n, embed_dim]
    tokens_per_frame: int = 1

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=DTYPE)
        if self.embeddings.ndim != 2:
            raise PreconditionError(f"token embeddings must be 2-D, got shape {self.embeddings.shape}")
        if self.tokens_per_frame < 1:
            raise ConfigurationError(f"tokens_per_frame must be >= 1, got {self.tokens_per_frame}")
        if self.n % self.tokens_per_frame:
            raise PreconditionError(
                f"{self.n} tokens do not divide into frames of {self.tokens_per_frame} tokens"
            )

    @property
    def n(self) -> int:
        return int(self.embeddings.shape[0])

    @property
    def n_frames(self) -> int:
        return self.n // self.tokens_per_frame

    @property
    def dim(self) -> int:
        return int(self.embeddings.shape[1])

    def frame_embeddings(self) -> np.ndarray:
        """Per-frame mean of token vectors, ``[n_frames, embed_dim]``."""
        return self.embeddings.reshape(self.n_frames, self.tokens_per_frame, self.dim).mean(axis=1)

    def chunk_tokens(self, chunk: "ChunkSpec") -> np.ndarray:
        return self.embeddings[chunk.start: chunk.start + chunk.width]


@dataclass(frozen=True)
class ChunkSpec:
    """Contiguous span of tokens compressed as a unit."""

    index: int
    start: int
    width: int
    frame_span: Tuple[int, int]  # first and last frame, inclusive

    @property
    def end(self) -> int:
        return self.start + self.width


@dataclass(frozen=True)
class SummaryLayout:
    """Where a chunk's summary tokens go for one compression ratio."""

    chunk: ChunkSpec
    ratio: int
    vst_count: int
    insert_offsets: Tuple[int, ...]  # chunk tokens preceding each summary token

    @property
    def groups(self) -> List[int]:
        """Spacing group sizes between consecutive summary tokens."""
        previous = 0
        sizes = []
        for offset in self.insert_offsets:
            sizes.append(offset - previous)
            previous = offset
        return sizes

    @property
    def interleaved_length(self) -> int:
        return self.chunk.width + self.vst_count


def summary_count(width: int, ratio: int) -> int:
    """max(1, ceil(width / ratio))."""
    return max(1, -(-width // ratio))


def _n_tokens(tokens: Union[VideoTokens, int]) -> int:
    return tokens.n if isinstance(tokens, VideoTokens) else int(tokens)


def partition(
    tokens: Union[VideoTokens, int],
    frames_per_chunk: int,
    tokens_per_frame: int = 1,
    widths: Optional[Sequence[int]] = None,
) -> List[ChunkSpec]:
    """Split the sequence into temporally ordered chunks.

    By default every chunk spans ``frames_per_chunk`` frames except possibly a
    shorter last one. ``widths`` gives explicit per-chunk token widths instead.
    """
    n = _n_tokens(tokens)
    if n < 1:
        raise PreconditionError("cannot partition an empty token sequence")
    if frames_per_chunk < 1 or tokens_per_frame < 1:
        raise ConfigurationError(
            f"frames_per_chunk and tokens_per_frame must be >= 1, got {frames_per_chunk}, {tokens_per_frame}"
        )
    if isinstance(tokens, VideoTokens) and tokens.tokens_per_frame != tokens_per_frame:
        raise PreconditionError(
            f"tokens carry {tokens.tokens_per_frame} tokens/frame but {tokens_per_frame} was requested"
        )
    if n % tokens_per_frame:
        raise PreconditionError(f"{n} tokens do not divide into frames of {tokens_per_frame}")

    if widths is None:
        step = frames_per_chunk * tokens_per_frame
        widths = [min(step, n - start) for start in range(0, n, step)]
    else:
        widths = [int(w) for w in widths]
        if any(w < 1 for w in widths) or sum(widths) != n:
            raise PreconditionError(f"chunk widths {widths} must be positive and sum to {n}")

    chunks = []
    start = 0
    for index, width in enumerate(widths):
        span = (start // tokens_per_frame, (start + width - 1) // tokens_per_frame)
        chunks.append(ChunkSpec(index=index, start=start, width=width, frame_span=span))
        start += width

    logger.debug(f"Partitioned {n} tokens into {len(chunks)} chunks")
    return chunks


def layout_summaries(chunk: ChunkSpec, ratio: int) -> SummaryLayout:
    """Uniformly place max(1, ceil(w / ratio)) summary tokens in a chunk.

    Spacing groups differ by at most one token; the shorter groups come last.
    """
    if ratio is None or int(ratio) != ratio or ratio < 1:
        raise ConfigurationError(f"compression ratio must be a positive integer, got {ratio}")
    ratio = int(ratio)
    count = summary_count(chunk.width, ratio)
    base, remainder = divmod(chunk.width, count)
    offsets = []
    position = 0
    for group in range(count):
        position += base + (1 if group < remainder else 0)
        offsets.append(position)
    return SummaryLayout(chunk=chunk, ratio=ratio, vst_count=count, insert_offsets=tuple(offsets))


def interleave(
    chunk_tokens: Union[np.ndarray, Sequence[TokenEmbedding]],
    layout: SummaryLayout,
    placeholder: np.ndarray,
    start_position: int = 0,
) -> List[TokenEmbedding]:
    """Insert summary tokens after each spacing group.

    Every output token gets ``start_position`` plus its index in the
    interleaved sequence as its position; summary tokens carry ``placeholder``.
    """
    if not isinstance(chunk_tokens, np.ndarray):
        chunk_tokens = np.stack([t.vector for t in chunk_tokens]) if chunk_tokens else np.zeros((0, 0))
    if chunk_tokens.shape[0] != layout.chunk.width:
        raise PreconditionError(
            f"layout expects {layout.chunk.width} tokens for chunk {layout.chunk.index}, got {chunk_tokens.shape[0]}"
        )

    out: List[TokenEmbedding] = []
    consumed = 0
    for offset in layout.insert_offsets:
        for row in chunk_tokens[consumed:offset]:
            out.append(TokenEmbedding(row, start_position + len(out)))
        consumed = offset
        out.append(TokenEmbedding(placeholder, start_position + len(out), is_summary=True))
    return out


def deinterleave(sequence: Sequence[TokenEmbedding]) -> np.ndarray:
    """Drop summary tokens and return the regular token vectors in order."""
    rows = [t.vector for t in sequence if not t.is_summary]
    return np.stack(rows) if rows else np.zeros((0, 0), DTYPE)
