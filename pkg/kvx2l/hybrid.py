"""Reload plans, hybrid context assembly and answer decoding."""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from kvx2l.compressor import LEVEL_HIGH, LEVEL_LOW, CompressedKV
from kvx2l.engine import DTYPE, DecodeSession, Engine, KVBlock, KVPair
from kvx2l.errors import IntegrityError, PreconditionError
from kvx2l.oracle import RelevanceScores, select_topk

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReloadPlan:
    """Chunks to reload at L (``selected``) and at H (``complement``)."""

    selected: Tuple[int, ...]
    complement: Tuple[int, ...]
    k: int
    oracle_name: str = ""

    def __post_init__(self):
        selected, complement = set(self.selected), set(self.complement)
        if selected & complement:
            raise PreconditionError(f"chunks {sorted(selected & complement)} are both selected and complement")
        if list(self.selected) != sorted(selected) or list(self.complement) != sorted(complement):
            raise PreconditionError("plan indices must be sorted and unique")
        if sorted(selected | complement) != list(range(self.m)):
            raise PreconditionError(f"plan does not cover chunks 0..{self.m - 1}")
        if len(self.selected) != min(self.k, self.m):
            raise PreconditionError(f"plan selects {len(self.selected)} chunks for k={self.k}")

    @property
    def m(self) -> int:
        return len(self.selected) + len(self.complement)

    def level_of(self, chunk_index: int) -> str:
        return LEVEL_LOW if chunk_index in self.selected else LEVEL_HIGH


def build_plan(scores: RelevanceScores, k: int) -> ReloadPlan:
    selected = select_topk(scores, k)
    chosen = set(selected)
    complement = [i for i in range(len(scores)) if i not in chosen]
    return ReloadPlan(tuple(selected), tuple(complement), min(k, len(scores)), scores.oracle_name)


@dataclass
class HybridContext:
    """Temporally merged L/H summaries, one row per cache entry."""

    kv: KVBlock
    chunk_index: np.ndarray  # [entries]
    level: np.ndarray  # [entries], "L" or "H"

    @property
    def total_length(self) -> int:
        return len(self.kv)

    def __len__(self) -> int:
        return len(self.kv)

    def chunk_lengths(self) -> List[int]:
        if not len(self):
            return []
        return np.bincount(self.chunk_index).tolist()

    def chunk_levels(self) -> Dict[int, str]:
        return {int(i): str(lv) for i, lv in zip(self.chunk_index, self.level)}

    def entries(self) -> List[Tuple[KVPair, int, str]]:
        return [
            (pair, int(i), str(lv))
            for pair, i, lv in zip(self.kv.pairs(), self.chunk_index, self.level)
        ]


def merge_hybrid(
    low: Sequence[CompressedKV],
    high: Sequence[CompressedKV],
    keep_original_positions: bool = False,
    plan: Optional[ReloadPlan] = None,
) -> HybridContext:
    """Order by chunk index and re-position the merged entries.

    Positions are renumbered 0..N-1 unless ``keep_original_positions`` is
    set, in which case each entry sits at its source-token offset.
    """
    parts = [(c, LEVEL_LOW) for c in low] + [(c, LEVEL_HIGH) for c in high]
    if not parts:
        raise PreconditionError("cannot merge an empty set of chunk caches")
    for ckv, expected in parts:
        if ckv.level != expected:
            raise IntegrityError(f"chunk {ckv.chunk_index} passed as {expected} but holds {ckv.level}")
        if plan is not None and plan.level_of(ckv.chunk_index) != expected:
            raise IntegrityError(f"chunk {ckv.chunk_index} at {expected} contradicts the reload plan")

    parts.sort(key=lambda item: item[0].chunk_index)
    indices = [c.chunk_index for c, _ in parts]
    if len(set(indices)) != len(indices):
        duplicates = sorted({i for i in indices if indices.count(i) > 1})
        raise IntegrityError(f"chunks {duplicates} appear more than once")
    m = plan.m if plan is not None else indices[-1] + 1
    if indices != list(range(m)):
        missing = sorted(set(range(m)) - set(indices))
        raise IntegrityError(f"chunks {missing} missing from hybrid context")

    block = KVBlock.concat([c.kv for c, _ in parts])
    if keep_original_positions:
        positions = np.concatenate([c.source_offsets for c, _ in parts])
    else:
        positions = np.arange(len(block), dtype=np.int64)
    owner = np.repeat(np.array(indices, dtype=np.int64), [len(c) for c, _ in parts])
    levels = np.repeat(np.array([lv for _, lv in parts]), [len(c) for c, _ in parts])
    return HybridContext(block.with_positions(positions), owner, levels)


def task_vectors(engine: Engine, task_tokens: Union[np.ndarray, Sequence[int]]) -> np.ndarray:
    """Task prompt as ``[tokens, embed_dim]``; integer ids are looked up in the vocab."""
    arr = np.asarray(task_tokens)
    if arr.ndim == 1 and np.issubdtype(arr.dtype, np.integer):
        return np.stack([engine.token_vector(int(t)) for t in arr])
    arr = np.atleast_2d(arr.astype(DTYPE))
    if arr.shape[0] == 0:
        raise PreconditionError("task prompt is empty")
    return arr


def open_session(engine: Engine, hybrid: HybridContext) -> DecodeSession:
    if not len(hybrid):
        raise PreconditionError("hybrid context is empty")
    return DecodeSession(engine, hybrid.kv)


def decode_answer(
    engine: Engine,
    hybrid: HybridContext,
    task_tokens: Union[np.ndarray, Sequence[int]],
    max_new: int,
    clock: Optional[Callable[[], float]] = None,
) -> List[int]:
    """Prefill the task after the hybrid context and decode greedily."""
    if max_new < 1:
        raise PreconditionError(f"max_new must be >= 1, got {max_new}")
    session = open_session(engine, hybrid)
    logits = session.prefill(task_vectors(engine, task_tokens))
    return session.generate(logits, max_new, clock=clock)
