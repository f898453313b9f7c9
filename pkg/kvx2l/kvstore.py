"""Tiered KV cache: hot in-process arena plus a cold directory of record files.

Record layout (all little-endian), one file per chunk and level:

    header     HEADER_DTYPE (magic "VX2L", format version, engine config hash, ...)
    positions  int64[entries]
    offsets    int64[entries]   raw-token index preceding each summary entry
    keys       float32[layers, entries, heads, head_dim]
    values     float32[layers, entries, heads, head_dim]

Files are written to a temporary name and renamed into place, so a reader
never observes a partial record.
"""

import hashlib
import json
import logging
import os
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from kvx2l.chunking import summary_count
from kvx2l.compressor import LEVEL_HIGH, LEVEL_LOW, LEVELS, CompressedKV
from kvx2l.engine import DTYPE, EngineConfig, KVBlock
from kvx2l.errors import CacheIOError, IntegrityError, PreconditionError

logger = logging.getLogger(__name__)

MAGIC = b"VX2L"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
LEVEL_CODES = {LEVEL_LOW: 0, LEVEL_HIGH: 1}
CODE_LEVELS = {v: k for k, v in LEVEL_CODES.items()}

HEADER_DTYPE = np.dtype([
    ("magic", "S4"),
    ("version", "<u2"),
    ("level", "u1"),
    ("reserved", "u1"),
    ("config_hash", "<u8"),
    ("chunk_index", "<u4"),
    ("ratio", "<u4"),
    ("source_width", "<u4"),
    ("entries", "<u4"),
    ("layers", "<u2"),
    ("heads", "<u2"),
    ("head_dim", "<u2"),
    ("reserved2", "<u2"),
    ("checksum", "<u8"),
])
HEADER_BYTES = HEADER_DTYPE.itemsize

HOT = "hot"
COLD = "cold"


def kv_checksum(kv: KVBlock) -> int:
    """64-bit digest of positions, keys and values in their on-disk byte order."""
    digest = hashlib.blake2b(digest_size=8)
    digest.update(np.ascontiguousarray(kv.positions, dtype="<i8").tobytes())
    digest.update(np.ascontiguousarray(kv.keys, dtype="<f4").tobytes())
    digest.update(np.ascontiguousarray(kv.values, dtype="<f4").tobytes())
    return int.from_bytes(digest.digest(), "little")


def record_name(chunk_index: int, level: str) -> str:
    return f"chunk{chunk_index:05d}_{level}.kv"


def entry_bytes(config: EngineConfig) -> int:
    """Bytes of K and V for one cache entry across all layers."""
    return config.layers * config.heads * config.head_dim * 2 * np.dtype(DTYPE).itemsize


@dataclass
class CacheHandle:
    """Where one chunk/level record lives and how to verify it."""

    chunk_index: int
    level: str
    byte_size: int  # K/V tensor bytes plus the fixed header
    location: str
    checksum: int
    entries: int = 0
    path: Optional[str] = None

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class ChunkAccounting:
    chunk_index: int
    width: int
    level: str
    entries: int


@dataclass
class ReductionReport:
    """Retained KV fraction relative to the uncompressed count n."""

    retained_fraction: float
    reduction_pct: float
    per_chunk_breakdown: List[ChunkAccounting] = field(default_factory=list)
    total_entries: int = 0
    n: int = 0


def _report(breakdown: List[ChunkAccounting], n: int) -> ReductionReport:
    total = sum(item.entries for item in breakdown)
    retained = total / n
    return ReductionReport(
        retained_fraction=retained,
        reduction_pct=100.0 * (1.0 - retained),
        per_chunk_breakdown=breakdown,
        total_entries=total,
        n=n,
    )


def worst_case_selection(widths: Sequence[int], k: int) -> List[int]:
    """The k widest chunks, ties toward the earlier chunk."""
    order = sorted(range(len(widths)), key=lambda i: (-widths[i], i))
    return sorted(order[:k])


def predict_reduction(
    widths: Sequence[int],
    alpha_low: int,
    alpha_high: int,
    k: int,
    selected: Optional[Iterable[int]] = None,
) -> ReductionReport:
    """Analytic cache-size reduction for a bi-level plan.

    Chunks in ``selected`` (or, when scores are unknown, the k widest) keep
    max(1, ceil(w / alpha_low)) entries; the rest keep max(1, ceil(w / alpha_high)).
    """
    widths = [int(w) for w in widths]
    m = len(widths)
    if m == 0:
        raise PreconditionError("predict_reduction needs at least one chunk")
    if not 0 <= k <= m:
        raise PreconditionError(f"k={k} must lie in [0, {m}]")
    chosen = set(selected) if selected is not None else set(worst_case_selection(widths, k))
    breakdown = []
    for i, width in enumerate(widths):
        level = LEVEL_LOW if i in chosen else LEVEL_HIGH
        ratio = alpha_low if level == LEVEL_LOW else alpha_high
        breakdown.append(ChunkAccounting(i, width, level, summary_count(width, ratio)))
    return _report(breakdown, sum(widths))


class HotStore:
    """Decode-visible cache, owned by a single session."""

    def __init__(self):
        self._chunks: Dict[int, CompressedKV] = {}

    def put(self, ckv: CompressedKV):
        if ckv.chunk_index in self._chunks:
            raise IntegrityError(f"chunk {ckv.chunk_index} already resident in hot store")
        self._chunks[ckv.chunk_index] = ckv

    def pop(self, chunk_index: int, level: str) -> Optional[CompressedKV]:
        current = self._chunks.get(chunk_index)
        if current is not None and current.level == level:
            return self._chunks.pop(chunk_index)
        return None

    def clear(self):
        self._chunks.clear()

    def __len__(self) -> int:
        return len(self._chunks)

    def __contains__(self, chunk_index: int) -> bool:
        return chunk_index in self._chunks

    def items(self) -> List[CompressedKV]:
        return [self._chunks[i] for i in sorted(self._chunks)]

    def levels(self) -> Dict[int, str]:
        return {i: c.level for i, c in self._chunks.items()}

    def entries(self) -> int:
        return sum(len(c) for c in self._chunks.values())

    @property
    def nbytes(self) -> int:
        return sum(c.nbytes for c in self._chunks.values())

    def measure_reduction(self, widths: Sequence[int]) -> ReductionReport:
        """Accounting of what is actually resident."""
        breakdown = [
            ChunkAccounting(c.chunk_index, c.source_width, c.level, len(c)) for c in self.items()
        ]
        return _report(breakdown, sum(int(w) for w in widths))


class ColdStore:
    """Directory of record files; safe for concurrent readers."""

    def __init__(self, directory: str, engine_config: EngineConfig):
        self.directory = Path(directory)
        self.engine_config = engine_config
        self.config_hash = engine_config.config_hash()
        self.directory.mkdir(parents=True, exist_ok=True)

    def path_for(self, chunk_index: int, level: str) -> Path:
        return self.directory / record_name(chunk_index, level)

    def write(self, ckv: CompressedKV) -> CacheHandle:
        ckv.kv.check_shape(self.engine_config)
        c = self.engine_config
        checksum = kv_checksum(ckv.kv)
        header = np.zeros(1, dtype=HEADER_DTYPE)
        header["magic"] = MAGIC
        header["version"] = FORMAT_VERSION
        header["level"] = LEVEL_CODES[ckv.level]
        header["config_hash"] = self.config_hash
        header["chunk_index"] = ckv.chunk_index
        header["ratio"] = ckv.ratio
        header["source_width"] = ckv.source_width
        header["entries"] = len(ckv)
        header["layers"] = c.layers
        header["heads"] = c.heads
        header["head_dim"] = c.head_dim
        header["checksum"] = checksum

        path = self.path_for(ckv.chunk_index, ckv.level)
        tmp = path.with_name(f"{path.name}.tmp-{os.getpid()}-{threading.get_ident()}")
        try:
            with open(tmp, "wb") as handle:
                handle.write(header.tobytes())
                handle.write(np.ascontiguousarray(ckv.kv.positions, dtype="<i8").tobytes())
                handle.write(np.ascontiguousarray(ckv.source_offsets, dtype="<i8").tobytes())
                handle.write(np.ascontiguousarray(ckv.kv.keys, dtype="<f4").tobytes())
                handle.write(np.ascontiguousarray(ckv.kv.values, dtype="<f4").tobytes())
            os.replace(tmp, path)
        except OSError as e:
            logger.error(f"Error writing {path}: {e}")
            try:
                tmp.unlink()
            except OSError:
                pass
            raise CacheIOError(f"cannot write cache record {path}: {e}", ckv.chunk_index, ckv.level)

        return CacheHandle(
            chunk_index=ckv.chunk_index,
            level=ckv.level,
            byte_size=len(ckv) * entry_bytes(c) + HEADER_BYTES,
            location=COLD,
            checksum=checksum,
            entries=len(ckv),
            path=str(path),
        )

    def read(self, handle: CacheHandle) -> CompressedKV:
        path = Path(handle.path) if handle.path else self.path_for(handle.chunk_index, handle.level)
        try:
            raw = np.memmap(path, dtype=np.uint8, mode="r")
        except (OSError, ValueError) as e:
            raise CacheIOError(f"cannot open cache record {path}: {e}", handle.chunk_index, handle.level)

        if raw.shape[0] < HEADER_BYTES:
            raise IntegrityError(f"{path}: truncated header")
        header = raw[:HEADER_BYTES].view(HEADER_DTYPE)[0]
        if bytes(header["magic"]) != MAGIC:
            raise IntegrityError(f"{path}: bad magic {bytes(header['magic'])!r}")
        if int(header["version"]) != FORMAT_VERSION:
            raise IntegrityError(f"{path}: unsupported format version {int(header['version'])}")
        if int(header["config_hash"]) != self.config_hash:
            raise IntegrityError(f"{path}: written by a different engine configuration")

        entries = int(header["entries"])
        shape = (int(header["layers"]), entries, int(header["heads"]), int(header["head_dim"]))
        n_values = int(np.prod(shape))
        offset = HEADER_BYTES
        expected_size = offset + entries * 16 + n_values * 8
        if raw.shape[0] != expected_size:
            raise IntegrityError(f"{path}: size {raw.shape[0]} != expected {expected_size}")

        def take(count: int, dtype: str) -> np.ndarray:
            nonlocal offset
            width = count * np.dtype(dtype).itemsize
            arr = np.array(raw[offset: offset + width].view(dtype))
            offset += width
            return arr

        positions = take(entries, "<i8").astype(np.int64)
        source_offsets = take(entries, "<i8").astype(np.int64)
        keys = take(n_values, "<f4").astype(DTYPE).reshape(shape)
        values = take(n_values, "<f4").astype(DTYPE).reshape(shape)
        del raw

        kv = KVBlock(keys, values, positions)
        checksum = kv_checksum(kv)
        if checksum != handle.checksum or checksum != int(header["checksum"]):
            raise IntegrityError(
                f"checksum mismatch for chunk {handle.chunk_index} ({handle.level}): "
                f"{checksum:016x} != {handle.checksum:016x}"
            )
        return CompressedKV(
            chunk_index=int(header["chunk_index"]),
            level=CODE_LEVELS[int(header["level"])],
            kv=kv,
            source_width=int(header["source_width"]),
            ratio=int(header["ratio"]),
            source_offsets=source_offsets,
        )


class TieredKVStore:
    """Offload compressed KVs to the cold store and reload them per plan."""

    def __init__(self, cache_dir: str, engine_config: EngineConfig):
        self.cache_dir = cache_dir
        self.engine_config = engine_config
        self.cold = ColdStore(cache_dir, engine_config)
        self.hot = HotStore()
        self.handles: Dict[Tuple[int, str], CacheHandle] = {}

    def offload(self, kvs: Sequence[CompressedKV]) -> List[CacheHandle]:
        """Serialise to the cold store and release any hot copies."""
        handles = []
        for ckv in kvs:
            handle = self.cold.write(ckv)
            self.handles[(ckv.chunk_index, ckv.level)] = handle
            self.hot.pop(ckv.chunk_index, ckv.level)
            handles.append(handle)
        if handles:
            logger.info(f"Offloaded {len(handles)} records ({sum(h.byte_size for h in handles)} bytes)")
        return handles

    def has(self, chunk_index: int, level: str) -> bool:
        return (chunk_index, level) in self.handles

    def reload(self, plan) -> List[CompressedKV]:
        """Make the hot store hold exactly L for ``plan.selected`` and H for ``plan.complement``."""
        wanted = [(i, LEVEL_LOW) for i in plan.selected] + [(i, LEVEL_HIGH) for i in plan.complement]
        missing = [key for key in wanted if key not in self.handles]
        if missing:
            raise IntegrityError(f"reload plan references records not in the cold store: {missing[:5]}")

        # Stage every record first; a failed read leaves the hot store untouched.
        staged = [self.cold.read(self.handles[key]) for key in sorted(wanted)]
        self.hot.clear()
        for ckv in staged:
            self.hot.put(ckv)
        resident = set(wanted)
        for key, handle in self.handles.items():
            handle.location = HOT if key in resident else COLD
        logger.debug(f"Reloaded {len(wanted)} chunks ({self.hot.entries()} entries)")
        return self.hot.items()

    def get_stats(self) -> Dict:
        """Cache statistics by level."""
        by_level = {}
        for level in LEVELS:
            handles = [h for (_, lv), h in self.handles.items() if lv == level]
            by_level[level] = {
                "records": len(handles),
                "entries": sum(h.entries for h in handles),
                "bytes": sum(h.byte_size for h in handles),
            }
        return {
            "records": len(self.handles),
            "by_level": by_level,
            "hot_entries": self.hot.entries(),
            "hot_bytes": self.hot.nbytes,
        }

    def count(self) -> int:
        return len(self.handles)

    # -- manifest ----------------------------------------------------------

    def write_manifest(self, extra: Optional[Dict] = None) -> Path:
        manifest = {
            "format_version": FORMAT_VERSION,
            "engine": self.engine_config.to_dict(),
            "handles": [h.to_dict() for _, h in sorted(self.handles.items())],
        }
        manifest.update(extra or {})
        path = Path(self.cache_dir) / MANIFEST_NAME
        tmp = path.with_name(path.name + ".tmp")
        try:
            tmp.write_text(json.dumps(manifest, indent=2))
            os.replace(tmp, path)
        except OSError as e:
            logger.error(f"Error writing manifest {path}: {e}")
            raise CacheIOError(f"cannot write manifest {path}: {e}")
        return path

    @classmethod
    def open(cls, cache_dir: str) -> Tuple["TieredKVStore", Dict]:
        """Reopen a prefilled cache directory; returns the store and its manifest."""
        path = Path(cache_dir) / MANIFEST_NAME
        try:
            manifest = json.loads(path.read_text())
        except (OSError, ValueError) as e:
            raise CacheIOError(f"cannot read manifest {path}: {e}")
        if manifest.get("format_version") != FORMAT_VERSION:
            raise IntegrityError(f"{path}: unsupported format version {manifest.get('format_version')}")
        store = cls(cache_dir, EngineConfig(**manifest["engine"]))
        for item in manifest.get("handles", []):
            handle = CacheHandle(**item)
            store.handles[(handle.chunk_index, handle.level)] = handle
        return store, manifest
