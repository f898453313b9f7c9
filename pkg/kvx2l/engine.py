"""Minimal deterministic decoder-only transformer.

Two weight constructions are supported:

- ``seeded-random``: every weight drawn from ``np.random.default_rng(seed)``;
  pre-norm blocks with residual attention and a GELU MLP.
- ``averaging``: query/key projections are zero (uniform softmax), value and
  output projections are the identity, and blocks have no residual or MLP, so
  each layer's output is exactly the mean of the visible value vectors.

Keys are stored un-rotated next to their integer positions. Rotary position
encoding is applied at attention time, so a cached entry can be re-positioned
without touching its content vectors.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from kvx2l.errors import ConfigurationError, DimensionError, PreconditionError

logger = logging.getLogger(__name__)

DTYPE = np.float32
MODES = ("seeded-random", "averaging")
RMS_EPS = 1e-6
# Positions covered by the precomputed rotary table; larger ones are computed on demand.
ROTARY_TABLE_SIZE = 65536


@dataclass(frozen=True)
class EngineConfig:
    """Shape and construction of the toy backbone."""

    layers: int = 2
    heads: int = 4
    head_dim: int = 32
    embed_dim: Optional[int] = None
    vocab: int = 64
    seed: int = 0
    mode: str = "averaging"
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.embed_dim is None:
            object.__setattr__(self, "embed_dim", self.heads * self.head_dim)
        for name in ("layers", "heads", "head_dim", "embed_dim", "vocab"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.embed_dim != self.heads * self.head_dim:
            raise ConfigurationError(
                f"embed_dim ({self.embed_dim}) must equal heads x head_dim ({self.heads} x {self.head_dim})"
            )
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown engine mode '{self.mode}', expected one of {MODES}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigurationError(f"seed must fit in 64 bits, got {self.seed}")

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> int:
        """64-bit hash identifying this configuration in cache files."""
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


@dataclass
class TokenEmbedding:
    """One input vector at an integer position."""

    vector: np.ndarray
    position: int
    is_summary: bool = False

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=DTYPE)
        if self.vector.ndim != 1:
            raise DimensionError(f"token vector must be 1-D, got shape {self.vector.shape}")
        if not np.all(np.isfinite(self.vector)):
            raise PreconditionError(f"token at position {self.position} has non-finite entries")
        if self.position < 0:
            raise PreconditionError(f"token position must be >= 0, got {self.position}")


@dataclass
class KVPair:
    """Keys and values of one position across all layers and heads."""

    key: np.ndarray  # [layers, heads, head_dim]
    value: np.ndarray
    position: int


@dataclass
class KVBlock:
    """A run of cache entries stored as dense arrays.

    keys/values are ``[layers, entries, heads, head_dim]`` float32, positions
    is ``[entries]`` int64. Keys are never rotated in storage.
    """

    keys: np.ndarray
    values: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64)
        if self.keys.shape != self.values.shape:
            raise DimensionError(f"key shape {self.keys.shape} != value shape {self.values.shape}")
        if self.keys.ndim != 4 or self.keys.shape[1] != self.positions.shape[0]:
            raise DimensionError(
                f"expected keys [layers, {self.positions.shape[0]}, heads, head_dim], got {self.keys.shape}"
            )

    def __len__(self) -> int:
        return int(self.positions.shape[0])

    @classmethod
    def empty(cls, config: EngineConfig) -> "KVBlock":
        shape = (config.layers, 0, config.heads, config.head_dim)
        return cls(np.zeros(shape, DTYPE), np.zeros(shape, DTYPE), np.zeros(0, np.int64))

    @classmethod
    def concat(cls, blocks: Sequence["KVBlock"], config: Optional[EngineConfig] = None) -> "KVBlock":
        blocks = [b for b in blocks if b is not None]
        if not blocks:
            if config is None:
                raise PreconditionError("cannot concatenate zero blocks without an engine config")
            return cls.empty(config)
        return cls(
            np.concatenate([b.keys for b in blocks], axis=1),
            np.concatenate([b.values for b in blocks], axis=1),
            np.concatenate([b.positions for b in blocks]),
        )

    def pairs(self) -> List[KVPair]:
        return [
            KVPair(self.keys[:, i], self.values[:, i], int(self.positions[i]))
            for i in range(len(self))
        ]

    def take(self, indices: Union[Sequence[int], np.ndarray]) -> "KVBlock":
        idx = np.asarray(indices, dtype=np.int64)
        return KVBlock(self.keys[:, idx], self.values[:, idx], self.positions[idx])

    def with_positions(self, positions: Union[Sequence[int], np.ndarray]) -> "KVBlock":
        """Same content vectors at new positions."""
        positions = np.asarray(positions, dtype=np.int64)
        if positions.shape != self.positions.shape:
            raise DimensionError(f"need {len(self)} positions, got {positions.shape[0]}")
        return KVBlock(self.keys, self.values, positions)

    def check_shape(self, config: EngineConfig):
        expected = (config.layers, len(self), config.heads, config.head_dim)
        if self.keys.shape != expected:
            raise DimensionError(f"KV shape {self.keys.shape} does not match engine {expected}")

    @property
    def nbytes(self) -> int:
        """Bytes held by keys and values (positions excluded)."""
        return int(self.keys.nbytes + self.values.nbytes)

    def copy(self) -> "KVBlock":
        return KVBlock(self.keys.copy(), self.values.copy(), self.positions.copy())


class KVBuffer:
    """Growable, session-owned KV storage with amortised appends."""

    def __init__(self, config: EngineConfig, capacity: int = 64):
        self.config = config
        self._length = 0
        self._alloc(max(1, capacity))

    def _alloc(self, capacity: int):
        shape = (self.config.layers, capacity, self.config.heads, self.config.head_dim)
        keys = np.zeros(shape, DTYPE)
        values = np.zeros(shape, DTYPE)
        positions = np.zeros(capacity, np.int64)
        if getattr(self, "_keys", None) is not None:
            keys[:, : self._length] = self._keys[:, : self._length]
            values[:, : self._length] = self._values[:, : self._length]
            positions[: self._length] = self._positions[: self._length]
        self._keys, self._values, self._positions = keys, values, positions

    def __len__(self) -> int:
        return self._length

    def append(self, block: KVBlock):
        n = len(block)
        if n == 0:
            return
        block.check_shape(self.config)
        if self._length + n > self._positions.shape[0]:
            self._alloc(max(2 * self._positions.shape[0], self._length + n))
        end = self._length + n
        self._keys[:, self._length:end] = block.keys
        self._values[:, self._length:end] = block.values
        self._positions[self._length:end] = block.positions
        self._length = end

    def view(self) -> KVBlock:
        """Current contents without copying."""
        n = self._length
        return KVBlock(self._keys[:, :n], self._values[:, :n], self._positions[:n])

    def next_position(self) -> int:
        return int(self._positions[self._length - 1]) + 1 if self._length else 0


class PrefillResult(NamedTuple):
    kvs: KVBlock
    hidden: np.ndarray  # [tokens, embed_dim]
    attention: Optional[np.ndarray] = None  # final layer [tokens, heads, context+tokens]


def rms_norm(x: np.ndarray) -> np.ndarray:
    """RMS-normalise the last axis; a zero vector stays zero."""
    scale = np.sqrt(np.mean(np.square(x, dtype=DTYPE), axis=-1, keepdims=True) + DTYPE(RMS_EPS))
    return (x / scale).astype(DTYPE, copy=False)


def gelu(x: np.ndarray) -> np.ndarray:
    return (0.5 * x * (1.0 + np.tanh(0.7978845608 * (x + 0.044715 * x ** 3)))).astype(DTYPE, copy=False)


class RotaryTable:
    """Cos/sin lookup for rotary encoding of interleaved channel pairs."""

    def __init__(self, head_dim: int, base: float, size: int = ROTARY_TABLE_SIZE):
        self.half = head_dim // 2
        self.inv_freq = base ** (-(np.arange(self.half, dtype=np.float64) * 2) / head_dim)
        angles = np.arange(size, dtype=np.float64)[:, None] * self.inv_freq[None, :]
        self.size = size
        self.cos = np.cos(angles).astype(DTYPE)
        self.sin = np.sin(angles).astype(DTYPE)
        self.cos.setflags(write=False)
        self.sin.setflags(write=False)

    def lookup(self, positions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        positions = np.asarray(positions, dtype=np.int64)
        if positions.size and positions.max() >= self.size:
            angles = positions.astype(np.float64)[:, None] * self.inv_freq[None, :]
            return np.cos(angles).astype(DTYPE), np.sin(angles).astype(DTYPE)
        return self.cos[positions], self.sin[positions]

    def rotate(self, x: np.ndarray, positions: np.ndarray) -> np.ndarray:
        """Rotate ``x`` of shape [tokens, heads, head_dim]; an odd last channel is left as is."""
        if self.half == 0:
            return x
        cos, sin = self.lookup(positions)
        cos = cos[:, None, :]
        sin = sin[:, None, :]
        even = x[..., 0: 2 * self.half: 2]
        odd = x[..., 1: 2 * self.half: 2]
        out = x.copy()
        out[..., 0: 2 * self.half: 2] = even * cos - odd * sin
        out[..., 1: 2 * self.half: 2] = even * sin + odd * cos
        return out


def attend(
    queries: np.ndarray,
    query_positions: np.ndarray,
    keys: np.ndarray,
    key_positions: np.ndarray,
    values: np.ndarray,
    mask: Union[str, np.ndarray] = "causal",
    rotary: Optional[RotaryTable] = None,
    return_weights: bool = False,
):
    """Multi-head softmax(QK^T / sqrt(d)) V over one layer.

    queries are ``[T, heads, head_dim]``, keys/values ``[S, heads, head_dim]``.
    ``mask="causal"`` lets a query see every key whose position is <= its own;
    ``"full"`` sees everything; a boolean ``[T, S]`` array is used as given.
    """
    queries = np.asarray(queries, DTYPE)
    keys = np.asarray(keys, DTYPE)
    values = np.asarray(values, DTYPE)
    query_positions = np.asarray(query_positions, np.int64)
    key_positions = np.asarray(key_positions, np.int64)

    if keys.shape[0] == 0:
        raise PreconditionError("attention needs at least one key/value entry")
    if keys.shape != values.shape:
        raise DimensionError(f"keys {keys.shape} and values {values.shape} are not aligned")
    if queries.ndim != 3 or keys.ndim != 3 or queries.shape[1:] != keys.shape[1:]:
        raise DimensionError(f"query shape {queries.shape} incompatible with key shape {keys.shape}")
    if key_positions.shape[0] != keys.shape[0] or query_positions.shape[0] != queries.shape[0]:
        raise DimensionError("position arrays must have one entry per query/key")
    if key_positions.size > 1 and np.any(np.diff(key_positions) < 0):
        raise PreconditionError("key positions must be nondecreasing")

    if rotary is not None:
        q = rotary.rotate(queries, query_positions)
        k = rotary.rotate(keys, key_positions)
    else:
        q, k = queries, keys

    head_dim = queries.shape[-1]
    # [heads, T, S]
    scores = np.matmul(q.transpose(1, 0, 2), k.transpose(1, 2, 0)) * DTYPE(1.0 / np.sqrt(head_dim))

    if isinstance(mask, str):
        if mask == "causal":
            visible = key_positions[None, :] <= query_positions[:, None]
        elif mask == "full":
            visible = None
        else:
            raise PreconditionError(f"unknown mask '{mask}'")
    else:
        visible = np.asarray(mask, dtype=bool)
        if visible.shape != (queries.shape[0], keys.shape[0]):
            raise DimensionError(f"mask shape {visible.shape} != {(queries.shape[0], keys.shape[0])}")

    if visible is not None:
        if not np.all(visible.any(axis=1)):
            raise PreconditionError("a query has no visible keys under the mask")
        scores = np.where(visible[None, :, :], scores, DTYPE(-np.inf))

    scores = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores, dtype=DTYPE)
    weights /= weights.sum(axis=-1, keepdims=True)
    out = np.matmul(weights, values.transpose(1, 0, 2)).transpose(1, 0, 2)
    out = np.ascontiguousarray(out, dtype=DTYPE)
    if return_weights:
        return out, weights
    return out


class Engine:
    """Immutable weights plus the forward passes that use them.

    An Engine may be shared between threads; all mutable decode state lives
    in DecodeSession.
    """

    def __init__(self, config: EngineConfig):
        self.config = config
        self.averaging = config.mode == "averaging"
        self.rotary = RotaryTable(config.head_dim, config.rope_base)
        self._build_weights()
        for arr in self._weight_arrays():
            arr.setflags(write=False)
        logger.debug(f"Engine ready: {config.mode}, checksum={self.checksum():016x}")

    def _build_weights(self):
        c = self.config
        e = c.embed_dim
        rng = np.random.default_rng(int(c.seed))

        # Drawn first so both modes share the vocabulary for a given seed.
        table = rng.standard_normal((c.vocab, e))
        table /= np.linalg.norm(table, axis=1, keepdims=True)
        self.embedding = table.astype(DTYPE)

        if self.averaging:
            zeros = np.zeros((e, e), DTYPE)
            eye = np.eye(e, dtype=DTYPE)
            self.wq = [zeros.copy() for _ in range(c.layers)]
            self.wk = [zeros.copy() for _ in range(c.layers)]
            self.wv = [eye.copy() for _ in range(c.layers)]
            self.wo = [eye.copy() for _ in range(c.layers)]
            self.w_up = []
            self.w_down = []
            # Summary tokens carry no value mass of their own.
            self.placeholder = np.zeros(e, DTYPE)
            return

        def proj(rows, cols):
            return (rng.standard_normal((rows, cols)) / np.sqrt(rows)).astype(DTYPE)

        self.wq = [proj(e, e) for _ in range(c.layers)]
        self.wk = [proj(e, e) for _ in range(c.layers)]
        self.wv = [proj(e, e) for _ in range(c.layers)]
        self.wo = [proj(e, e) for _ in range(c.layers)]
        self.w_up = [proj(e, 4 * e) for _ in range(c.layers)]
        self.w_down = [proj(4 * e, e) for _ in range(c.layers)]
        self.placeholder = (rng.standard_normal(e) / np.sqrt(e)).astype(DTYPE)

    def _weight_arrays(self) -> Iterable[np.ndarray]:
        yield self.embedding
        yield self.placeholder
        for group in (self.wq, self.wk, self.wv, self.wo, self.w_up, self.w_down):
            yield from group

    def checksum(self) -> int:
        """64-bit digest over every weight array."""
        digest = hashlib.blake2b(digest_size=8)
        for arr in self._weight_arrays():
            digest.update(np.ascontiguousarray(arr).tobytes())
        return int.from_bytes(digest.digest(), "little")

    # -- token helpers -----------------------------------------------------

    def token_vector(self, token_id: int) -> np.ndarray:
        if not 0 <= token_id < self.config.vocab:
            raise PreconditionError(f"token id {token_id} outside vocab of {self.config.vocab}")
        return self.embedding[token_id]

    def logits(self, hidden: np.ndarray) -> np.ndarray:
        """Tied readout: normalised hidden state against the embedding table."""
        return rms_norm(np.asarray(hidden, DTYPE)) @ self.embedding.T

    # -- forward passes ----------------------------------------------------

    def _split(self, x: np.ndarray) -> np.ndarray:
        return x.reshape(x.shape[0], self.config.heads, self.config.head_dim)

    def prefill(
        self,
        tokens: Sequence[TokenEmbedding],
        context: Optional[KVBlock] = None,
        return_attention: bool = False,
    ) -> PrefillResult:
        c = self.config
        if not tokens:
            raise PreconditionError("prefill needs at least one token")
        x = np.stack([t.vector for t in tokens]).astype(DTYPE, copy=False)
        if x.shape[1] != c.embed_dim:
            raise DimensionError(f"token width {x.shape[1]} != embed_dim {c.embed_dim}")
        positions = np.array([t.position for t in tokens], dtype=np.int64)
        if positions.size > 1 and np.any(np.diff(positions) <= 0):
            raise PreconditionError("token positions must be strictly increasing")

        if context is None:
            context = KVBlock.empty(c)
        context.check_shape(c)
        if len(context) and positions[0] <= context.positions.max():
            raise PreconditionError(
                f"token position {positions[0]} overlaps context ending at {context.positions.max()}"
            )
        all_positions = np.concatenate([context.positions, positions])

        T = x.shape[0]
        new_keys = np.empty((c.layers, T, c.heads, c.head_dim), DTYPE)
        new_values = np.empty_like(new_keys)
        attention = None
        h = x
        for layer in range(c.layers):
            normed = rms_norm(h)
            q = self._split(normed @ self.wq[layer])
            k = self._split(normed @ self.wk[layer])
            v = self._split(normed @ self.wv[layer])
            new_keys[layer] = k
            new_values[layer] = v

            keys = np.concatenate([context.keys[layer], k]) if len(context) else k
            values = np.concatenate([context.values[layer], v]) if len(context) else v
            want_weights = return_attention and layer == c.layers - 1
            result = attend(
                q, positions, keys, all_positions, values,
                mask="causal", rotary=self.rotary, return_weights=want_weights,
            )
            if want_weights:
                out, weights = result
                attention = weights.transpose(1, 0, 2)
            else:
                out = result
            mixed = out.reshape(T, c.embed_dim) @ self.wo[layer]

            if self.averaging:
                h = mixed
            else:
                h = h + mixed
                h = h + gelu(rms_norm(h) @ self.w_up[layer]) @ self.w_down[layer]

        kvs = KVBlock(new_keys, new_values, positions)
        return PrefillResult(kvs, h.astype(DTYPE, copy=False), attention)


def init_engine(config: EngineConfig) -> Engine:
    return Engine(config)


def forward_prefill(
    engine: Engine,
    tokens: Sequence[TokenEmbedding],
    context_kvs: Optional[KVBlock] = None,
    return_attention: bool = False,
) -> PrefillResult:
    """Encode ``tokens`` causally with full visibility onto ``context_kvs``."""
    return engine.prefill(tokens, context_kvs, return_attention=return_attention)


def forward_decode_step(
    engine: Engine, last_token: TokenEmbedding, kv_context: KVBlock
) -> Tuple[np.ndarray, KVBlock]:
    """One decoding step: logits for the next token and the KV of ``last_token``."""
    if len(kv_context) == 0:
        raise PreconditionError("decoding needs a nonempty KV context")
    result = engine.prefill([last_token], kv_context)
    return engine.logits(result.hidden[-1]), result.kvs


@dataclass
class DecodeSession:
    """Single-threaded greedy decoding against a session-owned KV context."""

    engine: Engine
    context: Optional[KVBlock] = None
    buffer: KVBuffer = field(init=False)
    step_seconds: List[float] = field(default_factory=list, init=False)

    def __post_init__(self):
        capacity = (len(self.context) if self.context is not None else 0) + 64
        self.buffer = KVBuffer(self.engine.config, capacity)
        if self.context is not None:
            self.buffer.append(self.context)

    def __len__(self) -> int:
        return len(self.buffer)

    def next_position(self) -> int:
        return self.buffer.next_position()

    def prefill(self, vectors: Sequence[np.ndarray]) -> np.ndarray:
        """Append ``vectors`` at the next positions and return logits of the last one."""
        start = self.next_position()
        tokens = [TokenEmbedding(v, start + i) for i, v in enumerate(vectors)]
        result = self.engine.prefill(tokens, self.buffer.view())
        self.buffer.append(result.kvs)
        return self.engine.logits(result.hidden[-1])

    def step(self, token_id: int) -> np.ndarray:
        token = TokenEmbedding(self.engine.token_vector(token_id), self.next_position())
        logits, new_kv = forward_decode_step(self.engine, token, self.buffer.view())
        self.buffer.append(new_kv)
        return logits

    def generate(self, first_logits: np.ndarray, max_new: int, clock=None) -> List[int]:
        """Greedy decoding; every generated token's KV is appended to the session."""
        if max_new < 1:
            raise PreconditionError(f"max_new must be >= 1, got {max_new}")
        generated: List[int] = []
        logits = first_logits
        for _ in range(max_new):
            token_id = int(np.argmax(logits))
            generated.append(token_id)
            start = clock() if clock else None
            logits = self.step(token_id)
            if clock:
                self.step_seconds.append(clock() - start)
        return generated
