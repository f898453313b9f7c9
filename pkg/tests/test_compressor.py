import numpy as np
import pytest

from kvx2l.chunking import VideoTokens, interleave, layout_summaries, partition
from kvx2l.compressor import (
    LEVEL_HIGH,
    LEVEL_LOW,
    CompressionConfig,
    compress_bilevel,
    compress_level,
    prefill_chunk,
)
from kvx2l.engine import KVBlock, rms_norm
from kvx2l.errors import ConfigurationError, PreconditionError


def random_widths(rng, n):
    cuts = np.sort(rng.choice(np.arange(1, n), size=int(rng.integers(0, min(6, n - 1) + 1)), replace=False))
    return np.diff(np.concatenate([[0], cuts, [n]])).tolist()


class TestCompressionConfig:
    def test_low_above_high_rejected(self):
        with pytest.raises(ConfigurationError):
            CompressionConfig(8, 2)

    def test_equal_ratios_need_single_level_flag(self):
        with pytest.raises(ConfigurationError):
            CompressionConfig(4, 4)
        assert CompressionConfig(4, 4, single_level=True).ratio(LEVEL_HIGH) == 4


class TestPrefillChunk:
    def test_first_chunk_keeps_only_summaries(self, seeded_engine, make_tokens):
        tokens = make_tokens(4, 8)
        chunk = partition(tokens, 4)[0]
        layout = layout_summaries(chunk, 2)
        sequence = interleave(tokens.chunk_tokens(chunk), layout, seeded_engine.placeholder)
        compressed = prefill_chunk(seeded_engine, sequence, [], layout, LEVEL_LOW)
        assert len(compressed) == 2
        np.testing.assert_array_equal(compressed.kv.positions, [2, 5])
        np.testing.assert_array_equal(compressed.source_offsets, [1, 3])

    def test_context_is_exactly_prior_summaries(self, seeded_engine, make_tokens):
        tokens = make_tokens(40, 8)
        chunks = partition(tokens, 10)
        outputs = compress_level(seeded_engine, tokens, chunks, 4, LEVEL_LOW)
        layout = layout_summaries(chunks[3], 4)
        start = sum(layout_summaries(c, 4).interleaved_length for c in chunks[:3])
        sequence = interleave(tokens.chunk_tokens(chunks[3]), layout, seeded_engine.placeholder, start)
        again = prefill_chunk(seeded_engine, sequence, outputs[:3], layout, LEVEL_LOW)
        np.testing.assert_array_equal(again.kv.values, outputs[3].kv.values)

        with pytest.raises(PreconditionError):
            prefill_chunk(seeded_engine, sequence, outputs[:2], layout, LEVEL_LOW)
        with pytest.raises(PreconditionError):
            prefill_chunk(seeded_engine, sequence, [outputs[1], outputs[0], outputs[2]], layout, LEVEL_LOW)
        with pytest.raises(PreconditionError):
            prefill_chunk(seeded_engine, sequence, outputs[:3], layout, LEVEL_HIGH)

    def test_averaging_summary_value_is_normalised_visible_mean(self, averaging_engine, rng):
        """Layer-1 value of every summary = rms_norm(mean of layer-0 values it can see)."""
        engine = averaging_engine
        for _ in range(50):
            n = int(rng.integers(2, 60))
            tokens = VideoTokens(rng.standard_normal((n, 8)).astype(np.float32))
            chunks = partition(tokens, 1, widths=random_widths(rng, n))
            ratio = int(rng.choice([1, 2, 3, 4, 8]))
            outputs = compress_level(engine, tokens, chunks, ratio, LEVEL_LOW)

            start = 0
            for i, chunk in enumerate(chunks):
                layout = layout_summaries(chunk, ratio)
                sequence = interleave(tokens.chunk_tokens(chunk), layout, engine.placeholder, start)
                context = KVBlock.concat([o.kv for o in outputs[:i]], engine.config)
                full = engine.prefill(sequence, context)
                visible = np.concatenate([context.values[0], full.kvs.values[0]]).reshape(-1, 8)

                summaries = [j for j, t in enumerate(sequence) if t.is_summary]
                for slot, j in enumerate(summaries):
                    expected = rms_norm(visible[: len(context) + j + 1].mean(axis=0, dtype=np.float64).astype(np.float32))
                    got = outputs[i].kv.values[1][slot].reshape(-1)
                    np.testing.assert_allclose(got, expected, atol=1e-5)
                # summaries carry the zero placeholder into layer 0
                np.testing.assert_array_equal(outputs[i].kv.values[0], 0.0)
                start += layout.interleaved_length


class TestCompressBilevel:
    def test_per_chunk_counts(self, averaging_engine, make_tokens):
        tokens = make_tokens(13 * 64, 8)
        chunks = partition(tokens, 64)
        low, high = compress_bilevel(averaging_engine, tokens, chunks, CompressionConfig(2, 32))
        assert [len(c) for c in low] == [32] * 13
        assert [len(c) for c in high] == [2] * 13
        assert all(c.level == LEVEL_LOW for c in low)
        assert all(c.level == LEVEL_HIGH for c in high)

    def test_count_law(self, seeded_engine, make_tokens):
        tokens = make_tokens(97, 8)
        chunks = partition(tokens, 10)
        low, high = compress_bilevel(seeded_engine, tokens, chunks, CompressionConfig(2, 8))
        assert sum(len(c) for c in low) == sum(max(1, -(-c.width // 2)) for c in chunks)
        assert sum(len(c) for c in high) == sum(max(1, -(-c.width // 8)) for c in chunks)
        for lo, hi in zip(low, high):
            assert len(lo) >= len(hi)

    def test_equal_ratios_give_identical_levels(self, seeded_engine, make_tokens):
        tokens = make_tokens(50, 8)
        chunks = partition(tokens, 10)
        low, high = compress_bilevel(seeded_engine, tokens, chunks, CompressionConfig(4, 4, single_level=True))
        for lo, hi in zip(low, high):
            np.testing.assert_array_equal(lo.kv.keys, hi.kv.keys)
            np.testing.assert_array_equal(lo.kv.values, hi.kv.values)

    def test_pass_order_and_parallelism_do_not_matter(self, seeded_engine, make_tokens):
        tokens = make_tokens(60, 8)
        chunks = partition(tokens, 12)
        base = compress_bilevel(seeded_engine, tokens, chunks, CompressionConfig(2, 8))
        swapped = compress_bilevel(seeded_engine, tokens, chunks, CompressionConfig(2, 8), order=(LEVEL_HIGH, LEVEL_LOW))
        threaded = compress_bilevel(seeded_engine, tokens, chunks, CompressionConfig(2, 8, parallel_passes=True))
        for other in (swapped, threaded):
            for level in (0, 1):
                for a, b in zip(base[level], other[level]):
                    np.testing.assert_array_equal(a.kv.keys, b.kv.keys)
                    np.testing.assert_array_equal(a.kv.values, b.kv.values)

    def test_changes_propagate_forward_only(self, seeded_engine, make_tokens):
        tokens = make_tokens(50, 8)
        chunks = partition(tokens, 10)
        before = compress_level(seeded_engine, tokens, chunks, 2, LEVEL_LOW)
        edited = tokens.embeddings.copy()
        edited[chunks[2].start] += 1.0
        after = compress_level(seeded_engine, VideoTokens(edited), chunks, 2, LEVEL_LOW)
        for i in (0, 1):
            np.testing.assert_array_equal(before[i].kv.values, after[i].kv.values)
        for i in (2, 3, 4):
            assert not np.array_equal(before[i].kv.values, after[i].kv.values)

    def test_bad_pass_order(self, seeded_engine, make_tokens):
        tokens = make_tokens(10, 8)
        with pytest.raises(PreconditionError):
            compress_bilevel(seeded_engine, tokens, partition(tokens, 5), CompressionConfig(2, 8), order=("L", "L"))
