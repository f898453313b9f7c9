import numpy as np
import pytest

from kvx2l.chunking import (
    VideoTokens,
    deinterleave,
    interleave,
    layout_summaries,
    partition,
    summary_count,
)
from kvx2l.errors import ConfigurationError, PreconditionError


def single_chunk(width):
    return partition(width, width)[0]


class TestPartition:
    def test_frame_widths_with_remainder(self):
        chunks = partition(26, frames_per_chunk=10)
        assert [c.width for c in chunks] == [10, 10, 6]
        assert [c.frame_span for c in chunks] == [(0, 9), (10, 19), (20, 25)]

    def test_exact_single_chunk(self):
        assert len(partition(10, frames_per_chunk=10)) == 1

    def test_token_widths_for_256_frames(self):
        chunks = partition(1024, frames_per_chunk=10, tokens_per_frame=4)
        assert len(chunks) == 26
        assert [c.width for c in chunks] == [40] * 25 + [24]
        assert sum(c.width for c in chunks) == 1024

    def test_chunks_are_contiguous(self, make_tokens):
        tokens = make_tokens(60, 4, tokens_per_frame=3)
        chunks = partition(tokens, frames_per_chunk=7, tokens_per_frame=3)
        assert chunks[0].start == 0
        for a, b in zip(chunks, chunks[1:]):
            assert b.start == a.end
            assert b.index == a.index + 1
        assert chunks[-1].end == 60

    def test_custom_widths(self):
        chunks = partition(12, frames_per_chunk=1, widths=[5, 4, 3])
        assert [(c.start, c.width) for c in chunks] == [(0, 5), (5, 4), (9, 3)]
        with pytest.raises(PreconditionError):
            partition(12, frames_per_chunk=1, widths=[5, 4])

    def test_empty_input_rejected(self):
        with pytest.raises(PreconditionError):
            partition(0, frames_per_chunk=10)

    def test_zero_frames_per_chunk_rejected(self):
        with pytest.raises(ConfigurationError):
            partition(10, frames_per_chunk=0)


class TestLayoutSummaries:
    def test_exact_division(self):
        layout = layout_summaries(single_chunk(64), 2)
        assert layout.vst_count == 32
        assert layout.insert_offsets == tuple(range(2, 65, 2))

    def test_min_one_summary(self):
        layout = layout_summaries(single_chunk(10), 72)
        assert layout.vst_count == 1
        assert layout.insert_offsets == (10,)

    def test_ceil_with_uniform_groups(self):
        assert layout_summaries(single_chunk(40), 32).groups == [20, 20]

    def test_shorter_group_last(self):
        layout = layout_summaries(single_chunk(5), 2)
        assert layout.vst_count == 3
        assert layout.groups == [2, 2, 1]

    def test_zero_ratio_rejected(self):
        with pytest.raises(ConfigurationError):
            layout_summaries(single_chunk(8), 0)

    def test_groups_differ_by_at_most_one(self, rng):
        for _ in range(200):
            width = int(rng.integers(1, 300))
            ratio = int(rng.integers(1, 80))
            layout = layout_summaries(single_chunk(width), ratio)
            assert layout.vst_count == max(1, -(-width // ratio))
            assert max(layout.groups) - min(layout.groups) <= 1
            assert layout.insert_offsets[-1] == width
            assert all(b > a for a, b in zip(layout.insert_offsets, layout.insert_offsets[1:]))

    def test_ratio_monotonicity(self):
        for width in (1, 7, 40, 288):
            counts = [summary_count(width, a) for a in (1, 2, 4, 8, 16, 32, 72)]
            assert counts == sorted(counts, reverse=True)


class TestInterleave:
    def test_pattern_w4_ratio2(self):
        tokens = np.arange(8, dtype=np.float32).reshape(4, 2)
        layout = layout_summaries(single_chunk(4), 2)
        out = interleave(tokens, layout, np.full(2, -1.0))
        assert [t.is_summary for t in out] == [False, False, True, False, False, True]
        assert [t.position for t in out] == list(range(6))
        np.testing.assert_array_equal(out[3].vector, tokens[2])

    def test_single_token_chunk(self):
        layout = layout_summaries(single_chunk(1), 8)
        out = interleave(np.ones((1, 3)), layout, np.zeros(3), start_position=10)
        assert [t.is_summary for t in out] == [False, True]
        assert [t.position for t in out] == [10, 11]

    def test_round_trip_restores_tokens(self, rng):
        for _ in range(20):
            width = int(rng.integers(1, 50))
            tokens = rng.standard_normal((width, 4)).astype(np.float32)
            layout = layout_summaries(single_chunk(width), int(rng.integers(1, 10)))
            out = interleave(tokens, layout, np.zeros(4))
            assert len(out) == width + layout.vst_count
            np.testing.assert_array_equal(deinterleave(out), tokens)

    def test_width_mismatch_rejected(self):
        layout = layout_summaries(single_chunk(4), 2)
        with pytest.raises(PreconditionError):
            interleave(np.ones((3, 2)), layout, np.zeros(2))


def test_video_tokens_frame_means():
    tokens = VideoTokens(np.arange(16, dtype=np.float32).reshape(8, 2), tokens_per_frame=4)
    assert tokens.n_frames == 2
    np.testing.assert_allclose(tokens.frame_embeddings(), [[3.0, 4.0], [11.0, 12.0]])
    with pytest.raises(PreconditionError):
        VideoTokens(np.zeros((7, 2)), tokens_per_frame=4)
