import logging

import numpy as np
import pytest

from kvx2l.config import PipelineConfig
from kvx2l.engine import DTYPE, Engine
from kvx2l.errors import ConfigurationError
from kvx2l.kvstore import predict_reduction
from kvx2l.niah import gen_niah
from kvx2l.pipeline import BiLevelPipeline, run_uncompressed, uncompressed_hybrid


def niah_config(**overrides):
    settings = dict(alpha_low=2, alpha_high=32, topk=1, oracle="cosine", chunk_frames=10, tokens_per_frame=4)
    settings.update(overrides)
    return PipelineConfig(**settings)


def zero_task(engine):
    return np.zeros((1, engine.config.embed_dim), DTYPE)


@pytest.fixture(scope="module")
def instance(niah_engine):
    return gen_niah(niah_engine, 512, 0.5, seed=3, noise_scale=0.1)


class TestRun:
    def test_stats(self, niah_engine, instance, caplog):
        pipeline = BiLevelPipeline(niah_engine, niah_config())
        with caplog.at_level(logging.INFO, logger="kvx2l.pipeline"):
            stats = pipeline.run(instance.tokens, instance.query, zero_task(niah_engine))

        assert stats["n"] == 512
        assert stats["chunks"] == 13
        assert stats["l_entries"] == 12 * 20 + 16
        assert stats["h_entries"] == 12 * 2 + 1
        assert stats["selected"] == [instance.needle_chunk_index]
        assert stats["tokens"] == [instance.needle_id]

        widths = [c.width for c in instance.chunks]
        predicted = predict_reduction(widths, 2, 32, 1, stats["selected"])
        assert stats["hybrid_entries"] == predicted.total_entries
        assert stats["reduction_pct"] == pytest.approx(predicted.reduction_pct)
        assert "PIPELINE COMPLETE" in caplog.text

    def test_parallel_passes_agree(self, niah_engine, instance):
        serial = BiLevelPipeline(niah_engine, niah_config()).run(
            instance.tokens, instance.query, zero_task(niah_engine))
        threaded = BiLevelPipeline(niah_engine, niah_config(), parallel_passes=True).run(
            instance.tokens, instance.query, zero_task(niah_engine))
        assert serial == threaded


class TestColdStoreFlow:
    def test_query_store_matches_in_memory_run(self, niah_engine, instance, tmp_path):
        cache = str(tmp_path / "cache")
        config = niah_config(topk=2)
        pipeline = BiLevelPipeline(niah_engine, config)
        prefill = pipeline.prefill_to_store(instance.tokens, cache, {"needle_id": instance.needle_id})
        assert prefill["records"] == 2 * 13
        assert prefill["bytes"] > 0

        reopened, manifest = BiLevelPipeline.from_store(Engine, cache)
        assert manifest["needle_id"] == instance.needle_id
        assert reopened.config == config

        queried = reopened.query_store(manifest, instance.query, zero_task(niah_engine))
        expected = pipeline.run(instance.tokens, instance.query, zero_task(niah_engine))
        assert queried["selected"] == expected["selected"]
        assert queried["tokens"] == expected["tokens"]
        assert queried["hybrid_entries"] == expected["hybrid_entries"]
        assert queried["reduction_pct"] == pytest.approx(expected["reduction_pct"])
        assert queried["reload_ms"] >= 0.0

    def test_ratios_fixed_at_prefill(self, niah_engine, instance, tmp_path):
        cache = str(tmp_path / "cache")
        BiLevelPipeline(niah_engine, niah_config()).prefill_to_store(instance.tokens, cache)
        with pytest.raises(ConfigurationError):
            BiLevelPipeline.from_store(Engine, cache, {"alpha_high": 8})
        pipeline, _ = BiLevelPipeline.from_store(Engine, cache, {"topk": 3, "oracle": None})
        assert pipeline.config.topk == 3
        assert pipeline.config.oracle == "cosine"


class TestUncompressed:
    def test_context_keeps_every_token(self, niah_engine):
        needle = gen_niah(niah_engine, 128, 0.0, seed=2, noise_scale=0.1)
        hybrid = uncompressed_hybrid(niah_engine, needle.tokens, needle.chunks)
        assert len(hybrid) == 128
        assert hybrid.chunk_lengths() == [c.width for c in needle.chunks]
        np.testing.assert_array_equal(hybrid.kv.positions, np.arange(128))

        entries = hybrid.entries()
        assert len(entries) == 128
        pair, chunk_index, _ = entries[-1]
        assert chunk_index == len(needle.chunks) - 1
        assert pair.position == 127
        assert pair.key.shape == (2, 4, 32)

    def test_needle_at_start_is_answered(self, niah_engine):
        needle = gen_niah(niah_engine, 128, 0.0, seed=2, noise_scale=0.1)
        answer = run_uncompressed(niah_engine, needle.tokens, needle.chunks, zero_task(niah_engine))
        assert answer == [needle.needle_id]
