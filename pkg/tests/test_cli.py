import csv
import json
import runpy
import sys

import numpy as np
import pytest
from click.testing import CliRunner

from kvx2l.bench import RECORD_FIELDS
from kvx2l.main import cli
from kvx2l.oracle import write_embedding_file

SMALL_ENGINE = ["--heads", "2", "--head-dim", "8", "--vocab", "16"]


@pytest.fixture
def runner():
    return CliRunner()


def write_frames(path, n_frames, relevant):
    """Three-wide frame embeddings where only the frames in ``relevant`` face the query."""
    frames = np.tile(np.array([0.0, 1.0, 0.0], dtype=np.float32), (n_frames, 1))
    frames[list(relevant)] = [1.0, 0.0, 0.0]
    return str(write_embedding_file(str(path), frames))


def prefill(runner, cache_dir, *extra, engine=SMALL_ENGINE):
    args = ["prefill", *engine, "--context-tokens", "160", "--out", str(cache_dir), *extra]
    return runner.invoke(cli, args)


class TestPrefillQuery:
    def test_round_trip(self, runner, tmp_path):
        cache = tmp_path / "cache"
        result = prefill(runner, cache, "--topk", "1", engine=[])
        assert result.exit_code == 0, result.output
        assert "Prefill Complete!" in result.output
        assert "Records:  8" in result.output

        manifest = json.loads((cache / "manifest.json").read_text())
        assert len(manifest["chunks"]) == 4
        assert manifest["pipeline"]["topk"] == 1

        result = runner.invoke(cli, ["query", "--cache", str(cache)])
        assert result.exit_code == 0, result.output
        assert f"Selected chunks: [{manifest['needle_chunk']}]" in result.output
        assert f"Answer:          {manifest['needle_id']}" in result.output

    def test_query_overrides(self, runner, tmp_path):
        cache = tmp_path / "cache"
        assert prefill(runner, cache).exit_code == 0
        result = runner.invoke(cli, ["query", "--cache", str(cache), "--topk", "4", "--oracle", "lastn"])
        assert result.exit_code == 0, result.output
        assert "Selected chunks: [0, 1, 2, 3]" in result.output
        assert "(50.0% reduction)" in result.output

    def test_attention_oracle_and_original_positions(self, runner, tmp_path):
        cache = tmp_path / "cache"
        assert prefill(runner, cache, "--workers", "2").exit_code == 0
        result = runner.invoke(cli, ["query", "--cache", str(cache), "--oracle", "attention",
                                     "--keep-original-positions", "--max-new", "3"])
        assert result.exit_code == 0, result.output
        answer = result.output.split("Answer:")[1].split()
        assert len(answer) == 3


class TestFrameEmbeddings:
    def test_query_scores_supplied_frames(self, runner, tmp_path):
        cache = tmp_path / "cache"
        assert prefill(runner, cache, engine=[]).exit_code == 0
        frames = write_frames(tmp_path / "frames.vxem", 40, range(10, 20))
        query_vec = str(write_embedding_file(str(tmp_path / "query.vxem"), np.array([[1.0, 0.0, 0.0]])))
        result = runner.invoke(cli, ["query", "--cache", str(cache), "--oracle", "cosine", "--topk", "1",
                                     "--query-embedding", query_vec, "--frame-embeddings", frames])
        assert result.exit_code == 0, result.output
        assert "Selected chunks: [1]" in result.output

    def test_prefill_stores_supplied_frames(self, runner, tmp_path):
        cache = tmp_path / "cache"
        frames = write_frames(tmp_path / "frames.vxem", 40, range(30, 40))
        assert prefill(runner, cache, "--frame-embeddings", frames, engine=[]).exit_code == 0
        query_vec = str(write_embedding_file(str(tmp_path / "query.vxem"), np.array([[1.0, 0.0, 0.0]])))
        result = runner.invoke(cli, ["query", "--cache", str(cache), "--oracle", "cosine", "--topk", "1",
                                     "--query-embedding", query_vec])
        assert result.exit_code == 0, result.output
        assert "Selected chunks: [3]" in result.output

    def test_frame_count_must_match_chunks(self, runner, tmp_path):
        cache = tmp_path / "cache"
        short = write_frames(tmp_path / "short.vxem", 39, range(10))
        result = prefill(runner, cache, "--frame-embeddings", short)
        assert result.exit_code == 2
        assert "39 frame embeddings given, chunks span 40 frames" in result.output

        assert prefill(runner, cache).exit_code == 0
        result = runner.invoke(cli, ["query", "--cache", str(cache), "--oracle", "cosine",
                                     "--frame-embeddings", short])
        assert result.exit_code == 2

    def test_query_embedding_holds_one_vector(self, runner, tmp_path):
        cache = tmp_path / "cache"
        assert prefill(runner, cache).exit_code == 0
        two = str(write_embedding_file(str(tmp_path / "two.vxem"), np.eye(2, 3)))
        result = runner.invoke(cli, ["query", "--cache", str(cache), "--query-embedding", two])
        assert result.exit_code == 2


class TestExitCodes:
    def test_ratio_order(self, runner, tmp_path):
        result = prefill(runner, tmp_path / "cache", "--alpha-low", "8", "--alpha-high", "2")
        assert result.exit_code == 2

    def test_config_file_supplies_defaults(self, runner, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("alpha_low = 8\nalpha_high = 2\n")
        result = runner.invoke(cli, ["--config", str(cfg), "prefill", *SMALL_ENGINE,
                                     "--context-tokens", "160", "--out", str(tmp_path / "c")])
        assert result.exit_code == 2
        assert "alpha_low (8)" in result.output

    def test_unknown_config_key(self, runner, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("flux_capacitor = 1\n")
        result = runner.invoke(cli, ["--config", str(cfg), "niah", "--trials", "0"])
        assert result.exit_code == 2

    def test_missing_cache(self, runner, tmp_path):
        result = runner.invoke(cli, ["query", "--cache", str(tmp_path / "nothing")])
        assert result.exit_code == 3

    def test_tampered_record(self, runner, tmp_path):
        cache = tmp_path / "cache"
        assert prefill(runner, cache).exit_code == 0
        for record in cache.glob("chunk00000_*.kv"):
            data = bytearray(record.read_bytes())
            data[-1] ^= 0x01
            record.write_bytes(bytes(data))
        result = runner.invoke(cli, ["query", "--cache", str(cache)])
        assert result.exit_code == 3
        assert "checksum mismatch" in result.output

    def test_memory_budget(self, runner, tmp_path):
        result = runner.invoke(cli, ["bench", *SMALL_ENGINE, "--context-tokens", "160",
                                     "--memory-budget-mb", "0.001", "--out", str(tmp_path / "b.csv")])
        assert result.exit_code == 4


class TestReports:
    def test_niah_without_trials(self, runner, tmp_path):
        out = tmp_path / "niah"
        result = runner.invoke(cli, ["niah", *SMALL_ENGINE, "--lengths", "128", "--depths", "50",
                                     "--trials", "0", "--out", str(out), "--emit-gnuplot"])
        assert result.exit_code == 0, result.output
        assert sorted(p.name for p in out.iterdir()) == [
            "niah_hybrid-k1.csv", "niah_hybrid-k1.gp", "niah_uniform-32x.csv", "niah_uniform-32x.gp",
        ]

    def test_niah_grid(self, runner, tmp_path):
        out = tmp_path / "niah"
        result = runner.invoke(cli, ["niah", "--lengths", "128", "--depths", "0,100",
                                     "--trials", "2", "--noise-scale", "0.1", "--out", str(out)])
        assert result.exit_code == 0, result.output
        with open(out / "niah_hybrid-k1.csv", newline="") as handle:
            rows = list(csv.reader(handle))
        assert rows == [["depth_pct", "128"], ["0", "1.0000"], ["100", "1.0000"]]

    def test_sweep_empty_grid(self, runner, tmp_path):
        out = tmp_path / "sweep.csv"
        result = runner.invoke(cli, ["sweep", *SMALL_ENGINE, "--values", "", "--out", str(out)])
        assert result.exit_code == 0, result.output
        with open(out, newline="") as handle:
            assert list(csv.reader(handle)) == [RECORD_FIELDS]

    def test_sweep_rejects_bad_ratio(self, runner, tmp_path):
        result = runner.invoke(cli, ["sweep", *SMALL_ENGINE, "--dimension", "ratio", "--values", "2-8",
                                     "--out", str(tmp_path / "s.csv")])
        assert result.exit_code == 2


def test_package_runs_as_module(monkeypatch, capsys):
    monkeypatch.setattr(sys, "argv", ["kvx2l", "--help"])
    with pytest.raises(SystemExit) as excinfo:
        runpy.run_module("kvx2l", run_name="__main__")
    assert excinfo.value.code == 0
    output = capsys.readouterr().out
    for command in ("prefill", "query", "bench", "niah", "sweep"):
        assert command in output
