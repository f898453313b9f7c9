"""kvx2l command line.

Commands:
    prefill   compress a context into L/H caches and offload them
    query     score, reload and decode against a prefilled cache
    bench     TTFT and cache reduction against the uncompressed baseline
    niah      needle-in-a-haystack accuracy grid
    sweep     bench over top-k values or ratio pairs

Usage:
    kvx2l prefill --context-tokens 2048 --out ./cache
    kvx2l query --cache ./cache --topk 1
    kvx2l --config run.cfg niah --lengths 128,512 --trials 20 --emit-gnuplot
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import click
import numpy as np

from kvx2l.bench import bench_table, sweep as run_sweep
from kvx2l.chunking import VideoTokens
from kvx2l.config import (
    ALPHA_HIGH,
    ALPHA_LOW,
    CACHE_DIR,
    CHUNK_FRAMES,
    ENGINE_DEFAULTS,
    KEEP_ORIGINAL_POSITIONS,
    LOG_LEVEL,
    MAX_NEW_TOKENS,
    MEMORY_BUDGET_MB,
    ORACLE,
    ORACLE_CHOICES,
    ORACLE_NOISE,
    SEED,
    TOKENS_PER_FRAME,
    TOPK,
    WORKERS,
    PipelineConfig,
    load_config_file,
)
from kvx2l.engine import MODES, DTYPE, Engine, EngineConfig
from kvx2l.errors import ConfigurationError, Kvx2lError
from kvx2l.niah import NiahSetting, default_settings, eval_niah, gen_niah
from kvx2l.oracle import TaskQuery, load_embedding_file
from kvx2l.pipeline import BiLevelPipeline
from kvx2l.report import write_bench_csv, write_gnuplot_heatmap, write_niah_csv

logger = logging.getLogger(__name__)


class Kvx2lGroup(click.Group):
    """Maps kvx2l errors to their exit codes."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except Kvx2lError as e:
            logger.error(f"{type(e).__name__}: {e}")
            click.echo(f"Error: {e}", err=True)
            ctx.exit(e.exit_code)


def pipeline_options(fn):
    options = [
        click.option("--alpha-low", type=int, default=ALPHA_LOW, show_default=True, help="Low compression ratio (L-KVs)"),
        click.option("--alpha-high", type=int, default=ALPHA_HIGH, show_default=True, help="High compression ratio (H-KVs)"),
        click.option("--topk", type=int, default=TOPK, show_default=True, help="Chunks reloaded at the low ratio"),
        click.option("--oracle", type=click.Choice(ORACLE_CHOICES), default=ORACLE, show_default=True),
        click.option("--oracle-noise", type=float, default=ORACLE_NOISE, help="Gaussian noise added to oracle scores"),
        click.option("--chunk-frames", type=int, default=CHUNK_FRAMES, show_default=True),
        click.option("--tokens-per-frame", type=int, default=TOKENS_PER_FRAME, show_default=True),
        click.option("--seed", type=int, default=SEED, show_default=True),
        click.option("--keep-original-positions", is_flag=True, default=KEEP_ORIGINAL_POSITIONS,
                     help="Place merged entries at their source offsets instead of 0..N-1"),
        click.option("--max-new", type=int, default=MAX_NEW_TOKENS, show_default=True),
        click.option("--memory-budget-mb", type=float, default=MEMORY_BUDGET_MB, show_default=True),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def engine_options(fn):
    options = [
        click.option("--layers", type=int, default=ENGINE_DEFAULTS["layers"], show_default=True),
        click.option("--heads", type=int, default=ENGINE_DEFAULTS["heads"], show_default=True),
        click.option("--head-dim", type=int, default=ENGINE_DEFAULTS["head_dim"], show_default=True),
        click.option("--vocab", type=int, default=ENGINE_DEFAULTS["vocab"], show_default=True),
        click.option("--engine-mode", type=click.Choice(MODES), default=ENGINE_DEFAULTS["mode"], show_default=True),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def make_config(params: Dict, **extra) -> PipelineConfig:
    names = PipelineConfig.__dataclass_fields__
    values = {k: v for k, v in params.items() if k in names}
    values.update(extra)
    return PipelineConfig(**values).validate()


def make_engine(params: Dict) -> Engine:
    config = EngineConfig(
        layers=params["layers"],
        heads=params["heads"],
        head_dim=params["head_dim"],
        vocab=params["vocab"],
        seed=params["seed"],
        mode=params["engine_mode"],
    )
    return Engine(config)


def _int_list(text: str, name: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigurationError(f"--{name} expects comma-separated integers, got '{text}'")


def _ratio_list(text: str) -> List[Tuple[int, int]]:
    pairs = []
    for part in (p.strip() for p in text.split(",")):
        if not part:
            continue
        try:
            lo, hi = part.split(":")
            pairs.append((int(lo), int(hi)))
        except ValueError:
            raise ConfigurationError(f"ratio values look like 2:32, got '{part}'")
    return pairs


@click.group(cls=Kvx2lGroup)
@click.option("--config", "config_path", type=click.Path(dir_okay=False),
              help="File of `key = value` lines mirroring the long options")
@click.option("--verbose", "-v", is_flag=True, help="Debug logging")
@click.pass_context
def cli(ctx, config_path, verbose):
    """Bi-level KV cache compression toolkit."""
    level = logging.DEBUG if verbose else getattr(logging, LOG_LEVEL.upper(), logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s - %(levelname)s - %(message)s")
    if config_path:
        values = load_config_file(config_path)
        if values.pop("verbose", False):
            logging.getLogger().setLevel(logging.DEBUG)
        ctx.default_map = {name: dict(values) for name in cli.commands}


@cli.command()
@pipeline_options
@engine_options
@click.option("--context-tokens", type=int, default=2048, show_default=True, help="Synthetic context length")
@click.option("--needle-depth", type=float, default=0.5, show_default=True, help="Needle position in [0, 1]")
@click.option("--noise-scale", type=float, default=0.5, show_default=True)
@click.option("--embeddings", type=click.Path(exists=True, dir_okay=False),
              help="Token embedding file to compress instead of a synthetic haystack")
@click.option("--frame-embeddings", type=click.Path(exists=True, dir_okay=False),
              help="Per-frame embedding file stored for the cosine oracle instead of token means")
@click.option("--cache-dir", default=CACHE_DIR, show_default=True)
@click.option("--out", default=None, help="Cache directory to write (defaults to --cache-dir)")
@click.option("--workers", type=int, default=WORKERS, help="Run the L and H passes in parallel when > 1")
def prefill(**params):
    """Compress a context at both ratios and offload it."""
    engine = make_engine(params)
    config = make_config(params)
    out = params["out"] or params["cache_dir"]

    extra = {}
    if params["embeddings"]:
        tokens = VideoTokens(load_embedding_file(params["embeddings"]), config.tokens_per_frame)
    else:
        instance = gen_niah(
            engine, params["context_tokens"], params["needle_depth"], config.seed,
            params["noise_scale"], config.tokens_per_frame, config.chunk_frames,
        )
        tokens = instance.tokens
        extra = {"needle_id": instance.needle_id, "needle_chunk": instance.needle_chunk_index}

    frames = load_embedding_file(params["frame_embeddings"]) if params["frame_embeddings"] else None
    pipeline = BiLevelPipeline(engine, config, parallel_passes=params["workers"] > 1)
    stats = pipeline.prefill_to_store(tokens, out, extra, frames)

    click.echo("=" * 60)
    click.echo("Prefill Complete!")
    click.echo("=" * 60)
    click.echo(f"  Tokens:   {stats['n']}")
    click.echo(f"  Chunks:   {stats['chunks']}")
    click.echo(f"  Records:  {stats['records']}")
    click.echo(f"  Bytes:    {stats['bytes']}")
    click.echo(f"  Cache:    {out}")


@cli.command()
@click.option("--cache", "--cache-dir", "cache_dir", default=CACHE_DIR, show_default=True)
@click.option("--topk", type=int, default=None)
@click.option("--oracle", type=click.Choice(ORACLE_CHOICES), default=None)
@click.option("--oracle-noise", type=float, default=None)
@click.option("--max-new", type=int, default=None)
@click.option("--keep-original-positions", is_flag=True, help="Place merged entries at their source offsets")
@click.option("--query-token", type=int, default=None, help="Vocab id whose embedding is the query")
@click.option("--query-embedding", type=click.Path(exists=True, dir_okay=False),
              help="Embedding file holding one query vector for the cosine oracle")
@click.option("--frame-embeddings", type=click.Path(exists=True, dir_okay=False),
              help="Per-frame embedding file to score instead of the cached frames")
def query(cache_dir, topk, oracle, oracle_noise, max_new, keep_original_positions, query_token,
          query_embedding, frame_embeddings):
    """Answer a query from a prefilled cache."""
    overrides = {
        "topk": topk,
        "oracle": oracle,
        "oracle_noise": oracle_noise,
        "max_new": max_new,
        "keep_original_positions": True if keep_original_positions else None,
    }
    pipeline, manifest = BiLevelPipeline.from_store(Engine, cache_dir, overrides)
    engine = pipeline.engine
    if query_embedding:
        vectors = load_embedding_file(query_embedding)
        if vectors.shape[0] != 1:
            raise ConfigurationError(f"{query_embedding} must hold exactly one query vector, got {vectors.shape[0]}")
        embedding = vectors[0]
    else:
        token = query_token if query_token is not None else manifest.get("needle_id")
        if token is None:
            raise ConfigurationError("--query-token or --query-embedding is required for caches without a planted needle")
        embedding = engine.token_vector(token)
    frames = load_embedding_file(frame_embeddings) if frame_embeddings else None

    target = (manifest["needle_chunk"],) if "needle_chunk" in manifest else ()
    task = np.zeros((1, engine.config.embed_dim), DTYPE)
    task_query = TaskQuery(text_tokens=task, embedding=embedding, target_chunks=target)
    stats = pipeline.query_store(manifest, task_query, task, frames)

    click.echo(f"Selected chunks: {stats['selected']}")
    click.echo(f"Hybrid entries:  {stats['hybrid_entries']} ({stats['reduction_pct']:.1f}% reduction)")
    click.echo(f"Reload:          {stats['reload_ms']:.2f} ms")
    click.echo(f"Answer:          {' '.join(str(t) for t in stats['tokens'])}")


@cli.command()
@pipeline_options
@engine_options
@click.option("--context-tokens", type=int, default=16384, show_default=True)
@click.option("--repetitions", type=int, default=5, show_default=True)
@click.option("--out", default="bench.csv", show_default=True, help="CSV report path")
def bench(**params):
    """Benchmark uncompressed, uniform and hybrid contexts."""
    engine = make_engine(params)
    config = make_config(params)
    records = bench_table(engine, config, params["context_tokens"], params["repetitions"])
    write_bench_csv(records, params["out"])

    click.echo(f"{'pipeline':<10} {'ratios':>8} {'k':>3} {'entries':>8} {'reduction':>10} {'ttft_ms':>9} {'speedup':>8}")
    for r in records:
        click.echo(
            f"{r.pipeline:<10} {f'{r.alpha_low}/{r.alpha_high}':>8} {r.k:>3} {r.context_entries:>8} "
            f"{r.reduction_pct:>9.1f}% {r.ttft_ms:>9.3f} {r.speedup_vs_baseline:>7.2f}x"
        )


@cli.command()
@engine_options
@click.option("--alpha-low", type=int, default=ALPHA_LOW, show_default=True)
@click.option("--alpha-high", type=int, default=ALPHA_HIGH, show_default=True)
@click.option("--topk", type=int, default=1, show_default=True, help="k for the hybrid setting")
@click.option("--oracle", type=click.Choice(ORACLE_CHOICES), default=ORACLE, show_default=True)
@click.option("--oracle-noise", type=float, default=ORACLE_NOISE)
@click.option("--chunk-frames", type=int, default=CHUNK_FRAMES, show_default=True)
@click.option("--tokens-per-frame", type=int, default=TOKENS_PER_FRAME, show_default=True)
@click.option("--seed", type=int, default=SEED, show_default=True)
@click.option("--lengths", default="128,512,2048,8192", show_default=True, help="Context lengths in tokens")
@click.option("--depths", default="0,25,50,75,100", show_default=True, help="Needle depths in percent")
@click.option("--trials", type=int, default=100, show_default=True)
@click.option("--noise-scale", type=float, default=0.5, show_default=True)
@click.option("--workers", type=int, default=WORKERS)
@click.option("--out", default="niah", show_default=True, help="Directory for the CSV matrices")
@click.option("--emit-gnuplot", is_flag=True, help="Also write a heatmap plot script per matrix")
def niah(**params):
    """Needle-in-a-haystack accuracy over lengths x depths."""
    engine = make_engine(params)
    lengths = _int_list(params["lengths"], "lengths")
    depths = [d / 100.0 for d in _int_list(params["depths"], "depths")]
    settings: List[NiahSetting] = [
        NiahSetting(s.label, s.alpha_low, s.alpha_high, s.k, s.oracle, params["oracle_noise"])
        for s in default_settings(params["alpha_low"], params["alpha_high"], params["topk"], params["oracle"])
    ]
    if params["alpha_low"] > params["alpha_high"]:
        raise ConfigurationError("--alpha-low must not exceed --alpha-high")

    matrices = eval_niah(
        engine, lengths, depths, params["trials"], settings,
        noise_scale=params["noise_scale"], seed=params["seed"],
        tokens_per_frame=params["tokens_per_frame"], chunk_frames=params["chunk_frames"],
        workers=params["workers"],
    )
    out = Path(params["out"])
    for label, matrix in matrices.items():
        csv_path = write_niah_csv(matrix, str(out / f"niah_{label}.csv"))
        if params["emit_gnuplot"]:
            write_gnuplot_heatmap(str(csv_path), str(out / f"niah_{label}.gp"), f"NIAH accuracy ({label})")
        click.echo(f"{label:<16} mean accuracy {matrix.mean():.3f} -> {csv_path}")


@cli.command()
@pipeline_options
@engine_options
@click.option("--dimension", type=click.Choice(["k", "ratio"]), default="k", show_default=True)
@click.option("--values", default=None, help="k values (1,2,3) or ratio pairs (2:8,2:32); empty for none")
@click.option("--context-tokens", type=int, default=2048, show_default=True)
@click.option("--repetitions", type=int, default=5, show_default=True)
@click.option("--workers", type=int, default=WORKERS)
@click.option("--strict-timing", is_flag=True, help="Run sweep points sequentially")
@click.option("--niah-trials", type=int, default=0, help="Also measure NIAH accuracy per point")
@click.option("--out", default="sweep.csv", show_default=True)
def sweep(**params):
    """Sweep top-k or the ratio grid and write one CSV row per point."""
    engine = make_engine(params)
    config = make_config(params)
    values: Optional[list] = None
    if params["values"] is not None:
        values = _int_list(params["values"], "values") if params["dimension"] == "k" else _ratio_list(params["values"])

    records = run_sweep(
        engine, config, params["dimension"], params["context_tokens"], values,
        repetitions=params["repetitions"], workers=params["workers"],
        strict_timing=params["strict_timing"], niah_trials=params["niah_trials"],
    )
    path = write_bench_csv(records, params["out"])
    for r in records:
        click.echo(f"{r.alpha_low}x/{r.alpha_high}x k={r.k}: {r.reduction_pct:.1f}% reduction, TTFT {r.ttft_ms:.3f} ms")
    click.echo(f"Wrote {len(records)} rows to {path}")


def main():
    cli()


if __name__ == "__main__":
    main()
