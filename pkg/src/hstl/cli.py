"""``hstl`` command line: gen-data, cluster, train, embed, eval.

Logs go to stderr as one JSON object per line. Failures exit with a code per
error category: 2 config, 3 io, 4 shape, 5 numeric.
"""

from __future__ import annotations

import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from hstl.errors import ConfigError, DataError, HstlError

log = logging.getLogger("hstl")


class NdjsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        entry = {"ts": round(record.created, 3), "level": record.levelname.lower(), "logger": record.name,
                 "msg": record.getMessage()}
        entry.update(getattr(record, "fields", {}))
        return json.dumps(entry, default=str)


def _setup_logging(verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(NdjsonFormatter())
    root = logging.getLogger("hstl")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False


def _event(msg: str, **fields) -> None:
    log.info(msg, extra={"fields": fields})


def _csv(value: str | None, cast=str) -> list | None:
    if value is None:
        return None
    return [cast(v.strip()) for v in value.split(",") if v.strip()]


def _conditions(spec: str) -> tuple[tuple[str, int], ...]:
    """``NM,BG:2,CL`` -> (("NM", 6), ("BG", 2), ("CL", 2)); bare names use the usual counts."""
    defaults = {"NM": 6, "BG": 2, "CL": 2}
    out = []
    for tok in _csv(spec):
        name, _, count = tok.partition(":")
        name = name.upper()
        try:
            n = int(count) if count else defaults.get(name, 1)
        except ValueError:
            raise ConfigError(f"--conditions: bad count in {tok!r}") from None
        out.append((name, n))
    return tuple(out)


def _select(index, conditions: list[str] | None):
    """Keep sequences whose condition ("NM-01") or condition type ("NM") is listed."""
    if not conditions or conditions == ["*"]:
        return list(index.sequences)
    wanted = {c.upper() for c in conditions}
    return [s for s in index.sequences if s.condition.upper() in wanted or s.condition_type in wanted]


def _load_data(path):
    from hstl.data import load_dataset

    index = load_dataset(path)
    if len(index) == 0:
        raise DataError(f"no sequences found under {path}")
    _event("dataset loaded", path=str(path), sequences=len(index), subjects=len(index.subjects()),
           warnings=index.warnings)
    return index


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("-v", "--verbose", is_flag=True, help="Debug-level logs.")
def cli(verbose):
    """Hierarchical spatio-temporal gait recognition."""
    _setup_logging(verbose)


@cli.command("gen-data")
@click.option("--subjects", default=20, show_default=True)
@click.option("--views", default="0,36,72,108,144,180", show_default=True, help="Comma-separated degrees.")
@click.option("--conditions", default="NM,BG,CL", show_default=True,
              help="Condition types, optionally NAME:count (defaults NM 6, BG 2, CL 2).")
@click.option("--frames", default=60, show_default=True)
@click.option("--size", default="64,44", show_default=True, help="Frame height,width.")
@click.option("--noise", default=0.002, show_default=True, help="Per-pixel flip probability.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
def gen_data(subjects, views, conditions, frames, size, noise, seed, out):
    """Render a synthetic walker corpus to disk."""
    from hstl.data import CorpusSpec, synthetic_corpus, write_dataset

    h, w = _csv(size, int)
    spec = CorpusSpec(subjects=subjects, views=tuple(_csv(views, int)), conditions=_conditions(conditions),
                      frames=frames, height=h, width=w, seed=seed, noise=noise)
    t0 = time.time()
    n = write_dataset(synthetic_corpus(spec), out)
    _event("corpus written", out=out, sequences=n, seconds=round(time.time() - t0, 2))


@cli.command()
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--k", "k", default=8, show_default=True, help="Number of horizontal parts.")
@click.option("--counts", default="1,2,4,8", show_default=True, help="Group count per level.")
def cluster(data, out, k, counts):
    """Recover a part hierarchy from the motion statistics of a corpus."""
    from hstl.hierarchy import hierarchy_from_sequences, validate_hierarchy

    index = _load_data(data)
    h = hierarchy_from_sequences([s.frames for s in index.sequences], k, _csv(counts, int))
    problems = validate_hierarchy(h)
    if problems:
        raise ConfigError("recovered hierarchy is invalid: " + "; ".join(map(str, problems)))
    h.save(out)
    _event("hierarchy written", out=out, levels=[lv.to_text() for lv in h.levels])


def _run_config(config, preset_name, seed):
    from hstl.config import RunConfig, preset

    if config:
        cfg = RunConfig.load(config)
    else:
        cfg = preset(preset_name or "desk")
    if seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=seed))
    return cfg.validate()


@cli.command()
@click.option("--config", type=click.Path(dir_okay=False), help="YAML run config (may name a preset).")
@click.option("--preset", "preset_name", type=click.Choice(
    ["casia", "oumvlp", "grew", "gait3d", "desk", "desk-flat"]), help="Used when --config is absent.")
@click.option("--data", required=True, type=click.Path(file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, help="Overrides train.seed.")
@click.option("--iters", type=int, help="Desk-scale iteration override; milestones scale along.")
@click.option("--train-conditions", default="*", show_default=True,
              help="Conditions to train on, e.g. NM-01,NM-02,BG,CL.")
@click.option("--fresh", is_flag=True, help="Ignore an existing checkpoint in --out.")
def train(config, preset_name, data, out, seed, iters, train_conditions, fresh):
    """Train a model; resumes from OUT/checkpoint.pt when present."""
    from hstl.train import configure_threads, train as run_train

    cfg = _run_config(config, preset_name, seed)
    if iters is not None and iters < 1:
        raise ConfigError(f"--iters must be positive, got {iters}")
    seqs = _select(_load_data(data), _csv(train_conditions))
    if not seqs:
        raise DataError(f"no training sequences match {train_conditions!r}")
    configure_threads()
    _event("training", config_hash=cfg.config_hash(), seed=cfg.train.seed,
           iterations=iters or cfg.train.iterations, sequences=len(seqs))
    result = run_train(cfg, seqs, out_dir=out, resume=not fresh, iterations=iters)
    last = result.losses[-1] if result.losses else {}
    _event("training finished", out=out, iteration=result.iteration, **last)


@cli.command()
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--data", required=True, type=click.Path(file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Output .npz.")
@click.option("--conditions", default="*", show_default=True)
def embed(ckpt, data, out, conditions):
    """Embed every sequence of a dataset with a trained checkpoint."""
    from hstl.train import embed_sequences, load_model

    model, _ = load_model(_ckpt_file(ckpt))
    seqs = _select(_load_data(data), _csv(conditions))
    emb = embed_sequences(model, seqs)
    emb.save(out)
    _event("embeddings written", out=out, rows=len(emb), shape=list(emb.embeddings.shape))


def _ckpt_file(path) -> Path:
    p = Path(path)
    return p / "checkpoint.pt" if p.is_dir() else p


@cli.command("eval")
@click.option("--ckpt", type=click.Path(exists=True), help="Checkpoint file or training output dir.")
@click.option("--embeddings", type=click.Path(exists=True, dir_okay=False), help="Precomputed .npz instead.")
@click.option("--data", type=click.Path(file_okay=False))
@click.option("--protocol", type=click.Choice(["casia", "open"]), default="casia", show_default=True)
@click.option("--gallery", default="NM-01,NM-02,NM-03,NM-04", show_default=True,
              help="Gallery conditions; '*' for everything.")
@click.option("--probe", default="NM-05,NM-06,BG,CL", show_default=True, help="Probe conditions; '*' for everything.")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Report directory.")
@click.option("--plot/--no-plot", default=True, show_default=True, help="Write view-grid images (casia).")
def eval_cmd(ckpt, embeddings, data, protocol, gallery, probe, out, plot):
    """Score retrieval: cross-view rank-k (casia) or rank-k with mAP/mINP (open)."""
    from hstl.evaluation import EmbeddingSet, evaluate_cross_view, evaluate_open, plot_view_grid

    if embeddings:
        emb = EmbeddingSet.load(embeddings)
    elif ckpt and data:
        from hstl.train import embed_sequences, load_model

        model, _ = load_model(_ckpt_file(ckpt))
        emb = embed_sequences(model, _load_data(data).sequences)
    else:
        raise ConfigError("eval needs --embeddings or both --ckpt and --data")

    def pick(spec):
        wanted = _csv(spec)
        if wanted == ["*"]:
            return emb.select(np.ones(len(emb), dtype=bool))
        wanted = {w.upper() for w in wanted}
        return emb.select([c.upper() in wanted or c.split("-", 1)[0].upper() in wanted for c in emb.conditions])

    gal, prb = pick(gallery), pick(probe)
    if len(gal) == 0 or len(prb) == 0:
        raise DataError(f"empty split: {len(gal)} gallery and {len(prb)} probe sequences")
    report = evaluate_cross_view(prb, gal) if protocol == "casia" else evaluate_open(prb, gal)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    if plot and protocol == "casia":
        for cond in report.rank1_table:
            plot_view_grid(report, cond, out / f"rank1_{cond}.png")
    summary = {c: round(t["mean"], 4) for c, t in report.rank1_table.items()} or report.rank_k.get("all")
    _event("evaluation", out=str(out), protocol=protocol, rank1=summary, mAP=report.mAP, mINP=report.mINP)
    click.echo(json.dumps({"rank1": summary, "mAP": report.mAP, "mINP": report.mINP}))


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="hstl", standalone_mode=False)
    except HstlError as exc:
        log.error(str(exc), extra={"fields": {"category": exc.category}})
        return exc.exit_code
    except click.exceptions.Abort:
        return 130
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
