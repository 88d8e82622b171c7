#!/usr/bin/env python
import csv
import logging
import sys
import traceback
from pathlib import Path
from typing import Sequence

import numpy as np
import typer
from pydantic import BaseModel

from .class_lm import NGramLM, load_arpa
from .data_api import DecodeRecord, read_jsonl, write_jsonl
from .decoder import DecoderConfig
from .embed_core import load_embeddings, save_embeddings
from .errors import ConfigurationError, DataError, EmbedMatchError
from .eval_kit import EvalReport, format_report
from .pron_lexicon import PronLexicon, VocabMode
from .recognizer import Recognizer, evaluate_records, fit_model, overlap_fraction
from .synth_corpus import CorpusFiles, CorpusSpec, generate, read_lexicon, read_split, write_corpus
from .toy_model import ModelConfig, ToyModel
from .utils__config_file import load_config
from .utils__manifest import RunManifest, write_manifest

logger = logging.getLogger(__name__)

app = typer.Typer(pretty_exceptions_enable=False, no_args_is_help=True)

CLIP_FLOOR = -20.0


class GlobalOptions(BaseModel):
    seed: int | None = None
    jobs: int = 1


def _options(ctx: typer.Context) -> GlobalOptions:
    return ctx.obj if isinstance(ctx.obj, GlobalOptions) else GlobalOptions()


@app.callback()
def main(
    ctx: typer.Context,
    seed: int | None = typer.Option(None, help="Override every seed in the loaded configs"),
    jobs: int = typer.Option(1, min=1, help="Utterances processed in parallel"),
    verbose: bool = typer.Option(False, "--verbose", "-v"),
) -> None:
    """
    Acoustic-to-word recognition by embedding matching

    Args:
        seed: Replaces the seed of corpus specs and model configs
        jobs: Worker threads; 1 is the reproducible reference
        verbose: Log at DEBUG instead of INFO
    """
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )
    ctx.obj = GlobalOptions(seed=seed, jobs=jobs)


def embeddings_path(model_path: Path) -> Path:
    return model_path.with_suffix(".emb.tsv")


def loss_path(model_path: Path) -> Path:
    return model_path.with_suffix(".loss.csv")


def load_recognizer(
    model_path: Path, lexicon: PronLexicon, lm: NGramLM | None, cfg: DecoderConfig
) -> Recognizer:
    model = ToyModel.load(model_path)
    G = load_embeddings(embeddings_path(model_path))
    if G.dim != model.cfg.dim:
        raise ConfigurationError(f"G has dimension {G.dim}, the model emits {model.cfg.dim}")
    expected = len(lexicon.prons) if model.cfg.vocab_mode is VocabMode.PRON else len(lexicon.words)
    if len(G) != expected:
        raise DataError(
            f"G has {len(G)} columns but the lexicon has {expected} {model.cfg.vocab_mode.value} entries"
        )
    return Recognizer(model, G, lexicon, lm, cfg)


@app.command("gen-corpus")
def gen_corpus(
    ctx: typer.Context,
    out: Path = typer.Option(..., help="Corpus directory to write"),
    spec: Path | None = typer.Option(None, help="Flat key = value CorpusSpec file"),
) -> None:
    """Generate a synthetic corpus, its lexicon, contact pool and LM"""
    opts = _options(ctx)
    corpus_spec = load_config(spec, CorpusSpec, seed=opts.seed)
    corpus = generate(corpus_spec)
    files = write_corpus(out, corpus)
    write_manifest(
        RunManifest(
            command="gen-corpus",
            config=corpus_spec.model_dump(mode="json"),
            seeds={"corpus": corpus_spec.seed},
            inputs=[str(spec)] if spec else [],
            outputs=[str(p) for p in files.all()],
        ),
        files.all(),
    )
    typer.echo(
        f"Wrote {len(corpus.train)} train, {len(corpus.test)} test and "
        f"{len(corpus.overlap)} overlap utterances to {out}"
    )


@app.command("train")
def train_command(
    ctx: typer.Context,
    corpus: Path = typer.Option(..., help="Corpus directory from gen-corpus"),
    out: Path = typer.Option(..., help="Model checkpoint to write"),
    mode: VocabMode | None = typer.Option(None, help="G column per word (orth) or per pron, default pron"),
    k: int | None = typer.Option(None, min=1, max=3, help="Embeddings emitted per frame, default 1"),
    config: Path | None = typer.Option(None, help="Flat key = value ModelConfig file"),
    epochs: int | None = typer.Option(None, min=1),
) -> None:
    """Train the toy model against a frozen G; writes the checkpoint, G and the loss curve"""
    opts = _options(ctx)
    files = CorpusFiles(corpus)
    lexicon = read_lexicon(files)
    utterances = read_split(files, "train")
    feature_dim = utterances[0].frame_array.shape[1] if utterances else None
    cfg = load_config(
        config,
        ModelConfig,
        k=k,
        vocab_mode=mode,
        epochs=epochs,
        feature_dim=feature_dim,
        seed=opts.seed,
        encoder_seed=opts.seed,
    )
    model, G, report = fit_model(lexicon, utterances, cfg, opts.jobs)
    model.save(out)
    save_embeddings(embeddings_path(out), G)
    with open(loss_path(out), "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "loss"])
        for epoch, loss in enumerate(report.epoch_losses, start=1):
            writer.writerow([epoch, "%.10g" % loss])
    outputs = [out, embeddings_path(out), loss_path(out)]
    write_manifest(
        RunManifest(
            command="train",
            config=cfg.model_dump(mode="json"),
            seeds={"model": cfg.seed, "encoder": cfg.encoder_seed},
            inputs=[str(files.lexicon), str(files.split("train"))] + ([str(config)] if config else []),
            outputs=[str(p) for p in outputs],
        ),
        outputs,
    )
    typer.echo(f"Parameters: {report.parameter_count}")
    typer.echo(f"Final loss: {report.epoch_losses[-1]:.4f}")
    if report.skipped_utterances:
        typer.echo(f"Skipped {len(report.skipped_utterances)} utterances too short for CTC", err=True)


@app.command("decode")
def decode_command(
    ctx: typer.Context,
    model: Path = typer.Option(..., help="Checkpoint from train"),
    corpus: Path = typer.Option(..., help="Corpus directory"),
    out: Path = typer.Option(..., help="Hypotheses JSONL to write"),
    split: str = typer.Option("test", help="Which corpus split to decode"),
    lm: Path | None = typer.Option(None, help="ARPA LM (default: the corpus lm.arpa)"),
    no_lm: bool = typer.Option(False, "--no-lm", help="Decode without a language model"),
    lm_scale: float | None = typer.Option(None, help="LM weight"),
    blank_div: float | None = typer.Option(None, help="Blank posterior divisor (>= 1)"),
    beam: int | None = typer.Option(None, min=1, help="Beam width"),
    top_k: int | None = typer.Option(None, min=1, help="Words kept per frame"),
    config: Path | None = typer.Option(None, help="Flat key = value DecoderConfig file"),
) -> None:
    """Decode a corpus split, extending G with each utterance's contacts"""
    opts = _options(ctx)
    files = CorpusFiles(corpus)
    cfg = load_config(
        config,
        DecoderConfig,
        lm_scale=lm_scale,
        blank_divisor=blank_div,
        beam_width=beam,
        top_k_posteriors=top_k,
    )
    lm_path = None if no_lm else (lm or files.lm)
    language_model = load_arpa(lm_path) if lm_path is not None else None
    lexicon = read_lexicon(files)
    recognizer = load_recognizer(model, lexicon, language_model, cfg)
    records = recognizer.recognize_all(read_split(files, split), opts.jobs)
    write_jsonl(out, records)
    write_manifest(
        RunManifest(
            command="decode",
            config=cfg.model_dump(mode="json"),
            inputs=[str(model), str(files.split(split))] + ([str(lm_path)] if lm_path else []),
            outputs=[str(out)],
        ),
        [out],
    )
    failed = sum(1 for r in records if r.error is not None)
    typer.echo(f"Decoded {len(records)} utterances ({failed} failed) to {out}")


@app.command("eval")
def eval_command(
    ref: Path = typer.Option(..., help="Corpus directory holding the references"),
    hyp: Path = typer.Option(..., help="Hypotheses JSONL from decode"),
    split: str = typer.Option("test"),
    out: Path | None = typer.Option(None, help="Also write the report as JSON"),
) -> None:
    """Print WER and NEER of a hypotheses file"""
    refs = read_split(CorpusFiles(ref), split)
    report = evaluate_records(refs, read_jsonl(hyp, DecodeRecord))
    typer.echo(format_report(report))
    if out is not None:
        out.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
        write_manifest(
            RunManifest(command="eval", inputs=[str(ref), str(hyp)], outputs=[str(out)]),
            [out],
        )


def _column_names(recognizer: Recognizer, labels: Sequence[int], lexicon: PronLexicon) -> list[str]:
    if recognizer.mode is VocabMode.ORTH:
        return [lexicon.orth(label) for label in labels]
    return [
        "|".join(lexicon.orth(w) for w in lexicon.pron_to_words[label]) + f"[{label}]"
        for label in labels
    ]


@app.command("score-grid")
def score_grid(
    model: Path = typer.Option(..., help="Checkpoint from train"),
    corpus: Path = typer.Option(..., help="Corpus directory"),
    utterance: str = typer.Option(..., help="Utterance id"),
    out: Path = typer.Option(..., help="CSV to write"),
    split: str = typer.Option("test"),
    clip: bool = typer.Option(False, help=f"Leave cells below {CLIP_FLOOR:g} empty"),
) -> None:
    """Dump the frames x (blank + columns) log-posterior matrix of one utterance"""
    files = CorpusFiles(corpus)
    lexicon = read_lexicon(files)
    matches = [u for u in read_split(files, split) if u.id == utterance]
    if not matches:
        raise DataError(f"Utterance {utterance!r} not found in {files.split(split)}")
    recognizer = load_recognizer(model, lexicon, None, DecoderConfig())
    vocab = recognizer.vocab_for(matches[0].contacts)
    log_posteriors = recognizer.model.log_posteriors(matches[0].frame_array, vocab.G)
    header = ["frame", "<blank>", *_column_names(recognizer, vocab.G.labels, vocab.lexicon)]
    with open(out, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for t, row in enumerate(log_posteriors):
            writer.writerow(
                [t, *("" if clip and v < CLIP_FLOOR else "%.10g" % v for v in row)]
            )
    write_manifest(
        RunManifest(
            command="score-grid",
            config={"utterance": utterance, "split": split, "clip": clip},
            inputs=[str(model), str(files.split(split))],
            outputs=[str(out)],
        ),
        [out],
    )
    typer.echo(f"Wrote {log_posteriors.shape[0]} x {log_posteriors.shape[1]} grid to {out}")


@app.command("overlap-check")
def overlap_check_command(
    model: Path = typer.Option(..., help="Checkpoint from train"),
    corpus: Path = typer.Option(..., help="Corpus directory"),
    threshold: float = typer.Option(-3.0, help="Log posterior a word must reach"),
) -> None:
    """Fraction of prefix-ambiguous utterances where both words score high"""
    files = CorpusFiles(corpus)
    recognizer = load_recognizer(model, read_lexicon(files), None, DecoderConfig())
    passed, checked = overlap_fraction(recognizer, read_split(files, "overlap"), threshold)
    fraction = passed / checked if checked else 0.0
    typer.echo(f"Overlap check passed {passed}/{checked} ({fraction:.1%})")


class SystemResult(BaseModel):
    system: str
    mode: VocabMode
    k: int
    size: int
    wer: list[float] = []
    neer: list[float | None] = []
    overlap: list[float | None] = []
    g_frozen: bool = True

    @staticmethod
    def mean(values: Sequence[float | None]) -> float | None:
        present = [v for v in values if v is not None]
        return float(np.mean(present)) if present else None


class ExperimentResults(BaseModel):
    seeds: list[int]
    systems: list[SystemResult]


def _format_results(results: Sequence[SystemResult]) -> str:
    rows = [("System", "Size", "WER", "NEER", "Overlap")]
    for r in results:
        cells = [SystemResult.mean(r.wer), SystemResult.mean(r.neer), SystemResult.mean(r.overlap)]
        rows.append(
            (
                r.system,
                str(r.size),
                *("n/a" if c is None else f"{c:.2f}" for c in cells[:2]),
                "n/a" if cells[2] is None else f"{cells[2]:.0%}",
            )
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)) for row in rows)


@app.command("experiment")
def experiment(
    ctx: typer.Context,
    spec: Path | None = typer.Option(
        None, help="Flat key = value file with corpus, model and decoder settings"
    ),
    seeds: str = typer.Option("0,1,2", help="Comma separated corpus/model seeds"),
    out: Path | None = typer.Option(None, help="Also write the results as JSON"),
) -> None:
    """Train and decode every Word-orth/pron-K system and compare WER, NEER and size"""
    opts = _options(ctx)
    try:
        seed_list = [int(s) for s in seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigurationError(f"--seeds must be comma separated integers, got {seeds!r}") from None
    if not seed_list:
        raise ConfigurationError("--seeds is empty")
    corpus_spec = load_config(spec, CorpusSpec)
    model_cfg = load_config(spec, ModelConfig, feature_dim=corpus_spec.feature_dim)
    decoder_cfg = load_config(spec, DecoderConfig)

    results: dict[tuple[VocabMode, int], SystemResult] = {}
    for seed in seed_list:
        corpus = generate(corpus_spec.model_copy(update={"seed": seed}))
        for mode in (VocabMode.ORTH, VocabMode.PRON):
            for k in (1, 2, 3):
                cfg = model_cfg.model_copy(
                    update={"k": k, "vocab_mode": mode, "seed": seed, "encoder_seed": seed}
                )
                model, G, report = fit_model(corpus.lexicon, corpus.train, cfg, opts.jobs)
                recognizer = Recognizer(model, G, corpus.lexicon, corpus.lm, decoder_cfg)
                evaluation: EvalReport = evaluate_records(
                    corpus.test, recognizer.recognize_all(corpus.test, opts.jobs)
                )
                passed, checked = overlap_fraction(recognizer, corpus.overlap)
                result = results.setdefault(
                    (mode, k),
                    SystemResult(system=f"Word-{mode.value}-{k}", mode=mode, k=k, size=report.parameter_count),
                )
                result.wer.append(evaluation.wer)
                result.neer.append(evaluation.neer)
                result.overlap.append(passed / checked if checked else None)
                result.g_frozen &= report.g_checksum_before == report.g_checksum_after
                logger.info("seed %d %s: WER %.2f", seed, result.system, evaluation.wer)

    ordered = list(results.values())
    typer.echo(_format_results(ordered))
    if out is not None:
        summary = ExperimentResults(seeds=seed_list, systems=ordered)
        out.write_text(summary.model_dump_json(indent=2) + "\n", encoding="utf-8")
        write_manifest(
            RunManifest(
                command="experiment",
                config={
                    "corpus": corpus_spec.model_dump(mode="json"),
                    "model": model_cfg.model_dump(mode="json"),
                    "decoder": decoder_cfg.model_dump(mode="json"),
                },
                seeds={f"run{i}": s for i, s in enumerate(seed_list)},
                inputs=[str(spec)] if spec else [],
                outputs=[str(out)],
            ),
            [out],
        )


USAGE_EXIT_STATUS = 2


def run(argv: Sequence[str] | None = None) -> int:
    """Console entry point; returns the process exit code.

    Typer reports bad usage itself and exits with status 2, which maps to 1 here.
    """
    try:
        app(args=list(argv) if argv is not None else None, prog_name="a2w")
    except SystemExit as e:
        if e.code is None:
            return 0
        if not isinstance(e.code, int):
            typer.echo(str(e.code), err=True)
            return 1
        return 1 if e.code == USAGE_EXIT_STATUS else e.code
    except EmbedMatchError as e:
        typer.echo(f"a2w: {type(e).__name__}: {e}", err=True)
        return e.exit_code
    except Exception:
        traceback.print_exc()
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(run())
