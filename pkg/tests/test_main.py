import csv
import json
import math

import pytest
from typer.testing import CliRunner

from embedmatch.main import app, embeddings_path, loss_path, run
from embedmatch.pron_lexicon import VocabMode
from embedmatch.synth_corpus import CorpusFiles
from embedmatch.toy_model import ToyModel
from embedmatch.utils__manifest import manifest_path

runner = CliRunner()

MODEL_CONFIG = "dim = 6\nhidden = 12\ncontext = 1\nepochs = 2\nbatch_size = 8\nlearning_rate = 0.05\n"


def flat_spec(spec) -> str:
    lines = []
    for key, value in spec.model_dump().items():
        if isinstance(value, tuple):
            value = f"{value[0]}..{value[1]}"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


@pytest.fixture(scope="module")
def workdir(tmp_path_factory, tiny_spec):
    root = tmp_path_factory.mktemp("pipeline")
    (root / "spec.conf").write_text(flat_spec(tiny_spec))
    (root / "model.conf").write_text(MODEL_CONFIG)
    assert run(["gen-corpus", "--out", str(root / "corpus"), "--spec", str(root / "spec.conf")]) == 0
    train_args = ["--corpus", str(root / "corpus"), "--config", str(root / "model.conf"), "--k", "2"]
    assert run(["train", *train_args, "--out", str(root / "model.bin")]) == 0
    decode_args = ["--model", str(root / "model.bin"), "--corpus", str(root / "corpus"), "--beam", "4"]
    assert run(["decode", *decode_args, "--out", str(root / "hyp.jsonl")]) == 0
    return root


def test_gen_corpus_writes_every_file(workdir):
    for path in CorpusFiles(workdir / "corpus").all():
        assert path.exists(), path.name
        assert manifest_path(path).exists()


def test_train_writes_model_g_and_loss_curve(workdir):
    model = workdir / "model.bin"
    assert embeddings_path(model).exists()
    rows = list(csv.reader(loss_path(model).open()))
    assert rows[0] == ["epoch", "loss"]
    assert [int(r[0]) for r in rows[1:]] == [1, 2]
    assert all(math.isfinite(float(r[1])) for r in rows[1:])


def test_train_reports_parameters(workdir, tmp_path):
    args = ["train", "--corpus", str(workdir / "corpus"), "--config", str(workdir / "model.conf")]
    result = runner.invoke(app, [*args, "--out", str(tmp_path / "m.bin")])
    assert result.exit_code == 0, result.output
    assert "Parameters: " in result.output
    assert "Final loss: " in result.output


def test_decode_writes_one_record_per_utterance(workdir):
    lines = (workdir / "hyp.jsonl").read_text().splitlines()
    references = (workdir / "corpus" / "test.jsonl").read_text().splitlines()
    assert [json.loads(line)["id"] for line in lines] == [json.loads(line)["id"] for line in references]


def test_eval_prints_and_writes_the_report(workdir, tmp_path):
    out = tmp_path / "report.json"
    args = ["eval", "--ref", str(workdir / "corpus"), "--hyp", str(workdir / "hyp.jsonl"), "--out", str(out)]
    result = runner.invoke(app, args)
    assert result.exit_code == 0, result.output
    assert "WER (%)" in result.output
    report = json.loads(out.read_text())
    assert report["utterances"] == 8
    assert report["wer"] >= 0


def test_pipeline_is_byte_reproducible(workdir, tmp_path):
    spec = str(workdir / "spec.conf")
    assert run(["gen-corpus", "--out", str(tmp_path / "corpus"), "--spec", spec]) == 0
    for left, right in zip(CorpusFiles(workdir / "corpus").all(), CorpusFiles(tmp_path / "corpus").all()):
        assert left.read_bytes() == right.read_bytes(), left.name
    train_args = ["--corpus", str(tmp_path / "corpus"), "--config", str(workdir / "model.conf"), "--k", "2"]
    assert run(["train", *train_args, "--out", str(tmp_path / "model.bin")]) == 0
    assert (tmp_path / "model.bin").read_bytes() == (workdir / "model.bin").read_bytes()
    decode_args = ["--model", str(tmp_path / "model.bin"), "--corpus", str(tmp_path / "corpus"), "--beam", "4"]
    assert run(["--jobs", "2", "decode", *decode_args, "--out", str(tmp_path / "hyp.jsonl")]) == 0
    assert (tmp_path / "hyp.jsonl").read_bytes() == (workdir / "hyp.jsonl").read_bytes()


def test_seed_option_changes_the_corpus(workdir, tmp_path):
    args = ["--seed", "11", "gen-corpus", "--out", str(tmp_path / "corpus"), "--spec", str(workdir / "spec.conf")]
    assert run(args) == 0
    written = json.loads(manifest_path(tmp_path / "corpus" / "lm.arpa").read_text())
    assert written["manifest"]["seeds"] == {"corpus": 11}
    assert (tmp_path / "corpus" / "train.jsonl").read_bytes() != (workdir / "corpus" / "train.jsonl").read_bytes()


def test_score_grid_rows_are_distributions(workdir, tmp_path):
    out = tmp_path / "grid.csv"
    args = ["score-grid", "--model", str(workdir / "model.bin"), "--corpus", str(workdir / "corpus")]
    assert run([*args, "--utterance", "test-00000", "--out", str(out)]) == 0
    rows = list(csv.reader(out.open()))
    assert rows[0][:2] == ["frame", "<blank>"]
    for t, row in enumerate(rows[1:]):
        assert int(row[0]) == t
        assert sum(math.exp(float(v)) for v in row[1:]) == pytest.approx(1.0, abs=1e-6)


def test_score_grid_clipping_leaves_cells_empty(workdir, tmp_path):
    out = tmp_path / "grid.csv"
    args = ["score-grid", "--model", str(workdir / "model.bin"), "--corpus", str(workdir / "corpus")]
    assert run([*args, "--utterance", "test-00000", "--out", str(out), "--clip"]) == 0
    for row in list(csv.reader(out.open()))[1:]:
        assert all(v == "" or float(v) >= -20.0 for v in row[1:])


def test_unknown_utterance_is_a_data_error(workdir, tmp_path):
    args = ["score-grid", "--model", str(workdir / "model.bin"), "--corpus", str(workdir / "corpus")]
    assert run([*args, "--utterance", "nope", "--out", str(tmp_path / "g.csv")]) == 2


def test_eval_rejects_hypotheses_for_unknown_utterances(workdir, tmp_path):
    hyp = tmp_path / "hyp.jsonl"
    hyp.write_text((workdir / "hyp.jsonl").read_text() + '{"id": "ghost"}\n')
    assert run(["eval", "--ref", str(workdir / "corpus"), "--hyp", str(hyp)]) == 2


def test_invalid_spec_is_a_configuration_error(tmp_path):
    spec = tmp_path / "bad.conf"
    spec.write_text("vocab_size = 0\n")
    assert run(["gen-corpus", "--out", str(tmp_path / "corpus"), "--spec", str(spec)]) == 1


def test_missing_model_is_a_data_error(workdir, tmp_path):
    args = ["decode", "--model", str(tmp_path / "absent.bin"), "--corpus", str(workdir / "corpus")]
    assert run([*args, "--out", str(tmp_path / "hyp.jsonl")]) == 2


def test_blank_divisor_below_one_is_rejected(workdir, tmp_path):
    args = ["decode", "--model", str(workdir / "model.bin"), "--corpus", str(workdir / "corpus")]
    assert run([*args, "--out", str(tmp_path / "hyp.jsonl"), "--blank-div", "0.5"]) == 1


def test_unknown_option_is_a_usage_error():
    assert run(["eval", "--bogus"]) == 1


def test_overlap_check_command(workdir):
    args = ["overlap-check", "--model", str(workdir / "model.bin"), "--corpus", str(workdir / "corpus")]
    result = runner.invoke(app, args)
    assert result.exit_code == 0, result.output
    assert "/4 (" in result.output


def test_experiment_reports_every_system(workdir, tmp_path):
    spec = tmp_path / "experiment.conf"
    spec.write_text((workdir / "spec.conf").read_text() + "dim = 6\nhidden = 8\ncontext = 1\nepochs = 1\n")
    out = tmp_path / "results.json"
    result = runner.invoke(app, ["experiment", "--spec", str(spec), "--seeds", "5", "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert "Word-pron-3" in result.output
    systems = json.loads(out.read_text())["systems"]
    assert [s["system"] for s in systems] == [f"Word-{m}-{k}" for m in ("orth", "pron") for k in (1, 2, 3)]
    assert all(s["g_frozen"] for s in systems)
    sizes = {s["k"]: s["size"] for s in systems if s["mode"] == "pron"}
    assert sizes[2] - sizes[1] == sizes[3] - sizes[2] == 8 * 6 + 6


def test_experiment_rejects_bad_seeds():
    assert run(["experiment", "--seeds", "a,b"]) == 1


def test_help_exits_cleanly():
    assert run(["--help"]) == 0


def test_missing_required_option_is_a_usage_error(tmp_path):
    assert run(["train", "--out", str(tmp_path / "m.bin")]) == 1


def test_config_file_sets_k_and_mode(workdir, tmp_path):
    config = tmp_path / "model.conf"
    config.write_text(MODEL_CONFIG + "k = 3\nvocab_mode = orth\n")
    out = tmp_path / "m.bin"
    assert run(["train", "--corpus", str(workdir / "corpus"), "--config", str(config), "--out", str(out)]) == 0
    model = ToyModel.load(out)
    assert model.cfg.k == 3
    assert model.cfg.vocab_mode is VocabMode.ORTH


def test_options_override_the_config_file(workdir, tmp_path):
    config = tmp_path / "model.conf"
    config.write_text(MODEL_CONFIG + "k = 3\n")
    out = tmp_path / "m.bin"
    args = ["train", "--corpus", str(workdir / "corpus"), "--config", str(config), "--k", "2"]
    assert run([*args, "--out", str(out)]) == 0
    assert ToyModel.load(out).cfg.k == 2


def test_truncated_model_is_a_data_error(workdir, tmp_path):
    model = tmp_path / "model.bin"
    model.write_bytes((workdir / "model.bin").read_bytes()[:-16])
    embeddings_path(model).write_bytes(embeddings_path(workdir / "model.bin").read_bytes())
    args = ["decode", "--model", str(model), "--corpus", str(workdir / "corpus")]
    assert run([*args, "--out", str(tmp_path / "hyp.jsonl")]) == 2
