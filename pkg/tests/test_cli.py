import csv
import hashlib
from collections import Counter

import numpy as np
import pytest

from malconv import cli, corpus, explain
from malconv.checkpoint import load_checkpoint
from malconv.metrics import evaluate
from malconv.training import predict_batched, tokens_from_bytes

SMALL_MODEL = ["--max-len", "2048", "--filters", "6", "--fc-hidden", "4"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("gen-corpus", "--benign", 10, "--malicious", 10, "--seed", 7, "--min-size", 2048,
               "--max-size", 2048, "--out", d / "corpus") == 0
    assert run("train", "--manifest", d / "corpus" / "manifest.csv", "--out", d / "m.ckpt",
               "--log", d / "log.csv", "--epochs", 2, "--seed", 7, *SMALL_MODEL) == 0
    return d


def test_gen_corpus_outputs(pipeline, capsys):
    manifest = corpus.load_manifest(pipeline / "corpus" / "manifest.csv")
    assert len(manifest) == 20
    on_disk = sorted(p.name for p in (pipeline / "corpus").glob("*.exe"))
    assert on_disk == sorted(manifest.paths)
    assert int(manifest.labels.sum()) == 10


def test_gen_corpus_same_seed_same_manifest_hash(tmp_path, capsys):
    digests = []
    for name in ("a", "b"):
        assert run("gen-corpus", "--benign", 3, "--malicious", 3, "--seed", 7, "--out", tmp_path / name) == 0
        digests.append(hashlib.sha256(b"".join(
            (tmp_path / name / p).read_bytes() for p in ["manifest.csv", "motifs.csv", "malicious_00002.exe"]
        )).hexdigest())
    assert digests[0] == digests[1]
    out = capsys.readouterr().out
    assert "files: 6 (benign 3, malicious 3)" in out


def test_train_artifacts(pipeline):
    rows = read_rows(pipeline / "log.csv")
    assert rows[0] == ["epoch", "loss", "val_balanced_acc", "lr"] and len(rows) == 3
    _, config = load_checkpoint(pipeline / "m.ckpt")
    assert config.max_len == 2048 and config.filters == 6


def test_train_zero_epochs_gives_empty_log(pipeline, tmp_path):
    assert run("train", "--manifest", pipeline / "corpus" / "manifest.csv", "--out", tmp_path / "z.ckpt",
               "--log", tmp_path / "z.csv", "--epochs", 0, *SMALL_MODEL) == 0
    assert read_rows(tmp_path / "z.csv") == [["epoch", "loss", "val_balanced_acc", "lr"]]


def test_eval_matches_library(pipeline, capsys):
    assert run("eval", "--checkpoint", pipeline / "m.ckpt", "--manifest",
               pipeline / "corpus" / "manifest.csv", "--out", pipeline / "eval.csv") == 0
    params, config = load_checkpoint(pipeline / "m.ckpt")
    manifest = corpus.load_manifest(pipeline / "corpus" / "manifest.csv")
    items, _ = corpus.read_samples(manifest)
    tokens, _ = tokens_from_bytes([d for *_, d in items], config.max_len)
    report = evaluate(predict_batched(params, config, tokens), manifest.labels)
    header, values = read_rows(pipeline / "eval.csv")
    row = dict(zip(header, values))
    assert float(row["auc"]) == report.auc
    assert float(row["balanced_accuracy"]) == report.balanced_accuracy
    assert f"AUC: {report.auc:.4f}" in capsys.readouterr().out


def test_eval_single_class_manifest_is_usage_error(pipeline, tmp_path, capsys):
    src = pipeline / "corpus"
    (tmp_path / "m.csv").write_text(f"{src / 'benign_00000.exe'},0\n{src / 'benign_00001.exe'},0\n")
    assert run("eval", "--checkpoint", pipeline / "m.ckpt", "--manifest", tmp_path / "m.csv") == 2
    assert "both classes" in capsys.readouterr().err


def test_score_sorted_descending(pipeline):
    assert run("score", "--checkpoint", pipeline / "m.ckpt", "--manifest",
               pipeline / "corpus" / "manifest.csv", "--out", pipeline / "score.csv") == 0
    rows = read_rows(pipeline / "score.csv")
    assert rows[0] == ["path", "score"] and len(rows) == 21
    keys = [(-float(s), p) for p, s in rows[1:]]
    assert keys == sorted(keys)


def test_explain_manifest_table_matches_library(pipeline):
    assert run("explain", "--checkpoint", pipeline / "m.ckpt", "--manifest",
               pipeline / "corpus" / "manifest.csv", "--out", pipeline / "regions.csv",
               "--table", pipeline / "table.csv") == 0
    params, config = load_checkpoint(pipeline / "m.ckpt")
    manifest = corpus.load_manifest(pipeline / "corpus" / "manifest.csv")
    totals = Counter()
    for p in manifest.paths:
        totals.update(explain.explain_report(params, config, manifest.resolve(p))[3])
    expected = [["section", "malicious", "benign"]] + [
        [s, str(m), str(b)] for s, m, b in explain.section_table_rows(totals)]
    assert read_rows(pipeline / "table.csv") == expected
    regions = read_rows(pipeline / "regions.csv")
    assert regions[0] == ["path"] + explain.REPORT_HEADER


def test_explain_single_file(pipeline, capsys):
    target = pipeline / "corpus" / "malicious_00000.exe"
    assert run("explain", "--checkpoint", pipeline / "m.ckpt", "--file", target,
               "--out", pipeline / "one.csv") == 0
    rows = read_rows(pipeline / "one.csv")
    assert rows[0] == explain.REPORT_HEADER and 0 < len(rows) - 1 <= 6


def test_explain_needs_exactly_one_source(pipeline):
    assert run("explain", "--checkpoint", pipeline / "m.ckpt") == 2


def test_diagnose_csv(pipeline):
    assert run("diagnose", "--checkpoint", pipeline / "m.ckpt", "--manifest",
               pipeline / "corpus" / "manifest.csv", "--out", pipeline / "kde.csv",
               "--reference-out", pipeline / "ref.csv", "--cap", 500) == 0
    rows = read_rows(pipeline / "kde.csv")
    assert rows[0] == ["x", "pdf"] and len(rows) == 514
    ref = read_rows(pipeline / "ref.csv")
    assert float(ref[257][0]) == 0.0 and float(ref[257][1]) == pytest.approx(0.3989422804014327)


def test_config_file_merging(pipeline, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# desk run\nepochs = 1\nfilters = 6\nfc_hidden = 4\nmax_len = 2048\nbatch_size = 4\n")
    assert run("train", "--config", cfg, "--manifest", pipeline / "corpus" / "manifest.csv",
               "--out", tmp_path / "c.ckpt", "--log", tmp_path / "c.csv", "--epochs", 2) == 0
    assert len(read_rows(tmp_path / "c.csv")) == 3  # flag beat the file
    _, config = load_checkpoint(tmp_path / "c.ckpt")
    assert config.filters == 6


@pytest.mark.parametrize("text", ["nonsense = 1\n", "epochs = many\n", "preset = huge\n", "just a line\n", "use_batchnorm = maybe\n"])
def test_bad_config_file_is_usage_error(pipeline, tmp_path, text, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(text)
    assert run("train", "--config", cfg, "--manifest", pipeline / "corpus" / "manifest.csv",
               "--out", tmp_path / "x.ckpt") == 2
    assert "error" in capsys.readouterr().err


def test_missing_config_file_is_usage_error(tmp_path):
    assert run("gen-corpus", "--config", tmp_path / "nope.cfg", "--out", tmp_path / "c") == 2


def test_corrupt_checkpoint_exit_5(pipeline, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE" + bytes(20))
    assert run("eval", "--checkpoint", bad, "--manifest", pipeline / "corpus" / "manifest.csv") == 5


def test_missing_files_exit_3(pipeline, tmp_path):
    assert run("score", "--checkpoint", tmp_path / "absent.ckpt", "--manifest",
               pipeline / "corpus" / "manifest.csv") == 3
    assert run("eval", "--checkpoint", pipeline / "m.ckpt", "--manifest", tmp_path / "absent.csv") == 3


def test_divergence_exit_4(pipeline, tmp_path):
    with np.errstate(all="ignore"):
        code = run("train", "--manifest", pipeline / "corpus" / "manifest.csv", "--out", tmp_path / "d.ckpt",
                   "--lr", "1e30", "--epochs", 3, *SMALL_MODEL)
    assert code == 4


def test_bad_flags_exit_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--epochs", "x"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main([])
    assert exc.value.code == 2
    assert run("gen-corpus", "--benign", -1, "--out", tmp_path / "c") == 2


def test_cli_runs_are_deterministic(pipeline, tmp_path):
    logs = []
    for name in ("a", "b"):
        assert run("train", "--manifest", pipeline / "corpus" / "manifest.csv", "--out", tmp_path / f"{name}.ckpt",
                   "--log", tmp_path / f"{name}.csv", "--epochs", 1, "--seed", 3, *SMALL_MODEL) == 0
        logs.append((tmp_path / f"{name}.csv").read_bytes() + (tmp_path / f"{name}.ckpt").read_bytes())
    assert logs[0] == logs[1]
