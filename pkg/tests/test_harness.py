import csv
import json
import math
import shutil
from dataclasses import replace

import numpy as np
import pytest

from lcanetpp import audio_io, cli, harness, models, synth
from lcanetpp.errors import DataError
from lcanetpp.harness import ExperimentConfig, ResultRecord

SMALL = ["--channels", "3,4", "--lca-iters", "30", "--lr", "0.01", "--batch-size", "8"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    return synth.make_corpus(tmp_path_factory.mktemp("corpus"), n_per_class=10, seed=5,
                             noise_seconds=2)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("work")


@pytest.fixture(scope="module")
def checkpoint(corpus, workdir):
    path = workdir / "lcanet.ckpt"
    rc = cli.main(["train", "--model", "lcanet", "--data-root", str(corpus), "--epochs", "2",
                   "--checkpoint", str(path), "--out", str(workdir / "train.csv"),
                   "--cache-dir", str(workdir / "cache"), *SMALL])
    assert rc == 0
    return path


def _run(args, workdir, name, fmt="csv"):
    out = workdir / name
    rc = cli.main([*args, "--out", str(out), "--format", fmt, "--cache-dir", str(workdir / "cache")])
    return rc, (harness.read_report(out) if rc == 0 else None)


def test_train_writes_checkpoint_and_row(checkpoint, workdir):
    ck = models.load_checkpoint(checkpoint, expect_variant="lcanet")
    assert ck.metadata["classes"] == ["yes", "no", "stop"]
    assert ck.extras["norm.mean"].shape == (20,) and ck.extras["norm.std"].shape == (20,)
    assert len(ck.metadata["history"]) == 2
    (row,) = harness.read_report(workdir / "train.csv")
    assert (row.model, row.experiment, row.n) == ("lcanet", "clean", 9)


def test_eval_is_reproducible_and_cached(corpus, checkpoint, workdir):
    args = ["eval", "--data-root", str(corpus), "--checkpoint", str(checkpoint)]
    _, (a,) = _run(args, workdir, "e1.csv")
    _, (b,) = _run(args, workdir, "e2.json", "json")
    assert replace(a, runtime_s=0) == replace(b, runtime_s=0)
    (train_row,) = harness.read_report(workdir / "train.csv")
    assert a.accuracy == train_row.accuracy
    exp = harness.load_experiment(checkpoint, corpus, cache_dir=workdir / "cache")
    exp.split("test")
    assert exp.store.hits == 9 and exp.store.misses == 0


def test_background_noise_sweep(corpus, checkpoint, workdir):
    rc, rows = _run(["perturb", "--data-root", str(corpus), "--checkpoint", str(checkpoint),
                     "--snr", "15,20,24,25,inf"], workdir, "bg.csv")
    assert rc == 0
    assert [r.sweep_value for r in rows] == [15, 20, 24, 25, math.inf]
    assert {r.experiment for r in rows} == {"background_noise"}
    (clean,) = harness.read_report(workdir / "e1.csv")
    assert rows[-1].accuracy == clean.accuracy
    _, again = _run(["perturb", "--data-root", str(corpus), "--checkpoint", str(checkpoint),
                     "--snr", "15,20,24,25,inf"], workdir, "bg2.csv")
    assert [r.accuracy for r in again] == [r.accuracy for r in rows]


def test_noise_choice_does_not_depend_on_snr(corpus, checkpoint, workdir):
    """Lowering the SNR only scales the same noise crop."""
    exp = harness.load_experiment(checkpoint, corpus)
    entries = exp.index.split("test")[:2]
    clip = audio_io.read_wav(entries[0].path)
    noise = audio_io.read_wav(exp.index.noise_files[0], canonical=False)
    a = audio_io.noise_component(clip, noise, 10.0, 7)
    b = audio_io.noise_component(clip, noise, 20.0, 7)
    np.testing.assert_allclose(a, b * math.sqrt(10), rtol=1e-12)


@pytest.mark.parametrize("kind", ["fgsm", "pgd", "gaussian", "evasion"])
def test_attack_zero_epsilon_equals_clean(kind, corpus, checkpoint, workdir):
    command = "perturb" if kind == "gaussian" else "attack"
    rc, rows = _run([command, "--data-root", str(corpus), "--checkpoint", str(checkpoint),
                     "--attack", kind, "--eps", "0,0.03", "--epochs", "1", *SMALL], workdir,
                    f"{kind}.csv")
    assert rc == 0
    (clean,) = harness.read_report(workdir / "e1.csv")
    attacked = [r for r in rows if r.experiment == kind]
    assert [r.sweep_value for r in attacked] == [0.0, 0.03]
    assert attacked[0].accuracy == clean.accuracy
    if kind == "evasion":
        (sur,) = [r for r in rows if r.experiment == "evasion_surrogate"]
        assert sur.sweep_param == "queries" and sur.sweep_value == 21  # one query per train clip
        assert 0.0 <= sur.accuracy <= 1.0


def test_missing_noise_files(corpus, checkpoint, tmp_path):
    root = tmp_path / "c"
    shutil.copytree(corpus, root, ignore=shutil.ignore_patterns("_background_noise_"))
    exp = harness.load_experiment(checkpoint, root)
    with pytest.raises(DataError, match="noise"):
        harness.run_background_noise_sweep(exp, [20.0])
    assert harness.run_background_noise_sweep(exp, [math.inf])[0].n == 9


# --- exit codes ---------------------------------------------------------------------

def test_exit_codes(corpus, checkpoint, workdir, tmp_path, capsys):
    base = ["--data-root", str(corpus), "--checkpoint", str(checkpoint), "--no-cache"]
    assert cli.main(["attack", *base, "--attack", "fgsm"]) == 1
    assert cli.main(["attack", *base, "--attack", "fgsm", "--eps", "-0.1"]) == 1
    assert cli.main(["fly", *base]) == 1
    assert cli.main(["eval", *base, "--bogus"]) == 1
    assert cli.main(["eval", "--checkpoint", str(checkpoint)]) == 1
    assert cli.main(["eval", "--data-root", str(tmp_path), "--checkpoint", str(checkpoint)]) == 2
    assert cli.main(["eval", "--data-root", str(corpus), "--checkpoint", str(tmp_path / "x")]) == 2
    broken = tmp_path / "broken.ckpt"
    broken.write_bytes(checkpoint.read_bytes()[:-10])
    assert cli.main(["eval", "--data-root", str(corpus), "--checkpoint", str(broken)]) == 2
    ck = models.load_checkpoint(checkpoint)
    ck.params.tensors["fc.weight"][:] = np.nan
    nan_path = tmp_path / "nan.ckpt"
    models.save_checkpoint(ck.params, ck.spec, nan_path, ck.extras, ck.metadata)
    assert cli.main(["attack", "--data-root", str(corpus), "--checkpoint", str(nan_path),
                     "--attack", "fgsm", "--eps", "0.01", "--no-cache"]) == 3
    err = capsys.readouterr().err
    assert "usage error" in err and "data error" in err and "numeric failure" in err


def test_stdout_report_without_out(corpus, checkpoint, capsys):
    assert cli.main(["eval", "--data-root", str(corpus), "--checkpoint", str(checkpoint),
                     "--no-cache"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == ",".join(harness.REPORT_COLUMNS) and len(lines) == 2


def test_report_command_merges(workdir):
    out = workdir / "merged.json"
    assert cli.main(["report", str(workdir / "e1.csv"), str(workdir / "bg.csv"),
                     "--out", str(out), "--format", "json"]) == 0
    merged = harness.read_report(out)
    assert merged == harness.read_report(workdir / "e1.csv") + harness.read_report(workdir / "bg.csv")
    assert cli.main(["report", "--out", str(out)]) == 1


# --- reports ------------------------------------------------------------------------

REC = ResultRecord("lcanet++", "fgsm", "epsilon", 0.016, 0.41812345678, 1200, 2, 12.3456789, "abc123")


def test_csv_single_record(tmp_path):
    path = harness.emit_report([REC], "csv", tmp_path / "r.csv")
    text = path.read_text()
    assert text.endswith("\n") and text.count("\n") == 2
    header, row = text.splitlines()
    assert header == "model,experiment,sweep_param,sweep_value,accuracy,n,seed,runtime_s,config_hash"
    assert row == "lcanet++,fgsm,epsilon,0.016,0.418123,1200,2,12.3457,abc123"


def test_json_fields(tmp_path):
    path = harness.emit_report([REC, REC], "json", tmp_path / "r.json")
    text = path.read_text()
    assert text.endswith("\n")
    data = json.loads(text)
    assert isinstance(data, list) and len(data) == 2
    assert list(data[0]) == list(harness.REPORT_COLUMNS)
    assert data[0]["accuracy"] == 0.418123 and data[0]["n"] == 1200


def test_report_round_trip(tmp_path):
    recs = [REC, ResultRecord("cnn", "background_noise", "snr_db", math.inf, 1.0, 3, 0, 0.5, "h")]
    for fmt in ("csv", "json"):
        back = harness.read_report(harness.emit_report(recs, fmt, tmp_path / f"r.{fmt}"))
        for a, b in zip(recs, back):
            assert b.accuracy == float(f"{a.accuracy:.6g}")
            assert b.sweep_value == a.sweep_value
            assert (a.model, a.experiment, a.n, a.seed, a.config_hash) == \
                   (b.model, b.experiment, b.n, b.seed, b.config_hash)
    with open(tmp_path / "r.csv", newline="") as f:
        assert len(list(csv.DictReader(f))) == 2


def test_report_errors(tmp_path):
    with pytest.raises(ValueError):
        harness.emit_report([], "csv", tmp_path / "r.csv")
    with pytest.raises(ValueError):
        ResultRecord("cnn", "clean", "epsilon", 0, 1.5, 1, 0, 0, "h")
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(DataError):
        harness.read_report(tmp_path / "bad.csv")


# --- config hash --------------------------------------------------------------------

def test_config_hash_semantics(tmp_path):
    d = dict(command="attack", model="lcanet++", data_root=str(tmp_path), attack="fgsm",
             eps=(0, 0.01), seed=1, checkpoint="m.ckpt", out="a.csv", format="csv")
    base = ExperimentConfig(**d)
    shuffled = ExperimentConfig(**dict(reversed(list(d.items()))))
    assert base.config_hash() == shuffled.config_hash()
    assert base.config_hash() == ExperimentConfig(**{**d, "model": "lcanet_pp"}).config_hash()
    assert base.config_hash() == ExperimentConfig(**{**d, "out": "b.json", "format": "json"}).config_hash()
    for change in ({"seed": 2}, {"eps": (0, 0.02)}, {"lr": 0.01}, {"attack": "pgd"},
                   {"model": "cnn"}, {"lam": 0.5}, {"channels": (8, 16)}):
        assert ExperimentConfig(**{**d, **change}).config_hash() != base.config_hash(), change


def test_config_hash_tracks_checkpoint_content(tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    a.write_bytes(b"one")
    b.write_bytes(b"one")
    h = lambda p: ExperimentConfig("eval", data_root=str(tmp_path), checkpoint=str(p)).config_hash()
    assert h(a) == h(b)
    b.write_bytes(b"two")
    assert h(a) != h(b)


def test_experiment_config_validation(tmp_path):
    with pytest.raises(harness.UsageError):
        ExperimentConfig("perturb", data_root="x", checkpoint="y").validate()
    with pytest.raises(harness.UsageError):
        ExperimentConfig("perturb", data_root="x", checkpoint="y", attack="fgsm", eps=(0.1,)).validate()
    ExperimentConfig("perturb", data_root="x", checkpoint="y", snr=(20,)).validate()
    with pytest.raises(ValueError):
        ExperimentConfig("train", model="resnet")


def test_paper_grids():
    assert harness.SNR_GRID == (15, 20, 24, 25, math.inf)
    assert harness.WHITE_BOX_EPS == (0, 0.01, 0.016, 0.02, 0.03)
    assert harness.GAUSSIAN_EPS == (0, 0.01, 0.02, 0.03, 0.04, 0.05)
