import csv
import json
import shlex
import struct
import sys
from pathlib import Path

import numpy as np
import pytest

import dicomgen
from mammoscreen import cli, imageops
from mammoscreen.classifiers import LogisticModel
from mammoscreen.classifiers import artifact as art
from mammoscreen.config import Imbalance, ModelKind, RunConfig, dump_config, load_config
from mammoscreen.dataset import load_features, load_metadata
from mammoscreen.errors import ConfigError
from mammoscreen.synth import SynthConfig, generate

FAKE_DECODER = r'''
import struct, sys
data = open(sys.argv[1], "rb").read()
if data[:4] != b"FAKE":
    sys.exit("not a fake codestream")
rows, cols = struct.unpack_from("<HH", data, 4)
pixels = data[8 : 8 + rows * cols]
with open(sys.argv[2], "wb") as fh:
    fh.write(b"P5\n%d %d\n255\n" % (cols, rows) + pixels)
'''


def fake_codestream(rows, cols, pixels: bytes) -> bytes:
    return b"FAKE" + struct.pack("<HH", rows, cols) + pixels


@pytest.fixture
def decoder(tmp_path, monkeypatch):
    script = tmp_path / "fake_decoder.py"
    script.write_text(FAKE_DECODER)
    template = f"{shlex.quote(sys.executable)} {shlex.quote(str(script))} {{input}} {{output}}"
    monkeypatch.setenv(cli.DECODER_ENV, template)
    return template


# config


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("[run]\nseed = 4\nmodel = svm\nC = 2.5\nclass_weights = 1,3\n")
    cfg = load_config(path, ["C=0.5", "degree=2"])
    assert (cfg.seed, cfg.model, cfg.C, cfg.degree, cfg.class_weights) == (4, ModelKind.SVM, 0.5, 2, (1.0, 3.0))
    again = tmp_path / "again.cfg"
    again.write_text(dump_config(cfg))
    assert load_config(again) == cfg


@pytest.mark.parametrize(
    "overrides",
    [
        ["imbalance=sbs", "class_weights=1,2", "model=dnn"],
        ["imbalance=sbs", "class_weights=auto", "model=dnn"],
        ["imbalance=smote", "class_weights=1,2"],
        ["imbalance=sbs", "model=lr"],
        ["bogus=1"],
        ["C=abc"],
        ["val_fraction=1.5"],
        ["seed"],
    ],
)
def test_config_conflicts_rejected(overrides):
    with pytest.raises(ConfigError):
        load_config(None, overrides)


def test_config_rejects_foreign_sections(tmp_path):
    path = tmp_path / "x.cfg"
    path.write_text("[other]\nseed = 1\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_seed_required():
    with pytest.raises(ConfigError):
        RunConfig().require_seed()
    assert RunConfig(seed=0, imbalance=Imbalance.NONE).require_seed() == 0


def test_model_default_learning_rates():
    assert RunConfig(model=ModelKind.DNN).adam_lr() == 3e-4
    assert RunConfig(model=ModelKind.LR).adam_lr() == 0.05
    assert RunConfig(lr=0.1).adam_lr() == 0.1


# synth


def test_synth_counts_and_determinism():
    cfg = SynthConfig(seed=11)
    assert cfg.n_positive == 115
    records, table = generate(cfg)
    assert sum(r.cancer for r in records) == 115
    assert len(records) == len(table) == 5470
    again = generate(cfg)[1]
    np.testing.assert_array_equal(table.vectors, again.vectors)
    # Patients hold up to four views with one age and implant flag each.
    by_patient = {}
    for r in records:
        by_patient.setdefault(r.patient_id, set()).add((r.age, r.implant))
    assert all(len(v) == 1 for v in by_patient.values())


def test_synth_command_files_identical(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["synth", str(tmp_path / name), "--set", "seed=2", "--set", "n=200"]) == 0
    for f in ("metadata.csv", "features.mmfv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert len(load_metadata(tmp_path / "a" / "metadata.csv")) == 200
    assert len(load_features(tmp_path / "a" / "features.mmfv")) == 200


def test_synth_requires_seed(tmp_path, capsys):
    assert cli.main(["synth", str(tmp_path)]) == 2
    assert "seed" in capsys.readouterr().err


# convert / preprocess


def write_native(path, seed, photometric="MONOCHROME2", rows=6, cols=5):
    pixels = np.random.default_rng(seed).integers(0, 4096, size=(rows, cols), dtype=np.uint16)
    blob = dicomgen.native_file(pixels.astype("<u2").tobytes(), rows=rows, columns=cols, bits_allocated=16,
                                bits_stored=12, photometric=photometric)
    path.write_bytes(blob)
    return pixels


def test_convert_native_fixtures(tmp_path, capsys):
    src, out = tmp_path / "in", tmp_path / "out"
    src.mkdir()
    expected = {f"img{i}": write_native(src / f"img{i}.dcm", i) for i in range(3)}
    assert cli.main(["convert", str(src), str(out)]) == 0
    assert "3 ok, 0 failed" in capsys.readouterr().out
    for name, pixels in expected.items():
        values, maxval = imageops.read_pgm(out / f"{name}.pgm")
        assert maxval == 4095
        np.testing.assert_array_equal(values, pixels)
        sidecar = json.loads((out / f"{name}.json").read_text())
        assert sidecar["photometric"] == "MONOCHROME2" and sidecar["bits_stored"] == 12


def test_convert_partial_failure(tmp_path, capsys, caplog):
    src = tmp_path / "in"
    src.mkdir()
    for i in range(2):
        write_native(src / f"ok{i}.dcm", i)
    (src / "bad.dcm").write_bytes(b"\0" * 128 + b"DICM" + b"\x02\x00")
    assert cli.main(["convert", str(src), str(tmp_path / "out")]) == 1
    assert "2 ok, 1 failed" in capsys.readouterr().out
    assert any("bad.dcm" in r.getMessage() and r.levelname == "ERROR" for r in caplog.records)


def test_convert_empty_directory(tmp_path, capsys):
    (tmp_path / "in").mkdir()
    assert cli.main(["convert", str(tmp_path / "in"), str(tmp_path / "out")]) == 0
    assert "0 ok, 0 failed" in capsys.readouterr().out


def test_convert_encapsulated_via_external_decoder(tmp_path, decoder, capsys):
    src = tmp_path / "in"
    src.mkdir()
    pixels = bytes(range(0, 240, 10))
    stream = fake_codestream(4, 6, pixels)
    (src / "j2k.dcm").write_bytes(
        dicomgen.encapsulated_file([stream[:10], stream[10:]], offsets=[0], rows=4, columns=6,
                                   photometric="MONOCHROME1")
    )
    assert cli.main(["convert", str(src), str(tmp_path / "out")]) == 0
    values, maxval = imageops.read_pgm(tmp_path / "out" / "j2k.pgm")
    assert maxval == 255
    np.testing.assert_array_equal(values, np.frombuffer(pixels, np.uint8).reshape(4, 6))
    assert json.loads((tmp_path / "out" / "j2k.json").read_text())["photometric"] == "MONOCHROME1"


def test_convert_encapsulated_without_decoder_fails(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv(cli.DECODER_ENV, raising=False)
    src = tmp_path / "in"
    src.mkdir()
    (src / "j2k.dcm").write_bytes(dicomgen.encapsulated_file([b"\xff\x4f\xff\x51"]))
    assert cli.main(["convert", str(src), str(tmp_path / "out")]) == 1
    assert "0 ok, 1 failed" in capsys.readouterr().out


def test_preprocess_batch(tmp_path, capsys):
    src, conv, pre = tmp_path / "in", tmp_path / "conv", tmp_path / "pre"
    src.mkdir()
    write_native(src / "a.dcm", 0, "MONOCHROME1")
    write_native(src / "b.dcm", 1)
    write_native(src / "c.dcm", 2, rows=700, cols=600)
    assert cli.main(["convert", str(src), str(conv)]) == 0
    assert cli.main(["preprocess", str(conv), str(pre)]) == 0
    assert "3 ok, 0 failed" in capsys.readouterr().out
    for name in "abc":
        values, maxval = imageops.read_pgm(pre / f"{name}.pgm")
        assert values.shape == (512, 512) and maxval == 65535
    # MONOCHROME1 is inverted: the brightest stored pixel becomes the darkest output.
    raw, _ = imageops.read_pgm(conv / "a.pgm")
    small = imageops.preprocess(raw, "MONOCHROME1", (raw.shape[0], raw.shape[1]))
    assert small[np.unravel_index(raw.argmax(), raw.shape)] == 0.0


def test_preprocess_partial_and_empty(tmp_path, capsys):
    src = tmp_path / "conv"
    src.mkdir()
    imageops.write_pgm(src / "orphan.pgm", np.zeros((2, 2), np.uint16), 255)
    assert cli.main(["preprocess", str(src), str(tmp_path / "o")]) == 1
    assert "0 ok, 1 failed" in capsys.readouterr().out
    (tmp_path / "empty").mkdir()
    assert cli.main(["preprocess", str(tmp_path / "empty"), str(tmp_path / "o2")]) == 0


# train / evaluate / report / predict


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    assert cli.main(["synth", str(root / "data"), "--set", "seed=5", "--set", "n=800", "--set", "separation=3"]) == 0
    return root


def train_args(corpus, kind, out, *extra):
    return [
        "train", "--set", "seed=5", "--set", f"model={kind}", "--set", f"metadata={corpus / 'data/metadata.csv'}",
        "--set", f"features={corpus / 'data/features.mmfv'}", "--set", f"output={out}", "--set", "max_iters=120",
        *extra,
    ]


@pytest.fixture(scope="module")
def trained(corpus):
    runs = {}
    for kind in ("lr", "svm", "dnn"):
        out = corpus / f"run_{kind}"
        assert cli.main(train_args(corpus, kind, out, "--set", "lr=0.003" if kind == "dnn" else "lr=auto")) == 0
        runs[kind] = out
    return runs


def test_train_outputs(trained):
    for kind, out in trained.items():
        rows = list(csv.reader((out / "history.csv").open()))
        assert rows[0] == ["iteration", "train_loss", "val_loss"]
        assert len(rows) - 1 == 120
        provenance = json.loads((out / "provenance.json").read_text())
        assert provenance["config"]["model"] == kind
        assert provenance["iterations"] == 120
        assert len(provenance["inputs"]["features"]) == 64
    dnn_rows = list(csv.reader((trained["dnn"] / "history.csv").open()))
    assert dnn_rows[10][2] != "" and dnn_rows[9][2] == ""


def test_train_rejects_conflicting_modes(corpus, capsys):
    args = train_args(corpus, "dnn", corpus / "never", "--set", "imbalance=sbs", "--set", "class_weights=1,5")
    assert cli.main(args) == 2
    assert not (corpus / "never").exists()


@pytest.mark.parametrize("mode", ["sbs", "none", "undersample", "oversample", "smote"])
def test_train_imbalance_modes_run(corpus, tmp_path, mode):
    kind = "dnn" if mode == "sbs" else "lr"
    args = train_args(corpus, kind, tmp_path / mode, "--set", f"imbalance={mode}", "--set", "max_iters=20")
    assert cli.main(args) == 0
    assert (tmp_path / mode / "model.mmsa").exists()


def read_csv(text):
    return list(csv.DictReader(text.strip().split("\n")))


def test_evaluate_and_report(trained, capsys):
    assert cli.main(["evaluate", str(trained["lr"] / "model.mmsa")]) == 0
    rows = read_csv(capsys.readouterr().out)
    assert len(rows) == 1 and float(rows[0]["auroc"]) > 0.9
    n_val = int(rows[0]["n"])
    assert n_val == sum(int(rows[0][k]) for k in ("tp", "fp", "tn", "fn"))
    assert cli.main(["report"] + [str(trained[k] / "model.mmsa") for k in ("lr", "svm", "dnn")]) == 0
    table = read_csv(capsys.readouterr().out)
    assert [r["model"] for r in table] == ["run_lr/model", "run_svm/model", "run_dnn/model"]
    assert all(int(r["n"]) == n_val for r in table)


def test_evaluate_perfect_synthetic_set(tmp_path, capsys):
    # Every image coordinate is shifted by 25 for positives, so summing the image
    # features separates the classes by thousands of logits and saturates the sigmoid.
    data = tmp_path / "data"
    assert cli.main(["synth", str(data), "--set", "seed=1", "--set", "n=400", "--set", "separation=25",
                     "--set", "informative=1000"]) == 0
    w = np.r_[np.ones(1000), 0.0, 0.0]
    model = LogisticModel(w, -12500.0)
    art.save(tmp_path / "perfect.mmsa", art.ModelArtifact("lr", model, {}, 1))
    capsys.readouterr()
    assert cli.main(["evaluate", str(tmp_path / "perfect.mmsa"), "--split", "all",
                     "--metadata", str(data / "metadata.csv"), "--features", str(data / "features.mmfv")]) == 0
    row = read_csv(capsys.readouterr().out)[0]
    assert float(row["pf1"]) == 1.0
    assert int(row["n"]) == 400 and int(row["fp"]) == int(row["fn"]) == 0


def test_evaluate_unknown_version(trained, tmp_path, capsys):
    blob = bytearray((trained["lr"] / "model.mmsa").read_bytes())
    struct.pack_into("<I", blob, 4, 99)
    bad = tmp_path / "bad.mmsa"
    bad.write_bytes(bytes(blob))
    assert cli.main(["evaluate", str(bad)]) == 1
    assert "ArtifactVersionMismatch" in capsys.readouterr().err


def test_predict(trained, corpus, tmp_path):
    out = tmp_path / "p.csv"
    assert cli.main(["predict", str(trained["dnn"] / "model.mmsa"), "--metadata", str(corpus / "data/metadata.csv"),
                     "--features", str(corpus / "data/features.mmfv"), "--out", str(out)]) == 0
    rows = read_csv(out.read_text())
    assert len(rows) == 800
    assert all(0.0 <= float(r["probability"]) <= 1.0 for r in rows)


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main([])
    assert exc.value.code == 2
