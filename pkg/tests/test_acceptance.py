"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.
"""

import sys
import time
from fractions import Fraction

import numpy as np
import pytest

import dicomgen
import gradcheck
from mammoscreen import cli, dicom, imageops, metrics
from mammoscreen.classifiers import Fusion, dnn_build, sketch_fit
from mammoscreen.config import ModelKind, RunConfig
from mammoscreen.dataset import sbs_quotas, stratified_batches
from mammoscreen.dicom import DicomError, PayloadKind, Photometric, PixelMatrix
from mammoscreen.pipeline import train_run
from mammoscreen.synth import SynthConfig, write_corpus


@pytest.fixture
def report(capsys):
    """Print one status line per criterion, outside pytest's capture."""
    start = time.perf_counter()

    def emit(number, title, ok, detail, budget):
        elapsed = time.perf_counter() - start
        ok = bool(ok) and elapsed < budget
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}: {detail} ({elapsed:.1f}s of {budget:g}s)")
        assert ok, detail

    return emit


# 1


def test_architecture(report):
    model = dnn_build()
    counts = model.layer_parameter_counts
    ok = model.parameter_count == 101_130 and list(counts) == [100100, 1010, 11, 6, 3]
    report(1, "architecture", ok, f"{model.parameter_count} parameters, layers {list(counts)}", 1)


# 2


def test_gradients(report):
    rng = np.random.default_rng(2024)
    fusions = list(Fusion)
    worst, checked, skipped = 0.0, 0, 0
    draws = 500
    for k in range(draws):
        model = dnn_build(fusions[k % 3], seed=k, image_features=8)
        for layer in model.layers:
            layer.b = rng.normal(scale=0.3, size=layer.b.shape)
        X = rng.normal(size=(2, 10))
        y = rng.integers(0, 2, size=2)
        weights = tuple(rng.uniform(0.2, 5.0, size=2))
        w, c, s = gradcheck.check(model, X, y, weights)
        worst, checked, skipped = max(worst, w), checked + c, skipped + s
    ok = worst < 1e-4 and checked > 0.99 * (checked + skipped)
    report(2, "gradients", ok, f"max rel error {worst:.2e} over {draws} draws, {checked} coords ({skipped} at kinks)", 30)


# 3


def brute_force(probs, labels):
    tp = sum((Fraction(p) for p, y in zip(probs, labels) if y == 1), Fraction(0))
    fp = sum((Fraction(p) for p, y in zip(probs, labels) if y == 0), Fraction(0))
    fn = sum((1 - Fraction(p) for p, y in zip(probs, labels) if y == 1), Fraction(0))
    precision = tp / (tp + fp) if tp + fp else Fraction(0)
    recall = tp / (tp + fn) if tp + fn else Fraction(0)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else Fraction(0)
    return float(precision), float(recall), float(f1)


def test_metric_oracle(report):
    rng = np.random.default_rng(3)
    cases = [
        ([0.9, 0.1, 0.6, 0.4], [1, 0, 1, 0]),
        ([0.0, 0.0, 0.0], [1, 0, 1]),  # tp + fp = 0
        ([0.3, 0.7], [0, 0]),  # no positives
        ([0.0, 0.5], [1, 0]),  # precision = recall = 0
        ([1.0, 0.0], [1, 0]),
    ]
    while len(cases) < 1000:
        n = int(rng.integers(1, 16))
        probs = rng.choice([0.0, 0.25, 0.5, 0.75, 1.0], n) if rng.random() < 0.3 else rng.random(n)
        cases.append((probs.tolist(), rng.integers(0, 2, n).tolist()))
    worst = 0.0
    for probs, labels in cases:
        got = (metrics.p_precision(probs, labels), metrics.p_recall(probs, labels), metrics.p_f1(probs, labels))
        worst = max(worst, float(np.max(np.abs(np.subtract(got, brute_force(probs, labels))))))
    example = metrics.p_f1([0.9, 0.1, 0.6, 0.4], [1, 0, 1, 0])
    ok = worst <= 1e-12 and abs(example - 0.75) <= 1e-12
    report(3, "metric oracle", ok, f"{len(cases)} instances, max deviation {worst:.1e}, worked example {example:.15f}", 5)


# 4


def sketch_gap(X, Z, gamma, c0, degree, seeds=200):
    total = np.zeros(len(X))
    for seed in range(seeds):
        sk = sketch_fit(gamma, c0, degree, 512, seed)
        total += np.sum(sk.transform(X) * sk.transform(Z), axis=1)
    exact = (gamma * np.sum(X * Z, axis=1) + c0) ** degree
    return float(np.max(np.abs(total / seeds / exact - 1)))


def test_sketch_unbiased(report):
    rng = np.random.default_rng(4)
    dim = 1002
    X, Z = rng.normal(size=(2, 5, dim))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    Z /= np.linalg.norm(Z, axis=1, keepdims=True)
    # Gate on the shipped SVM kernel (gamma = 1/1002, c0 = 1). gamma = 1 is reported
    # only: its per-seed variance puts the 5% band at roughly two standard errors.
    worst = max(sketch_gap(X, Z, 1 / dim, 1.0, d) for d in (2, 3))
    stress = max(sketch_gap(X, Z, 1.0, 1.0, d) for d in (2, 3))
    report(4, "sketch unbiasedness", worst < 0.05,
           f"max relative gap {worst:.3%} at gamma=1/{dim} (gamma=1 stress: {stress:.2%}), d in 2,3, D=512, 200 seeds", 60)


# 5


@pytest.fixture(scope="module")
def corpora(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    return {sep: write_corpus(root / f"sep{sep}", SynthConfig(separation=sep, seed=0)) for sep in (2.0, 0.0)}


def test_end_to_end(report, corpora, tmp_path):
    lines, ok = [], True
    for sep, (metadata, features) in corpora.items():
        for kind in ModelKind:
            cfg = RunConfig(seed=0, model=kind, max_iters=1000, metadata=str(metadata), features=str(features),
                            output=str(tmp_path / f"{kind.value}{sep}"))
            val = train_run(cfg)["val"]
            if sep:
                ok &= val.pf1 >= 0.8 and val.auroc >= 0.95
            else:
                ok &= 0.4 <= val.auroc <= 0.6
            lines.append(f"{kind.value}@{sep:g} pF1 {val.pf1:.3f} AUROC {val.auroc:.3f}")
    report(5, "end-to-end separability", ok, "; ".join(lines), 300)


# 6


def test_sbs_quota(report):
    counts = [53_548, 1_158]
    quotas = sbs_quotas(counts, 256)
    y = np.r_[np.zeros(counts[0], dtype=int), np.ones(counts[1], dtype=int)]
    batches = list(stratified_batches(y, 256, seed=6, epochs=1))
    mixed = all(0 < y[b].sum() < len(b) for b in batches)
    ok = (quotas[1], quotas[0]) == (5, 251) and mixed
    report(6, "SBS quota", ok, f"quotas (pos, neg) = ({quotas[1]}, {quotas[0]}), {len(batches)} batches all mixed={mixed}", 1)


# 7


def test_preprocessing(report):
    rng = np.random.default_rng(7)
    bad = []
    for i in range(10_000):
        if i % 500 == 0:
            rows, cols = rng.integers(513, 1100, size=2)  # exercise downsampling too
        else:
            rows, cols = rng.integers(1, 40, size=2)
        bits = int(rng.integers(1, 17))
        m = PixelMatrix(rng.integers(0, 1 << bits, size=(rows, cols)).astype(np.uint16), bits)
        photometric = (Photometric.MONOCHROME1, Photometric.MONOCHROME2)[i % 2]
        out = imageops.preprocess(m, photometric)
        norm = imageops.normalize_minmax(m)
        flipped = imageops.invert(norm)
        if not (out.shape == (512, 512) and out.min() >= 0.0 and out.max() <= 1.0
                and np.array_equal(imageops.invert(flipped), norm) and np.all(norm + flipped == 1.0)):
            bad.append(i)
    report(7, "preprocessing invariants", not bad, f"10000 inputs, {len(bad)} violations", 60)


# 8


def dicom_fixtures():
    kw = dict(rows=3, columns=5, bits_allocated=16, bits_stored=14, photometric="MONOCHROME1")
    enc = dict(transfer_syntax="1.2.840.10008.1.2.4.91", rows=64, columns=32, bits_allocated=16, bits_stored=12)
    fragments = [b"\xff\x4f" * 7, b"x" * 4]
    return [
        (dicomgen.tag_list(), dicomgen.native_file(dicomgen.NATIVE_4X4), dicomgen.NATIVE_4X4),
        (dicomgen.tag_list(**kw), dicomgen.native_file(bytes(range(30)), **kw), bytes(range(30))),
        (dicomgen.tag_list(**enc), dicomgen.encapsulated_file(fragments, **enc), b"".join(fragments)),
    ]


def test_dicom_robustness(report):
    crashes, silent, mismatches, cuts = [], 0, 0, 0
    for (meta, body), raw, payload in dicom_fixtures():
        obj = dicom.parse_dicom(raw)
        captured = obj.captured_elements()
        mismatches += sum(captured.get(tag) != dicom.DataElement(vr, value)
                          for tag, (vr, value) in dicomgen.all_tags(meta, body).items())
        mismatches += dicom.extract_pixel_payload(obj)[0] != payload
        for cut in range(len(raw)):
            cuts += 1
            try:
                obj = dicom.parse_dicom(raw[:cut])
                dicom.extract_pixel_payload(obj)
                if obj.payload_kind is PayloadKind.NATIVE:
                    dicom.decode_native_pixels(obj)
                silent += 1
            except DicomError:
                pass
            except Exception as exc:  # anything else is a crash
                crashes.append((cut, type(exc).__name__))
    ok = not crashes and silent == 0 and mismatches == 0
    report(8, "DICOM robustness", ok,
           f"{cuts} truncations, {len(crashes)} crashes, {silent} accepted, {mismatches} round-trip mismatches", 60)


# 9


def test_determinism(report, tmp_path):
    data = tmp_path / "data"
    assert cli.main(["synth", str(data), "--set", "seed=9", "--set", "n=800"]) == 0
    same = {}
    for kind in ModelKind:
        blobs = []
        for run in ("a", "b"):
            out = tmp_path / kind.value / run
            assert cli.main(["train", "--set", "seed=9", "--set", f"model={kind.value}",
                             "--set", f"metadata={data / 'metadata.csv'}", "--set", f"features={data / 'features.mmfv'}",
                             "--set", f"output={out}"]) == 0
            blobs.append(((out / "model.mmsa").read_bytes(), (out / "history.csv").read_bytes()))
        same[kind.value] = blobs[0] == blobs[1]
    report(9, "determinism", all(same.values()), ", ".join(f"{k} identical={v}" for k, v in same.items()), 180)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
