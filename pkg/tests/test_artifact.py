import json
import struct

import numpy as np
import pytest

from mammoscreen.classifiers import Fusion, dnn_build, lr_train, svm_train
from mammoscreen.classifiers import artifact as art
from mammoscreen.numcore import StopRule


def data(seed=0, n=60, dim=1002):
    rng = np.random.default_rng(seed)
    y = np.r_[0, 1, rng.integers(0, 2, n - 2)]
    X = rng.normal(size=(n, dim)) + y[:, None] * 0.5
    return X, y


@pytest.fixture(scope="module")
def models():
    X, y = data()
    return X, {
        "lr": lr_train((X, y), stop=StopRule(20))[0],
        "svm": svm_train((X, y), dim=64, stop=StopRule(50), seed=3)[0],
        "dnn": dnn_build(Fusion.MEAN_THEN_SIGMOID, seed=2),
    }


def parse_prefix(blob):
    magic, version, head_len = struct.unpack_from("<4sII", blob)
    header = json.loads(blob[12 : 12 + head_len])
    base = 12 + head_len
    base += -base % 8
    return magic, version, header, base


@pytest.mark.parametrize("kind", ["lr", "svm", "dnn"])
def test_round_trip_predictions(models, kind):
    X, trained = models
    blob = art.encode(art.ModelArtifact(kind, trained[kind], {"C": 1.0}, 7, {"note": "x"}))
    back = art.decode(blob)
    assert back.kind == kind and back.seed == 7 and back.extra == {"note": "x"}
    np.testing.assert_allclose(back.model.predict_proba(X), trained[kind].predict_proba(X), atol=1e-4)
    # Re-encoding the decoded model reproduces the bytes.
    assert art.encode(back) == blob


def test_layout_matches_documentation(models):
    _, trained = models
    model = trained["dnn"]
    blob = art.encode(art.ModelArtifact("dnn", model, {}, 0))
    magic, version, header, base = parse_prefix(blob)
    assert magic == b"MMSA" and version == 1 and base % 8 == 0
    assert header["fusion"] == "MeanThenSigmoid" and header["format_version"] == 1
    assert blob[12 + len(json.dumps(header, sort_keys=True, separators=(",", ":"))) : base].strip(b"\0") == b""
    total = 0
    for section, param in zip(header["sections"], model.parameters()):
        raw = blob[base + section["offset"] : base + section["offset"] + 4 * section["count"]]
        values = np.frombuffer(raw, dtype="<f4").reshape(section["shape"])
        np.testing.assert_array_equal(values, param.astype(np.float32))
        total += section["count"]
    assert total == model.parameter_count
    assert len(blob) == base + 4 * total


def test_unknown_version_rejected(models):
    _, trained = models
    blob = bytearray(art.encode(art.ModelArtifact("lr", trained["lr"])))
    struct.pack_into("<I", blob, 4, 2)
    with pytest.raises(art.ArtifactVersionMismatch):
        art.decode(bytes(blob))


def test_corrupt_inputs_rejected(models):
    _, trained = models
    blob = art.encode(art.ModelArtifact("lr", trained["lr"]))
    with pytest.raises(art.ArtifactError):
        art.decode(b"XXXX" + blob[4:])
    with pytest.raises(art.ArtifactError):
        art.decode(blob[:8])
    with pytest.raises(art.ArtifactError):
        art.decode(blob[:-4])
    with pytest.raises(art.ArtifactError):
        art.encode(art.ModelArtifact("forest", trained["lr"]))


def test_encoding_is_deterministic(models):
    _, trained = models
    a = art.encode(art.ModelArtifact("svm", trained["svm"], {"gamma": 1 / 1002}, 1, {"k": [1, 2]}))
    b = art.encode(art.ModelArtifact("svm", trained["svm"], {"gamma": 1 / 1002}, 1, {"k": [1, 2]}))
    assert a == b
