"""Single-file model artifacts.

Layout (all integers little-endian)::

    0   4 bytes   magic b"MMSA"
    4   u32       format_version (currently 1)
    8   u32       header length H in bytes
    12  H bytes   UTF-8 JSON header, keys sorted, no whitespace
    ..  zero padding up to the next multiple of 8: this is the data base
    ..  float32 section payloads, back to back

Each header ``sections`` entry is ``{"name", "shape", "offset", "count"}``,
with ``offset`` in bytes from the data base. No timestamps are written, so
equal inputs give byte-identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from ..errors import MammoscreenError
from ..numcore import Activation, DenseLayer
from .dnn import TwoBranchDNN
from .logistic import LogisticModel
from .svm import SketchSVM, TensorSketch

MAGIC = b"MMSA"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sII")


class ArtifactError(MammoscreenError, ValueError):
    pass


class ArtifactVersionMismatch(ArtifactError):
    pass


@dataclass
class ModelArtifact:
    kind: str  # "lr", "svm" or "dnn"
    model: Any
    hyperparameters: dict = field(default_factory=dict)
    seed: int = 0
    extra: dict = field(default_factory=dict)  # split, age scaling, provenance

    @property
    def fusion(self) -> str | None:
        return self.model.fusion.value if self.kind == "dnn" else None


def _sections(kind: str, model) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    if kind == "lr":
        return {"n_features": int(model.w.size)}, [("w", model.w), ("w0", np.array([model.w0]))]
    if kind == "svm":
        sk = model.sketch
        meta = {
            "n_features": model.n_features,
            "lam": model.lam,
            "sketch": {"gamma": sk.gamma, "c0": sk.c0, "degree": sk.degree, "dim": sk.dim, "seed": sk.seed,
                       "hashes": sk.hashes.tolist()},
        }
        return meta, [("w", model.w), ("b", np.array([model.b])), ("calibration", np.array(model.calibration))]
    if kind == "dnn":
        arrays = []
        for branch, layers in (("image", model.image_branch), ("meta", model.meta_branch)):
            for i, layer in enumerate(layers):
                arrays += [(f"{branch}.{i}.W", layer.W), (f"{branch}.{i}.b", layer.b)]
        return {"n_features": model.n_features}, arrays
    raise ArtifactError(f"unknown model kind {kind!r}")


def encode(artifact: ModelArtifact) -> bytes:
    model_meta, arrays = _sections(artifact.kind, artifact.model)
    sections, payload, offset = [], [], 0
    for name, values in arrays:
        data = np.ascontiguousarray(values, dtype="<f4")
        sections.append({"name": name, "shape": list(data.shape), "offset": offset, "count": int(data.size)})
        payload.append(data.tobytes())
        offset += data.nbytes
    header = {
        "kind": artifact.kind,
        "format_version": FORMAT_VERSION,
        "fusion": artifact.fusion,
        "seed": artifact.seed,
        "hyperparameters": artifact.hyperparameters,
        "model": model_meta,
        "extra": artifact.extra,
        "sections": sections,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    prefix = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(head)) + head
    prefix += b"\0" * (-len(prefix) % 8)
    return prefix + b"".join(payload)


def _read_sections(header: dict, body: bytes) -> dict[str, np.ndarray]:
    out = {}
    for s in header["sections"]:
        start, count = int(s["offset"]), int(s["count"])
        if start < 0 or count < 0 or start + 4 * count > len(body):
            raise ArtifactError(f"section {s['name']!r} runs past the end of the file")
        values = np.frombuffer(body, dtype="<f4", count=count, offset=start).astype(np.float64)
        out[s["name"]] = values.reshape(s["shape"])
    return out


def _dnn_layers(arrays: dict, branch: str) -> list[DenseLayer]:
    layers = []
    i = 0
    while f"{branch}.{i}.W" in arrays:
        layers.append(DenseLayer(arrays[f"{branch}.{i}.W"], arrays[f"{branch}.{i}.b"], Activation.RELU))
        i += 1
    if not layers:
        raise ArtifactError(f"artifact has no {branch} layers")
    layers[-1].activation = Activation.NONE
    return layers


def decode(data: bytes) -> ModelArtifact:
    if len(data) < _PREFIX.size:
        raise ArtifactError("file too short for an artifact")
    magic, version, head_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise ArtifactError("not a model artifact (bad magic)")
    if version != FORMAT_VERSION:
        raise ArtifactVersionMismatch(f"format_version {version} is not supported (expected {FORMAT_VERSION})")
    end = _PREFIX.size + head_len
    if end > len(data):
        raise ArtifactError("truncated artifact header")
    try:
        header = json.loads(data[_PREFIX.size : end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"unreadable artifact header: {exc}") from None
    base = end + (-end % 8)
    arrays = _read_sections(header, data[base:])
    kind, meta, hyper = header["kind"], header["model"], header["hyperparameters"]
    try:
        if kind == "lr":
            model = LogisticModel(arrays["w"], float(arrays["w0"][0]), hyper.get("C", 1.0),
                                  tuple(hyper.get("class_weights", (1.0, 1.0))))
        elif kind == "svm":
            sk = meta["sketch"]
            sketch = TensorSketch(sk["gamma"], sk["c0"], sk["degree"], sk["dim"], sk["seed"], np.array(sk["hashes"]))
            a, c = arrays["calibration"]
            model = SketchSVM(sketch, arrays["w"], float(arrays["b"][0]), meta["lam"], (float(a), float(c)),
                              hyper.get("C", 1.0), tuple(hyper.get("class_weights", (1.0, 1.0))), meta["n_features"])
        elif kind == "dnn":
            model = TwoBranchDNN(_dnn_layers(arrays, "image"), _dnn_layers(arrays, "meta"), header["fusion"])
        else:
            raise ArtifactError(f"unknown model kind {kind!r}")
    except KeyError as exc:
        raise ArtifactError(f"artifact is missing {exc}") from None
    return ModelArtifact(kind, model, hyper, header["seed"], header["extra"])


def save(path: str | Path, artifact: ModelArtifact) -> None:
    Path(path).write_bytes(encode(artifact))


def load(path: str | Path) -> ModelArtifact:
    return decode(Path(path).read_bytes())
