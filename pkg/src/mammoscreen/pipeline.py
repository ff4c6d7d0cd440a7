"""Training and evaluation runs driven by a RunConfig."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .classifiers import artifact as art
from .classifiers import dnn_build, dnn_train, lr_train, svm_train
from .config import Imbalance, ModelKind, RunConfig
from .dataset import (
    AgeStats,
    ExampleSet,
    assemble_examples,
    class_weights,
    fit_age_stats,
    load_features,
    load_metadata,
    random_oversample,
    random_undersample,
    smote_interpolate,
    split_patients,
)
from .errors import ConfigError
from .metrics import EvalReport, evaluate
from .numcore import AdamState, History, LossSpec, StopRule

MODEL_FILE = "model.mmsa"
HISTORY_FILE = "history.csv"
PROVENANCE_FILE = "provenance.json"


def sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


@dataclass
class Split:
    train: ExampleSet
    val: ExampleSet
    age_stats: AgeStats | None


def load_split(metadata: str | Path, features: str | Path, val_fraction: float, seed: int,
               age_stats: AgeStats | None = None) -> Split:
    """Patient-grouped split; age scaling is fitted on training patients unless given."""
    records = load_metadata(metadata)
    table = load_features(features)
    train_ids, val_ids = split_patients([r.patient_id for r in records], [r.cancer for r in records],
                                        val_fraction, seed)
    if age_stats is None:
        age_stats = fit_age_stats([r for r in records if r.patient_id in train_ids])
    # With no training ages at all, every age maps to the constant 0.5.
    examples, _ = assemble_examples(records, table, age_stats or AgeStats(0.0, 0.0))
    in_val = np.array([p in val_ids for p in examples.patient_ids], dtype=bool)
    return Split(examples.subset(~in_val), examples.subset(in_val), age_stats)


def rebalance(train: ExampleSet, cfg: RunConfig, seed: int) -> ExampleSet:
    if cfg.imbalance is Imbalance.UNDERSAMPLE:
        return random_undersample(train, cfg.ratio, seed)
    if cfg.imbalance is Imbalance.OVERSAMPLE:
        return random_oversample(train, cfg.ratio, seed)
    if cfg.imbalance is Imbalance.SMOTE:
        n_neg, n_pos = train.class_counts()
        minority, majority = sorted((n_neg, n_pos))
        n_new = max(0, round(cfg.ratio * majority) - minority)
        return ExampleSet.concat([train, smote_interpolate(train, cfg.smote_k, n_new, seed)])
    return train


def resolved_weights(cfg: RunConfig, y: np.ndarray) -> tuple[float, float]:
    if cfg.imbalance is not Imbalance.CLASS_WEIGHTS:
        return (1.0, 1.0)
    if cfg.class_weights is not None:
        return tuple(float(w) for w in cfg.class_weights)
    return class_weights(y)


def fit_model(cfg: RunConfig, train: ExampleSet, val: ExampleSet | None):
    """Train the configured model; returns (model, history, hyperparameters)."""
    seed = cfg.require_seed()
    weights = resolved_weights(cfg, train.y)
    stop = StopRule(cfg.max_iters, cfg.patience, cfg.min_delta)
    hyper = {"class_weights": list(weights), "imbalance": cfg.imbalance.value, "max_iters": cfg.max_iters}
    if cfg.imbalance in (Imbalance.UNDERSAMPLE, Imbalance.OVERSAMPLE, Imbalance.SMOTE):
        hyper["ratio"] = cfg.ratio
    if cfg.imbalance is Imbalance.SMOTE:
        hyper["smote_k"] = cfg.smote_k
    if cfg.model is ModelKind.LR:
        model, history = lr_train(train, cfg.C, weights, stop, lr=cfg.adam_lr())
        hyper.update(C=cfg.C, lr=cfg.adam_lr())
    elif cfg.model is ModelKind.SVM:
        model, history = svm_train(train, cfg.C, cfg.gamma, cfg.c0, cfg.degree, cfg.sketch_dim, weights, stop,
                                   seed, cfg.batch_size)
        hyper.update(C=cfg.C, gamma=cfg.gamma, c0=cfg.c0, degree=cfg.degree, sketch_dim=cfg.sketch_dim,
                     batch_size=cfg.batch_size)
    else:
        adam = AdamState(lr=cfg.adam_lr(), beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
        sampling = "stratified" if cfg.imbalance is Imbalance.SBS else "shuffled"
        model, history = dnn_train(dnn_build(cfg.fusion, seed), train, val, sampling, LossSpec(weights), adam,
                                   stop, cfg.batch_size, seed)
        hyper.update(lr=cfg.adam_lr(), beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, batch_size=cfg.batch_size,
                     sampling=sampling, patience=cfg.patience, min_delta=cfg.min_delta)
    return model, history, hyper


def history_csv(history: History) -> str:
    val = dict(history.val_loss)
    lines = ["iteration,train_loss,val_loss"]
    for i, loss in enumerate(history.train_loss, start=1):
        v = val.get(i)
        lines.append(f"{i},{loss!r},{'' if v is None else repr(v)}")
    return "\n".join(lines) + "\n"


def train_run(cfg: RunConfig) -> dict:
    """Full ``train`` command: returns a summary and writes model, history and provenance."""
    seed = cfg.require_seed()
    for key in ("metadata", "features", "output"):
        if getattr(cfg, key) is None:
            raise ConfigError(f"{key} path is required for train")
    split = load_split(cfg.metadata, cfg.features, cfg.val_fraction, seed)
    train = rebalance(split.train, cfg, seed)
    model, history, hyper = fit_model(cfg, train, split.val if len(split.val) else None)

    inputs = {"metadata": sha256(cfg.metadata), "features": sha256(cfg.features)}
    settings = {k: v for k, v in cfg.to_dict().items() if k != "output"}
    extra = {
        "split": {"seed": seed, "val_fraction": cfg.val_fraction},
        "age_stats": None if split.age_stats is None else [split.age_stats.min, split.age_stats.max],
        "threshold": cfg.threshold,
        "provenance": {"config": settings, "inputs": inputs, "version": __version__},
    }
    artifact = art.ModelArtifact(cfg.model.value, model, hyper, seed, extra)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    art.save(out / MODEL_FILE, artifact)
    (out / HISTORY_FILE).write_text(history_csv(history), encoding="utf-8")
    provenance = {
        "config": cfg.to_dict(),
        "inputs": inputs,
        "outputs": {MODEL_FILE: sha256(out / MODEL_FILE), HISTORY_FILE: sha256(out / HISTORY_FILE)},
        "version": __version__,
        "iterations": history.iterations,
        "stopped_early": history.stopped_early,
    }
    (out / PROVENANCE_FILE).write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    summary = {"iterations": history.iterations, "n_train": len(train), "n_val": len(split.val)}
    if len(split.val):
        summary["val"] = evaluate(model.predict_proba(split.val.X), split.val.y, cfg.threshold)
    return summary


def artifact_split(artifact: art.ModelArtifact, metadata: str | Path, features: str | Path) -> Split:
    """Recreate the held-out split recorded in an artifact."""
    split = artifact.extra.get("split") or {}
    stats = artifact.extra.get("age_stats")
    return load_split(metadata, features, split.get("val_fraction", 0.2), split.get("seed", artifact.seed),
                      AgeStats(*stats) if stats else None)


def evaluate_artifact(artifact: art.ModelArtifact, data: ExampleSet, threshold: float) -> EvalReport:
    return evaluate(artifact.model.predict_proba(data.X), data.y, threshold)
