"""Seeded synthetic corpus shaped like the screening data.

Each patient contributes up to four images (L/R x CC/MLO) sharing an age and
implant flag. Cancer labels come in breast pairs: a positive breast marks
both of its views. Image features are standard normal, and positives get
``separation`` added on a fixed random subset of ``informative`` coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import N_IMAGE_FEATURES, CaseRecord, FeatureTable, Laterality, View, write_features, write_metadata

# Class counts of the full screening corpus (positive, total).
FULL_POSITIVES = 1158
FULL_TOTAL = 1158 + 53548
VIEWS = [(Laterality.L, View.CC), (Laterality.L, View.MLO), (Laterality.R, View.CC), (Laterality.R, View.MLO)]


@dataclass(frozen=True)
class SynthConfig:
    n: int = 5470
    separation: float = 2.0
    informative: int = 64
    positive_fraction: float = FULL_POSITIVES / FULL_TOTAL
    missing_age: float = 0.03
    implant_rate: float = 0.02
    seed: int = 0

    @property
    def n_positive(self) -> int:
        # Rounded down: 5470 images -> 115 positives.
        return int(self.n * self.positive_fraction)


def generate(cfg: SynthConfig) -> tuple[list[CaseRecord], FeatureTable]:
    if cfg.n < 1:
        raise ValueError("need at least one image")
    if not 0 < cfg.informative <= N_IMAGE_FEATURES:
        raise ValueError(f"informative must be in 1..{N_IMAGE_FEATURES}")
    rng = np.random.default_rng(cfg.seed)
    n_patients = -(-cfg.n // 4)
    patient = np.arange(cfg.n) // 4
    view = np.arange(cfg.n) % 4
    breast = 2 * patient + view // 2

    # Pick whole breasts (two images) until the positive count is reached.
    labels = np.zeros(cfg.n, dtype=np.int64)
    remaining = cfg.n_positive
    for b in rng.permutation(breast.max() + 1):
        if remaining <= 0:
            break
        members = np.flatnonzero(breast == b)[:remaining]
        labels[members] = 1
        remaining -= len(members)

    ages = rng.integers(40, 81, size=n_patients).astype(float)
    age_missing = rng.random(n_patients) < cfg.missing_age
    implants = (rng.random(n_patients) < cfg.implant_rate).astype(int)

    shift = np.zeros(N_IMAGE_FEATURES)
    shift[rng.choice(N_IMAGE_FEATURES, size=cfg.informative, replace=False)] = cfg.separation
    X = rng.standard_normal((cfg.n, N_IMAGE_FEATURES)) + labels[:, None] * shift

    width = len(str(cfg.n - 1))
    records, image_ids = [], []
    for i in range(cfg.n):
        p = patient[i]
        image_id = f"img{i:0{width}d}"
        laterality, v = VIEWS[view[i]]
        records.append(
            CaseRecord(
                f"pat{p:0{width}d}", image_id, laterality, v,
                None if age_missing[p] else float(ages[p]), int(implants[p]), int(labels[i]),
            )
        )
        image_ids.append(image_id)
    return records, FeatureTable(image_ids, X)


def write_corpus(out_dir: str | Path, cfg: SynthConfig, fmt: str = "mmfv") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records, table = generate(cfg)
    meta_path = out / "metadata.csv"
    feat_path = out / ("features.mmfv" if fmt == "mmfv" else "features.csv")
    write_metadata(meta_path, records)
    write_features(feat_path, table, fmt)
    return meta_path, feat_path
