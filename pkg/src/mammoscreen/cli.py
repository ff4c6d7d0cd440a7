"""``mammoscreen`` command line.

Exit codes: 0 success, 1 some or all work failed, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shlex
import subprocess
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__, dicom, imageops
from .classifiers import artifact as art
from .config import RunConfig, load_config
from .dataset import AgeStats, assemble_examples, load_features, load_metadata
from .errors import ConfigError, MammoscreenError
from .metrics import compare_reports
from .pipeline import artifact_split, evaluate_artifact, train_run
from .synth import SynthConfig, write_corpus

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2
DECODER_ENV = "MAMMO_DECODER"

log = logging.getLogger("mammoscreen")


def _config(args) -> RunConfig:
    return load_config(args.config, args.set or ())


# convert / preprocess


def decoder_template(cfg: RunConfig) -> str | None:
    return os.environ.get(DECODER_ENV) or cfg.external_decoder


def run_decoder(template: str, codestream: bytes, out_pgm: Path) -> np.ndarray:
    """Write the codestream to a temp file, run the decoder, read back its graymap."""
    with tempfile.TemporaryDirectory() as tmp:
        src = Path(tmp) / "frame.j2k"
        src.write_bytes(codestream)
        command = [part.format(input=str(src), output=str(out_pgm)) for part in shlex.split(template)]
        done = subprocess.run(command, capture_output=True, text=True)
        if done.returncode != 0:
            raise MammoscreenError(f"decoder exited with {done.returncode}: {done.stderr.strip()[:200]}")
    if not out_pgm.exists():
        raise MammoscreenError("decoder produced no output file")
    return imageops.read_pgm(out_pgm)[0]


def convert_one(path: Path, out_dir: Path, template: str | None) -> None:
    obj = dicom.read_dicom(path)
    payload, kind = dicom.extract_pixel_payload(obj)
    out_pgm = out_dir / (path.stem + ".pgm")
    if kind is dicom.PayloadKind.NATIVE:
        pixels = dicom.decode_native_pixels(obj)
        imageops.write_pgm(out_pgm, pixels.values, (1 << obj.bits_stored) - 1)
    else:
        if not template:
            raise MammoscreenError(f"encapsulated pixel data needs an external decoder (set {DECODER_ENV})")
        values = run_decoder(template, payload, out_pgm)
        if values.shape != (obj.rows, obj.columns):
            out_pgm.unlink()
            raise MammoscreenError(f"decoder output {values.shape} does not match {obj.rows}x{obj.columns}")
    sidecar = {
        "photometric": obj.photometric_interpretation.value,
        "rows": obj.rows,
        "columns": obj.columns,
        "bits_stored": obj.bits_stored,
        "transfer_syntax": obj.transfer_syntax_uid,
        "source": path.name,
    }
    out_pgm.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def preprocess_one(path: Path, out_dir: Path, size: int) -> None:
    sidecar = path.with_suffix(".json")
    if not sidecar.exists():
        raise MammoscreenError(f"missing sidecar {sidecar.name}")
    info = json.loads(sidecar.read_text())
    values, maxval = imageops.read_pgm(path)
    bits = int(info.get("bits_stored", maxval.bit_length()))
    if int(values.max()) >= 1 << bits:
        raise MammoscreenError(f"pixel values exceed {bits} stored bits")
    img = imageops.preprocess(dicom.PixelMatrix(values, bits), info["photometric"], (size, size))
    imageops.write_normalized_pgm(out_dir / path.name, img)


def run_batch(files: Sequence[Path], work: Callable[[Path], None], workers: int) -> int:
    """Apply ``work`` to each file; log per-file status and print the summary. Returns the exit code."""

    def attempt(path: Path) -> str | None:
        try:
            work(path)
            return None
        except (MammoscreenError, ValueError, OSError) as exc:
            return f"{type(exc).__name__}: {exc}"

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(attempt, files))
    failed = 0
    for path, error in zip(files, results):
        if error is None:
            log.info("ok      %s", path.name)
        else:
            failed += 1
            log.error("failed  %s: %s", path.name, error)
    print(f"{len(files) - failed} ok, {failed} failed")
    return EXIT_FAILED if failed else EXIT_OK


def cmd_convert(args) -> int:
    cfg = _config(args)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    files = sorted(Path(args.input).glob("*.dcm"))
    template = decoder_template(cfg)
    return run_batch(files, lambda p: convert_one(p, out, template), args.workers)


def cmd_preprocess(args) -> int:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    files = sorted(Path(args.input).glob("*.pgm"))
    return run_batch(files, lambda p: preprocess_one(p, out, args.size), args.workers)


# synth / train / evaluate / report / predict


def cmd_synth(args) -> int:
    cfg = _config(args)
    synth = SynthConfig(n=cfg.n, separation=cfg.separation, informative=cfg.informative, seed=cfg.require_seed())
    meta, feats = write_corpus(args.output, synth, args.format)
    n_pos = synth.n_positive
    print(f"wrote {synth.n} images ({n_pos} positive) to {meta} and {feats}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    summary = train_run(cfg)
    line = f"trained {cfg.model.value} for {summary['iterations']} iterations on {summary['n_train']} examples"
    if "val" in summary:
        v = summary["val"]
        auroc = "n/a" if v.auroc is None else f"{v.auroc:.4f}"
        line += f"; validation pF1 {v.pf1:.4f}, AUROC {auroc}"
    print(line)
    return EXIT_OK


def _data_paths(args, artifact: art.ModelArtifact) -> tuple[str, str]:
    stored = artifact.extra.get("provenance", {}).get("config", {})
    metadata = args.metadata or stored.get("metadata")
    features = args.features or stored.get("features")
    if not metadata or not features:
        raise ConfigError("metadata and features paths are required")
    return metadata, features


def _report(path: str, args):
    artifact = art.load(path)
    split = artifact_split(artifact, *_data_paths(args, artifact))
    data = split.val if args.split == "val" else type(split.val).concat([split.train, split.val])
    threshold = args.threshold if args.threshold is not None else artifact.extra.get("threshold", 0.5)
    return evaluate_artifact(artifact, data, threshold)


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _report_name(path: str) -> str:
    p = Path(path)
    return f"{p.parent.name}/{p.stem}" if p.parent.name else p.stem


def cmd_evaluate(args) -> int:
    report = _report(args.model, args)
    _emit(compare_reports([(args.name or _report_name(args.model), report)]), args.out)
    return EXIT_OK


def cmd_report(args) -> int:
    rows = [(_report_name(path), _report(path, args)) for path in args.models]
    _emit(compare_reports(rows), args.out)
    return EXIT_OK


def cmd_predict(args) -> int:
    artifact = art.load(args.model)
    stats = artifact.extra.get("age_stats")
    records = load_metadata(args.metadata)
    examples, _ = assemble_examples(records, load_features(args.features), AgeStats(*stats) if stats else AgeStats(0.0, 0.0))
    probs = artifact.model.predict_proba(examples.X)
    lines = ["image_id,probability"] + [f"{i},{p!r}" for i, p in zip(examples.image_ids, map(float, probs))]
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mammoscreen", description="Screening mammography classification pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-file status")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="key=value config file with a [run] section")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        return p

    p = with_config(sub.add_parser("convert", help="DICOM files to graymaps plus JSON sidecars"))
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--workers", type=int, default=4)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("preprocess", help="normalize, invert and resize converted graymaps")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--size", type=int, default=imageops.TARGET_SIZE)
    p.add_argument("--workers", type=int, default=4)
    p.set_defaults(func=cmd_preprocess)

    p = with_config(sub.add_parser("synth", help="write a seeded synthetic corpus"))
    p.add_argument("output")
    p.add_argument("--format", choices=("mmfv", "csv"), default="mmfv")
    p.set_defaults(func=cmd_synth)

    p = with_config(sub.add_parser("train", help="train the configured model"))
    p.set_defaults(func=cmd_train)

    def with_data(p):
        p.add_argument("--metadata")
        p.add_argument("--features")
        p.add_argument("--threshold", type=float)
        p.add_argument("--split", choices=("val", "all"), default="val")
        p.add_argument("--out", help="write CSV here instead of stdout")
        return p

    p = with_data(sub.add_parser("evaluate", help="metrics for one model on its held-out split"))
    p.add_argument("model")
    p.add_argument("--name")
    p.set_defaults(func=cmd_evaluate)

    p = with_data(sub.add_parser("report", help="comparison table over several models"))
    p.add_argument("models", nargs="+")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("predict", help="per-image probabilities")
    p.add_argument("model")
    p.add_argument("--metadata", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MammoscreenError, ValueError, OSError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
