"""Command-line pipeline: generate, train-logical, build-bank, calibrate, score, eval.

Every stage writes its artifacts atomically under the output directory,
drops a stage.done marker, and echoes the effective configuration for
provenance. Exit codes: 0 success, 1 validation error, 2 I/O error.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import dataset, decoder, fusion, membank, metrics, tensorio
from .encoder import Encoder, EncoderSpec, N_LEVELS, healthy_seed

log = logging.getLogger("afe")

STAGE_MARKER = "stage.done"


class StageError(RuntimeError):
    """A required upstream stage has not produced its artifacts yet."""


def _write_text_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _mark_done(directory: Path, stage: str) -> None:
    _write_text_atomic(directory / STAGE_MARKER, stage + "\n")


def _require_done(directory: Path, stage: str, command: str) -> None:
    marker = directory / STAGE_MARKER
    if not marker.is_file():
        raise StageError(f"missing artifacts of stage {stage!r}; run `afe {command}` first")


def _echo_config(cfg) -> None:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_text_atomic(out / "config.effective", config_mod.effective_text(cfg))


def _category_dir(cfg) -> Path:
    return Path(cfg.data_dir) / cfg.category


def _flat_name(sample_name: str) -> str:
    return sample_name.replace("/", "_").rsplit(".", 1)[0]


def _save_encoder(directory: Path, enc: Encoder) -> None:
    enc.save(directory)
    spec = enc.spec
    meta = (
        f"seed = {spec.seed}\n"
        f"in_channels = {spec.in_channels}\n"
        f"level_channels = {','.join(str(c) for c in spec.level_channels)}\n"
    )
    _write_text_atomic(directory / "encoder.meta", meta)


def _load_encoder(directory: Path) -> Encoder:
    meta_path = directory / "encoder.meta"
    if not meta_path.is_file():
        raise FileNotFoundError(f"missing encoder metadata {meta_path}")
    fields = {}
    for line in meta_path.read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
    spec = EncoderSpec(
        seed=int(fields["seed"]),
        in_channels=int(fields["in_channels"]),
        level_channels=tuple(int(c) for c in fields["level_channels"].split(",")),
    )
    return Encoder.load(directory, spec)


def _write_preview(path: Path, score_map: np.ndarray) -> None:
    lo = float(score_map.min())
    hi = float(score_map.max())
    span = hi - lo if hi > lo else 1.0
    dataset.write_raster(path, (score_map.astype(np.float64) - lo) / span)


def _feature_source(cfg):
    """Per-sample pyramid loader over exported tensor files, or None.

    Files follow `<flattened sample name>_k<level>.npft`; all five levels
    must be present because the bottleneck is compressed from level 5.
    """
    if not cfg.features_dir:
        return None
    root = Path(cfg.features_dir)

    def load(sample):
        levels = {}
        for k in range(1, N_LEVELS + 1):
            path = root / f"{_flat_name(sample.name)}_k{k}.npft"
            if not path.is_file():
                raise StageError(
                    f"missing exported feature file {path}; export levels 1..{N_LEVELS}"
                )
            levels[k] = tensorio.read_tensor(path)
        return levels

    return load


def _load_embedding(cfg):
    if not cfg.text_embedding:
        return None
    return tensorio.read_tensor(Path(cfg.text_embedding)).reshape(-1)


# ---------------------------------------------------------------------------
# Stages

def _branch_encoder_seed(explicit: int, derived: int) -> int:
    # explicit seeds are honoured verbatim; derived ones are screened for
    # degenerate filter draws first
    return explicit if explicit else healthy_seed(derived)


def run_generate(cfg) -> Path:
    pin = dataset.PinboardConfig(
        grid=cfg.grid,
        image_size=cfg.image_size,
        n_train=cfg.n_train,
        n_val=cfg.n_val,
        n_test_normal=cfg.n_test_normal,
        n_test_logical=cfg.n_test_logical,
        n_test_structural=cfg.n_test_structural,
    )
    root = dataset.generate_pinboard(Path(cfg.data_dir), pin, cfg.seed)
    _mark_done(root, "generate")
    log.info("generated dataset at %s", root)
    return root


class _TrainSettings:
    """Adapter giving train_logical the fields it expects."""

    def __init__(self, cfg):
        self.d_entries = cfg.d_entries
        self.d_g = cfg.d_g
        self.lambdas = cfg.lambdas
        self.lr = cfg.lr
        self.codebook_lr = cfg.codebook_lr
        self.epochs = cfg.epochs
        self.seed = cfg.seed
        self.joint_theta = cfg.joint_theta


def run_train_logical(cfg) -> Path:
    category_dir = _category_dir(cfg)
    _require_done(category_dir, "generate", "generate")
    split = dataset.read_dataset(category_dir)
    seed = _branch_encoder_seed(cfg.encoder_seed_logical, cfg.logical_seed())
    enc = Encoder.build(EncoderSpec(seed=seed,
                                    in_channels=split.train[0].image.shape[2]))
    before = enc.weights_hash()
    model, codebooks, projectors, curve = decoder.train_logical(
        split, enc, _TrainSettings(cfg), category=cfg.category, log=log,
        external_embedding=_load_embedding(cfg), feature_source=_feature_source(cfg),
    )
    if enc.weights_hash() != before:
        raise RuntimeError("encoder weights changed during training; they must stay frozen")
    model_dir = Path(cfg.out_dir) / "model"
    decoder.save_model(model_dir, model, codebooks, projectors)
    _save_encoder(model_dir, enc)
    _write_text_atomic(
        model_dir / "loss_curve.txt",
        "".join(f"{epoch} {value!r}\n" for epoch, value in enumerate(curve)),
    )
    _mark_done(model_dir, "train-logical")
    log.info("trained logical branch; final loss %s", curve[-1] if curve else "n/a")
    return model_dir


def run_build_bank(cfg) -> Path:
    category_dir = _category_dir(cfg)
    _require_done(category_dir, "generate", "generate")
    split = dataset.read_dataset(category_dir)
    seed = _branch_encoder_seed(cfg.encoder_seed_structural, cfg.structural_seed())
    enc = Encoder.build(EncoderSpec(seed=seed,
                                    in_channels=split.train[0].image.shape[2]))
    bank = membank.build_bank(
        split.train, enc, use_levels=cfg.bank_level_tuple(), scale=cfg.bank_scale
    )
    bank.metric = cfg.bank_metric
    membank.attach_coreset(bank, cfg.bank_fraction, cfg.seed)
    bank_dir = Path(cfg.out_dir) / "bank"
    membank.save_bank(bank_dir, bank)
    _save_encoder(bank_dir, enc)
    _mark_done(bank_dir, "build-bank")
    log.info("bank: %d rows, coreset %d", bank.vectors.shape[0], bank.coreset.size)
    return bank_dir


def _load_branches(cfg):
    out = Path(cfg.out_dir)
    _require_done(out / "model", "train-logical", "train-logical")
    _require_done(out / "bank", "build-bank", "build-bank")
    model, codebooks, projectors = decoder.load_model(out / "model")
    enc_log = _load_encoder(out / "model")
    bank = membank.load_bank(out / "bank")
    enc_str = _load_encoder(out / "bank")
    return model, codebooks, projectors, enc_log, bank, enc_str


def _branch_maps(sample, model, codebooks, projectors, enc_log, bank, enc_str, category,
                 feature_source=None, embedding=None):
    a_log = decoder.logical_score(
        sample.image, enc_log, model, codebooks, projectors, category=category,
        external_embedding=embedding,
        features=feature_source(sample) if feature_source else None,
    )
    a_str = membank.structural_score(sample.image, enc_str, bank)
    return a_log, a_str


def run_calibrate(cfg) -> Path:
    model, codebooks, projectors, enc_log, bank, enc_str = _load_branches(cfg)
    split = dataset.read_dataset(_category_dir(cfg))
    if not split.validation:
        raise ValueError("validation split is empty; cannot calibrate")
    feature_source, embedding = _feature_source(cfg), _load_embedding(cfg)
    str_maps, log_maps = [], []
    for sample in split.validation:
        a_log, a_str = _branch_maps(
            sample, model, codebooks, projectors, enc_log, bank, enc_str, cfg.category,
            feature_source, embedding,
        )
        log_maps.append(a_log)
        str_maps.append(a_str)
    stats = fusion.calibrate(str_maps, log_maps, alpha=cfg.alpha, beta=cfg.beta)
    calib_dir = Path(cfg.out_dir) / "calib"
    fusion.save_stats(calib_dir / "calib.meta", stats)
    _mark_done(calib_dir, "calibrate")
    log.info("calibration: %s", stats)
    return calib_dir


def run_score(cfg) -> Path:
    model, codebooks, projectors, enc_log, bank, enc_str = _load_branches(cfg)
    out = Path(cfg.out_dir)
    _require_done(out / "calib", "calibrate", "calibrate")
    stats = fusion.load_stats(out / "calib" / "calib.meta")
    split = dataset.read_dataset(_category_dir(cfg))
    feature_source, embedding = _feature_source(cfg), _load_embedding(cfg)

    def score_one(sample):
        a_log, a_str = _branch_maps(
            sample, model, codebooks, projectors, enc_log, bank, enc_str, cfg.category,
            feature_source, embedding,
        )
        a_map = fusion.fuse(a_str, a_log, stats, smooth_sigma=cfg.smooth_sigma)
        return a_log, a_str, a_map

    if cfg.threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(score_one, split.test))
    else:
        results = [score_one(s) for s in split.test]

    scores_dir = out / "scores"
    scores_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for sample, (a_log, a_str, a_map) in zip(split.test, results):
        name = _flat_name(sample.name)
        tensorio.write_tensor_atomic(scores_dir / f"map_{name}.npft", a_map)
        tensorio.write_tensor_atomic(scores_dir / f"log_{name}.npft", a_log)
        tensorio.write_tensor_atomic(scores_dir / f"str_{name}.npft", a_str)
        _write_preview(scores_dir / f"map_{name}.pgm", a_map)
        lines.append(
            f"{sample.name} {sample.label} {sample.anomaly_kind}"
            f" {fusion.image_score(a_map)!r}"
            f" {fusion.image_score(a_log)!r}"
            f" {fusion.image_score(a_str)!r}"
        )
    _write_text_atomic(scores_dir / "image_scores.txt", "\n".join(lines) + "\n")
    _mark_done(scores_dir, "score")
    log.info("scored %d test images", len(results))
    return scores_dir


def run_eval(cfg) -> Path:
    out = Path(cfg.out_dir)
    scores_dir = out / "scores"
    _require_done(scores_dir, "score", "score")
    split = dataset.read_dataset(_category_dir(cfg))
    maps, masks, img_scores, labels = [], [], [], []
    for sample in split.test:
        name = _flat_name(sample.name)
        path = scores_dir / f"map_{name}.npft"
        if not path.is_file():
            raise StageError(f"missing fused map {path}; run `afe score` first")
        a_map = tensorio.read_tensor(path)
        maps.append(a_map)
        masks.append(sample.mask)
        img_scores.append(fusion.image_score(a_map))
        labels.append(sample.label)
    results = metrics.evaluate(img_scores, labels, maps, masks, cfg.spro_limit_tuple())
    report_dir = out / "report"
    _write_text_atomic(report_dir / "metrics.txt", metrics.report_text(results))
    _mark_done(report_dir, "eval")
    log.info("metrics: %s", results)
    return report_dir


COMMANDS = {
    "generate": run_generate,
    "train-logical": run_train_logical,
    "build-bank": run_build_bank,
    "calibrate": run_calibrate,
    "score": run_score,
    "eval": run_eval,
}


def _setup_logging() -> None:
    level_name = os.environ.get("AFE_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level_name not in levels:
        raise ValueError(f"AFE_LOG must be one of {sorted(levels)}, got {level_name!r}")
    logging.basicConfig(level=levels[level_name], format="%(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="afe", description="two-branch anomaly detection pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="key = value config file")
        p.add_argument("--data", type=Path, default=None, help="dataset root directory")
        p.add_argument("--out", type=Path, default=None, help="artifact output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
    return parser


def resolve_config(args) -> config_mod.RunConfig:
    cfg = config_mod.load_config(args.config) if args.config else config_mod.RunConfig()
    if args.data is not None:
        cfg.data_dir = str(args.data)
    if args.out is not None:
        cfg.out_dir = str(args.out)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    return cfg.validate()


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        _echo_config(cfg)
        COMMANDS[args.command](cfg)
        return 0
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
