"""Flat key=value run configuration with defaults that run end-to-end."""
from __future__ import annotations

import dataclasses
from pathlib import Path


@dataclasses.dataclass
class RunConfig:
    # category and paths
    category: str = "pinboard"
    data_dir: str = "data"
    out_dir: str = "out"
    seed: int = 7
    threads: int = 1
    # synthetic dataset
    grid: int = 4
    image_size: int = 128
    n_train: int = 64
    n_val: int = 16
    n_test_normal: int = 16
    n_test_logical: int = 16
    n_test_structural: int = 16
    # encoders (one per branch; 0 means derive from the run seed)
    encoder_seed_logical: int = 0
    encoder_seed_structural: int = 0
    # codebooks
    d_entries: int = 16
    codebook_lr: float = 0.1
    # decoder
    d_g: int = 64
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    epochs: int = 50
    lr: float = 1e-4
    joint_theta: bool = True
    # memory bank
    bank_levels: str = "2,3"
    bank_fraction: float = 0.1
    bank_metric: str = "l1"
    bank_scale: int = 2
    # fusion
    alpha: float = 1.0
    beta: float = 3.0
    smooth_sigma: float = 4.0
    # metrics
    spro_limits: str = "0.01,0.05,0.1,0.3,1.0"
    # externally supplied inputs (empty = compute internally)
    features_dir: str = ""
    text_embedding: str = ""

    @property
    def lambdas(self):
        return (self.lambda1, self.lambda2, self.lambda3)

    def bank_level_tuple(self):
        return tuple(int(v) for v in self.bank_levels.split(","))

    def spro_limit_tuple(self):
        return tuple(float(v) for v in self.spro_limits.split(","))

    def logical_seed(self) -> int:
        return self.encoder_seed_logical or 1000 + self.seed

    def structural_seed(self) -> int:
        return self.encoder_seed_structural or 2000 + self.seed

    def validate(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr < 0 or self.codebook_lr < 0:
            raise ValueError("learning rates must be >= 0")
        if not 0 < self.bank_fraction <= 1:
            raise ValueError(f"bank_fraction must be in (0, 1], got {self.bank_fraction}")
        if self.bank_metric not in ("l1", "l2"):
            raise ValueError(f"bank_metric must be l1 or l2, got {self.bank_metric!r}")
        if self.bank_scale < 1:
            raise ValueError(f"bank_scale must be >= 1, got {self.bank_scale}")
        if self.threads < 1:
            raise ValueError(f"threads must be >= 1, got {self.threads}")
        if self.smooth_sigma <= 0:
            raise ValueError(f"smooth_sigma must be positive, got {self.smooth_sigma}")
        for lim in self.spro_limit_tuple():
            if not 0 < lim <= 1:
                raise ValueError(f"spro limit {lim} outside (0, 1]")
        for k in self.bank_level_tuple():
            if not 1 <= k <= 5:
                raise ValueError(f"bank level {k} outside 1..5")
        if self.d_entries < 1:
            raise ValueError(f"d_entries must be >= 1, got {self.d_entries}")
        return self


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _convert(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    if kind == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config_text(text: str, base: RunConfig = None) -> RunConfig:
    cfg = base or RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"config line {lineno}: expected key = value, got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _FIELD_TYPES:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _convert(key, value))
    return cfg


def load_config(path) -> RunConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def effective_text(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
