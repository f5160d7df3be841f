"""Run configuration, training loop and evaluation."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .data import BalancedSampler, Dataset, augment_noise, load_mnist
from .errors import ConfigError, DataError, NumericError
from .fern import load_patterns
from .nn import MODEL_KINDS, Adam, Model, build_lenet5, load_checkpoint, save_checkpoint
from .parallel import set_threads

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    model: str = "conv"
    pattern_file: str = ""
    data_dir: str = "data/mnist"
    seed: int = 0
    batch: int = 400
    lr: float = 1e-3
    lr_decay: float = 1.0
    lr_interval: int = 100
    lr_floor: float = 1e-4
    wd_conv: float = 5e-4
    wd_fern: float = 1e-8
    wd_dense: float = 5e-4
    epochs: int = 20
    steps_per_epoch: int = 0
    noise: float = 0.3
    heuristic_bp: bool = True
    threads: int = 1
    test_limit: int = 0
    out: str = "runs/default"

    def validate(self) -> "RunConfig":
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.pattern_file and self.model == "conv":
            raise ConfigError("a pattern file needs a fern model (TI1, TI2 or TI3)")
        if self.batch <= 0 or self.batch % 10:
            raise ConfigError(f"batch must be a positive multiple of 10, got {self.batch}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not (self.lr > 0 and self.lr_floor > 0 and 0 < self.lr_decay <= 1):
            raise ConfigError("learning rates must be positive and lr_decay in (0, 1]")
        if self.lr_interval < 1:
            raise ConfigError("lr_interval must be >= 1")
        if min(self.wd_conv, self.wd_fern, self.wd_dense) < 0:
            raise ConfigError("weight decay must be non-negative")
        if not 0 <= self.noise <= 1:
            raise ConfigError("noise must lie in [0, 1]")
        if self.threads < 1 or self.steps_per_epoch < 0 or self.test_limit < 0:
            raise ConfigError("threads, steps_per_epoch and test_limit must be non-negative")
        return self

    def learning_rate(self, epoch: int) -> float:
        """Staircase schedule; ``epoch`` counts from 0."""
        if self.lr_decay == 1.0:
            return self.lr
        return max(self.lr * self.lr_decay ** (epoch // self.lr_interval), self.lr_floor)

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "on" if value else "off"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    def updated(self, **overrides) -> "RunConfig":
        values = {}
        types = {f.name: f.type for f in fields(self)}
        for key, raw in overrides.items():
            if raw is None:
                continue
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _coerce(key, types[key], raw)
        return dataclasses.replace(self, **values)


def _coerce(key, kind, raw):
    if not isinstance(raw, str):
        return raw
    try:
        if kind in ("bool", bool):
            lowered = raw.strip().lower()
            if lowered in ("on", "true", "1", "yes"):
                return True
            if lowered in ("off", "false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None
    return raw.strip()


PRESETS = {
    # 20 epochs at a constant 1e-3
    "desk": {},
    # 1e-2, x0.1 every 100 epochs down to 1e-4, then 1000 more epochs
    "long": {"lr": 1e-2, "lr_decay": 0.1, "lr_interval": 100, "lr_floor": 1e-4,
              "epochs": 1200},
}


def parse_config(text: str) -> dict:
    """Flat ``key=value`` lines; ``#`` comments and blank lines are skipped."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def load_config(path=None, preset: str = "desk", **overrides) -> RunConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; valid: {', '.join(PRESETS)}")
    cfg = RunConfig().updated(**PRESETS[preset])
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg = cfg.updated(**parse_config(text))
    return cfg.updated(**overrides).validate()


def build_model(cfg: RunConfig, rng: np.random.Generator) -> Model:
    patterns = load_patterns(cfg.pattern_file) if cfg.pattern_file else None
    return build_lenet5(cfg.model, rng, patterns=patterns, heuristic=cfg.heuristic_bp)


def evaluate(model: Model, dataset: Dataset, batch_size: int = 500) -> float:
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty test set")
    predicted = model.predict(dataset.images, batch_size)
    return float(np.count_nonzero(predicted == dataset.labels)) / len(dataset)


@dataclass
class TrainResult:
    best_acc: float
    best_epoch: int
    history: list  # (epoch, mean loss, test accuracy)
    out_dir: Path


def train(cfg: RunConfig, train_set: Dataset | None = None,
          test_set: Dataset | None = None) -> TrainResult:
    """Train per ``cfg``; writes config.txt, metrics.csv, best.ckpt, last.ckpt."""
    cfg.validate()
    set_threads(cfg.threads)
    if train_set is None:
        train_set = load_mnist(cfg.data_dir, "train")
    if test_set is None:
        test_set = load_mnist(cfg.data_dir, "test")
    if cfg.test_limit:
        test_set = test_set.subset(cfg.test_limit)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dumps())

    model_seed, sample_seed, noise_seed = np.random.SeedSequence(cfg.seed).spawn(3)
    model = build_model(cfg, np.random.default_rng(model_seed))
    opt = Adam(model, {"conv": cfg.wd_conv, "fern": cfg.wd_fern, "dense": cfg.wd_dense})
    sampler = BalancedSampler(train_set, cfg.batch, np.random.default_rng(sample_seed))
    noise_rng = np.random.default_rng(noise_seed)
    steps = cfg.steps_per_epoch or max(1, len(train_set) // cfg.batch)

    history = []
    best_acc, best_epoch = -1.0, 0
    with open(out / "metrics.csv", "w") as metrics:
        metrics.write("epoch,loss,test_acc\n")
        for epoch in range(1, cfg.epochs + 1):
            lr = cfg.learning_rate(epoch - 1)
            total = 0.0
            for _ in range(steps):
                images, labels = sampler.next_batch()
                images = augment_noise(images, cfg.noise, noise_rng)
                loss, _ = model.loss_and_grads(images, labels)
                if not math.isfinite(loss):
                    raise NumericError(f"loss became {loss} in epoch {epoch}")
                opt.step(lr)
                total += loss
            mean_loss = total / steps
            acc = evaluate(model, test_set)
            history.append((epoch, mean_loss, acc))
            metrics.write(f"{epoch},{mean_loss:.8f},{acc:.6f}\n")
            metrics.flush()
            log.info("epoch %d lr %.2g loss %.5f test_acc %.4f", epoch, lr, mean_loss, acc)
            if acc > best_acc:
                best_acc, best_epoch = acc, epoch
                save_checkpoint(model, out / "best.ckpt")
    save_checkpoint(model, out / "last.ckpt")
    return TrainResult(best_acc, best_epoch, history, out)


def evaluate_checkpoint(path, data_dir, split: str = "test"):
    """``(accuracy, correct, total)`` of a saved model on an MNIST split."""
    model = load_checkpoint(path)
    dataset = load_mnist(data_dir, split)
    try:
        out_shape = model.check_shapes((1,) + dataset.images.shape[1:])
    except ConfigError as exc:
        raise ConfigError(f"checkpoint does not fit {split} images: {exc}") from None
    if out_shape[-1] < dataset.classes:
        raise ConfigError(f"checkpoint has {out_shape[-1]} outputs for {dataset.classes} classes")
    acc = evaluate(model, dataset)
    return acc, round(acc * len(dataset)), len(dataset)
