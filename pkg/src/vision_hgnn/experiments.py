"""Small synthetic experiments: overfitting check and ablation comparison."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .ingest import Micrograph, preprocess
from .model import VisionHgNN, VisionHgNNConfig
from .synthetic import oriented_textures
from .training import AdamState, TrainConfig, assemble_split, kfold_split, top_n_accuracy, train, train_epoch


def reduced_config(**overrides) -> VisionHgNNConfig:
    """d=32, 16-pixel patches on 64x64 inputs (n=16), K=5, Z=2, two HgAT and two HgT layers."""
    base = dict(
        d=32, patch_size=16, image_size=64, k=5, replicas=2, hgat_layers=2, hgt_layers=2, heads=4,
        num_classes=4, precision="float32",
    )
    base.update(overrides)
    return VisionHgNNConfig(**base).validate()


def texture_patches(config: VisionHgNNConfig, per_class: int = 32, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    images, labels = oriented_textures(per_class, config.num_classes, config.image_size, seed=seed)
    grids = [preprocess(Micrograph(img), config.image_size, config.patch_size).features for img in images]
    return np.stack(grids).astype(config.dtype), labels


@dataclass
class OverfitResult:
    train_top1: list[float]
    losses: list[float]
    seconds: float

    @property
    def best(self) -> float:
        return max(self.train_top1)

    @property
    def epochs(self) -> int:
        return len(self.train_top1)


def overfit(
    max_epochs: int = 200,
    target: float = 0.95,
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = 16,
    config: VisionHgNNConfig | None = None,
) -> OverfitResult:
    """Train on the whole texture set until training top-1 (eval mode) reaches ``target``."""
    config = config or reduced_config(seed=seed)
    patches, labels = texture_patches(config, seed=seed)
    model = VisionHgNN.create(config)
    cfg = TrainConfig(epochs=max_epochs, batch_size=batch_size, lr=lr, seed=seed, folds=3)
    rng = np.random.default_rng(seed)
    state = AdamState()
    accs, losses = [], []
    start = time.perf_counter()
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(len(labels))
        losses.append(train_epoch(model, patches, labels, order, state, lr, cfg, epoch))
        accs.append(top_n_accuracy(model.predict_proba(patches), labels, 1))
        if accs[-1] >= target:
            break
    return OverfitResult(accs, losses, time.perf_counter() - start)


@dataclass
class AblationResult:
    # variant -> per-seed test top-1
    test_top1: dict[str, list[float]] = field(default_factory=dict)
    seconds: float = 0.0

    def mean(self, variant: str) -> float:
        return float(np.mean(self.test_top1[variant]))

    def summary(self) -> str:
        parts = [f"{v} {self.mean(v):.3f} (+-{np.std(self.test_top1[v]):.3f})" for v in self.test_top1]
        return ", ".join(parts)


def ablation(
    variants=("full", "no-hgat", "no-hgt"),
    seeds=(0, 1, 2, 3, 4),
    epochs: int = 60,
    per_class: int = 32,
    folds: int = 4,
    lr: float = 1e-3,
    batch_size: int = 16,
    data_seed: int = 0,
    config: VisionHgNNConfig | None = None,
) -> AblationResult:
    """Test top-1 of each variant on one fixed held-out split, per model seed."""
    base = config or reduced_config()
    patches, labels = texture_patches(base, per_class, seed=data_seed)
    split = assemble_split(kfold_split(len(labels), folds, data_seed), 0)
    result = AblationResult()
    start = time.perf_counter()
    for variant in variants:
        scores = []
        for seed in seeds:
            cfg = base.with_variant(variant)
            cfg.seed = seed
            model = VisionHgNN.create(cfg.validate())
            tc = TrainConfig(epochs=epochs, batch_size=batch_size, lr=lr, folds=folds, seed=seed)
            run = train(model, patches, labels, split, tc)
            scores.append(run.test_report.top1)
        result.test_top1[variant] = scores
    result.seconds = time.perf_counter() - start
    return result
