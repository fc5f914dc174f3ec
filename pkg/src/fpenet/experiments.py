"""Reusable toy-task runs shared by the CLI, scripts and acceptance tests."""
from __future__ import annotations

from dataclasses import dataclass, replace

from .config import ModelConfig
from .data import make_toy_dataset
from .graph import build
from .metrics import miou
from .train import PolySchedule, evaluate, train

TOY_CONFIG = ModelConfig(num_classes=3, p=2, q=3, input_size=(64, 64))
TOY_LR = 0.005

ABLATIONS = {
    "full": lambda c: c,
    "branches1": lambda c: replace(c, branches=1, dilations=None),
    "bilinear": lambda c: replace(c, decoder="bilinear"),
}


@dataclass
class ToyRun:
    graph: object
    log: list
    val_miou: float


def toy_datasets(seed, n_images, cfg, n_val=50):
    size = cfg.input_size
    return (
        make_toy_dataset(1000 + seed, n_images, size, cfg.num_classes),
        make_toy_dataset(2000 + seed, n_val, size, cfg.num_classes),
    )


def run_toy(cfg=TOY_CONFIG, seed=0, epochs=30, n_images=200, lr=TOY_LR, policy=None, on_epoch=None):
    train_set, val_set = toy_datasets(seed, n_images, cfg)
    g = build(cfg, seed=seed)
    res = train(
        g,
        train_set,
        epochs,
        PolySchedule(lr, 0.9, max(epochs, 1)),
        policy,
        seed=seed,
        val_set=val_set,
        on_epoch=on_epoch,
    )
    score = miou(evaluate(g, val_set))[1] if epochs == 0 else res.log[-1].miou
    return ToyRun(g, res.log, score)
