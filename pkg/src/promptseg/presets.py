"""Ready-made configurations for the synthetic benchmark and test fixtures.

The desk-scale benchmark keeps every acceptance run in CPU-minutes: 6 base
classes (background included), 2 novel classes, embedding width 32, a
three-layer decoder over a 4x4/8x8/16x16 pyramid. Learning rates here are
desk-scale overrides; the config-file defaults mirror the reference training
setup and are far too small to move a tiny model in a few hundred steps.
"""

from __future__ import annotations

from dataclasses import replace

from .episodes import WorldConfig
from .objectives import TransductiveConfig
from .trainer import RunConfig, TrainSettings


def benchmark_config(seed: int = 0, **overrides) -> RunConfig:
    cfg = RunConfig(
        seed=seed,
        world=WorldConfig(
            num_foreground=7,
            embed_dim=32,
            grid=(16, 16),
            noise_sigma=0.25,
            cos_ceiling=0.6,
            num_levels=3,
            instance_scale=2.0,
            seed=seed,
        ),
        train=TrainSettings(
            base_iters=200,
            base_lr=2e-2,
            finetune_iters=100,
            finetune_lr=5e-3,
            weight_decay=0.05,
            batch_size=8,
            trainset_size=64,
        ),
        transductive=TransductiveConfig(),
        num_layers=3,
        head_count=4,
        shots=1,
        num_queries=6,
        # the benchmark keeps base prompts frozen during fine-tuning: the
        # support set labels every base pixel as background, and letting the
        # base prompts chase that signal erases base-class performance
        train_base_prompts=False,
    )
    return replace(cfg, **overrides) if overrides else cfg


def separable_config(seed: int = 0, **overrides) -> RunConfig:
    """Noise-free orthogonal world; base training must saturate here."""
    cfg = benchmark_config(seed)
    cfg = replace(cfg, world=replace(cfg.world, noise_sigma=0.0, cos_ceiling=0.0))
    return replace(cfg, **overrides) if overrides else cfg


def gradcheck_config(seed: int = 0) -> RunConfig:
    """Tiny fixture for finite-difference sweeps: 3 base + 2 novel classes,
    width 8, two decoder layers, 6x6 grid (3x3 and 6x6 pyramid levels)."""
    return RunConfig(
        seed=seed,
        world=WorldConfig(
            num_foreground=4,
            embed_dim=8,
            grid=(6, 6),
            noise_sigma=0.2,
            cos_ceiling=0.6,
            num_levels=2,
            seed=seed,
        ),
        train=TrainSettings(
            base_iters=30,
            base_lr=2e-2,
            finetune_iters=10,
            finetune_lr=2e-2,
            batch_size=4,
            trainset_size=8,
        ),
        transductive=TransductiveConfig(ce_only_iters=4, full_iters=4),
        num_layers=2,
        head_count=2,
        shots=1,
        num_queries=2,
    )
