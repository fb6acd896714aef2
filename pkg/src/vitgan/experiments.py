"""Desk-scale experiments shared by the acceptance suite and ``scripts/``.

``overfit`` checks that a small model can memorize a handful of pairs.
``ablation`` trains both modes on the same data with the same budget and
compares the sharpness of their held-out outputs.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import SyntheticDataset, SyntheticTaskSpec
from .discriminator import DiscriminatorConfig
from .generator import GeneratorConfig
from .metrics import laplacian_energy, run_generator
from .training import TrainConfig, fit, init_state

# 64x64, P=8, N=4, H=4, d_model=128
OVERFIT_GENERATOR = GeneratorConfig(image_size=64, patch_size=8, embed_dim=128, num_layers=4,
                                    num_heads=4, residual_channels=128)
OVERFIT_THRESHOLD = 0.05
OVERFIT_MAX_STEPS = 2000


@dataclass
class OverfitResult:
    mode: str
    steps: int
    final_l1: float
    reached: bool
    seconds: float
    trace: list[float] = field(repr=False, default_factory=list)


def overfit(mode: str, seed: int = 0, pairs: int = 4, max_steps: int = OVERFIT_MAX_STEPS,
            threshold: float = OVERFIT_THRESHOLD, gen_cfg: GeneratorConfig = OVERFIT_GENERATOR,
            disc_cfg: DiscriminatorConfig | None = None) -> OverfitResult:
    """Train on ``pairs`` fixed samples until the batch L1 drops below ``threshold``.

    The batch holds every pair, so each step sees the full training set and
    the logged L1 is the train L1.
    """
    spec = SyntheticTaskSpec(image_size=gen_cfg.image_size, seed=seed)
    data = SyntheticDataset(spec, pairs)
    cfg = TrainConfig(batch_size=pairs, total_steps=max_steps, seed=seed, mode=mode)
    disc_cfg = disc_cfg or DiscriminatorConfig()
    state = init_state(gen_cfg, disc_cfg if mode == "cgan_l1" else None, cfg)
    trace: list[float] = []

    def record(m):
        trace.append(m["g_l1"])
        return m["g_l1"] < threshold

    t0 = time.perf_counter()
    fit(state, data, cfg, stop_when=record)
    return OverfitResult(mode, state.step, trace[-1], trace[-1] < threshold,
                         time.perf_counter() - t0, trace)


# the ablation trains twice, so it uses a lighter model than the overfit run
ABLATION_GENERATOR = GeneratorConfig(image_size=32, patch_size=4, embed_dim=64, num_layers=2,
                                     num_heads=4, residual_channels=64)
ABLATION_DISCRIMINATOR = DiscriminatorConfig(base_channels=32, num_downsamples=2)


@dataclass
class AblationResult:
    steps: int
    seeds: tuple[int, ...]
    energy: dict[str, list[float]]  # per seed, per mode
    target_energy: list[float]
    final_l1: dict[str, list[float]]
    seconds: float

    def mean_energy(self, mode: str) -> float:
        return float(np.mean(self.energy[mode]))


def ablation(steps: int = 1000, seeds: tuple[int, ...] = (0, 1, 2), train_pairs: int = 64,
             held_out: int = 16, batch_size: int = 4, gen_cfg: GeneratorConfig = ABLATION_GENERATOR,
             disc_cfg: DiscriminatorConfig = ABLATION_DISCRIMINATOR) -> AblationResult:
    """Equal-budget cgan_l1 vs l1_only; Laplacian energy of held-out outputs.

    Each seed draws its own synthetic set and initialization.  Held-out
    inputs are the ``held_out`` pairs that follow the training pairs.
    """
    energy: dict[str, list[float]] = {"cgan_l1": [], "l1_only": []}
    final: dict[str, list[float]] = {"cgan_l1": [], "l1_only": []}
    target_energy = []
    t0 = time.perf_counter()
    for seed in seeds:
        spec = SyntheticTaskSpec(image_size=gen_cfg.image_size, seed=seed)
        train = SyntheticDataset(spec, train_pairs)
        test = SyntheticDataset(spec, held_out, offset=train_pairs)
        inputs = np.stack([test[i].input for i in range(held_out)])
        target_energy.append(laplacian_energy(np.stack([test[i].target for i in range(held_out)])))
        for mode in energy:
            cfg = TrainConfig(batch_size=batch_size, total_steps=steps, seed=seed, mode=mode)
            state = init_state(gen_cfg, disc_cfg if mode == "cgan_l1" else None, cfg)
            last: dict = {}
            fit(state, train, cfg, stop_when=lambda m: last.update(m) and False)
            energy[mode].append(laplacian_energy(run_generator(state.generator, inputs)))
            final[mode].append(last["g_l1"])
    return AblationResult(steps, tuple(seeds), energy, target_energy, final,
                          time.perf_counter() - t0)
