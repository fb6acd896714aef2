"""cGAN + lambda * L1 training: alternating D/G Adam updates, L1-only ablation, checkpoints."""
from __future__ import annotations

import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, TextIO

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, read_container, write_container
from .data.dataset import Batcher, PairedBatch
from .discriminator import DiscriminatorConfig, build_discriminator
from .generator import GeneratorConfig, build_generator
from .nn import Module
from .tensor import ConfigError, DimensionError, Tape, Tensor

log = logging.getLogger(__name__)

MODES = ("cgan_l1", "l1_only")
METRIC_KEYS = ("d_loss", "g_adv", "g_l1", "g_total")


class TrainingError(RuntimeError):
    def __init__(self, step: int, msg: str):
        super().__init__(f"step {step}: {msg}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    lambda_l1: float = 100.0
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    total_steps: int = 1000
    seed: int = 0
    mode: str = "cgan_l1"
    checkpoint_every: int = 0  # 0: final checkpoint only

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"train.mode must be one of {MODES}, got {self.mode!r}")
        if self.lambda_l1 < 0:
            raise ConfigError("train.lambda_l1 must be >= 0")
        for name in ("lr_g", "lr_d", "eps"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"train.{name} must be positive")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be in [0, 1)")
        if self.batch_size < 1 or self.total_steps < 0 or self.checkpoint_every < 0:
            raise ConfigError("train.batch_size must be >= 1; total_steps, checkpoint_every >= 0")


# ----------------------------------------------------------------- losses

def l1_loss(output: Tensor, target) -> Tensor:
    target = T.as_tensor(target, like=output)
    if output.shape != target.shape:
        raise DimensionError(f"l1_loss: output {output.shape} vs target {target.shape}")
    return T.mean(T.abs_(output - target))


def gan_losses(real_logits: Tensor | None, fake_logits: Tensor):
    """``(d_loss, g_adv)`` from raw patch logits.

    d_loss = (BCE(real, 1) + BCE(fake, 0)) / 2, g_adv = BCE(fake, 1).
    ``d_loss`` is None when ``real_logits`` is None.
    """
    d_loss = None
    if real_logits is not None:
        if real_logits.shape != fake_logits.shape:
            raise DimensionError(f"logit maps differ: {real_logits.shape} vs {fake_logits.shape}")
        d_loss = T.scale(T.bce_with_logits(real_logits, 1.0)
                         + T.bce_with_logits(fake_logits, 0.0), 0.5)
    return d_loss, T.bce_with_logits(fake_logits, 1.0)


# -------------------------------------------------------------- optimizer

class Adam:
    def __init__(self, named_params, lr: float, beta1: float = 0.5, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params: dict[str, Tensor] = dict(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.t = 0

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        """One bias-corrected update; parameters missing from ``grads`` see a zero gradient."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = grads.get(p)
            m, v = self.m[name], self.v[name]
            if g is None:
                m *= b1
                v *= b2
            else:
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * (g * g)
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self.params:
            out[f"m.{n}"] = self.m[n]
            out[f"v.{n}"] = self.v[n]
        out["t"] = np.array([self.t], dtype=np.uint64)
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for n, p in self.params.items():
            self.m[n] = np.array(state[f"m.{n}"], dtype=p.dtype)
            self.v[n] = np.array(state[f"v.{n}"], dtype=p.dtype)
        self.t = int(state["t"][0])


# ------------------------------------------------------------------ state

@dataclass
class TrainState:
    generator: Module
    discriminator: Module | None
    opt_g: Adam
    opt_d: Adam | None
    step: int = 0
    cursor: tuple[int, int] = (0, 0)  # batcher (epoch, index)
    history: list[dict] = field(default_factory=list, repr=False)


def init_state(gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig | None,
               cfg: TrainConfig) -> TrainState:
    """Fresh state; the discriminator exists only in cgan_l1 mode."""
    gen = build_generator(gen_cfg, seed=[cfg.seed, 0])
    opt_g = Adam(gen.named_parameters(), cfg.lr_g, cfg.beta1, cfg.beta2, cfg.eps)
    disc = opt_d = None
    if cfg.mode == "cgan_l1":
        if disc_cfg is None:
            raise ConfigError("cgan_l1 mode needs a discriminator config")
        if (disc_cfg.condition_channels, disc_cfg.image_channels) != (
                gen_cfg.in_channels, gen_cfg.out_channels):
            raise ConfigError(
                f"discriminator channels {disc_cfg.condition_channels}+"
                f"{disc_cfg.image_channels} do not match generator "
                f"{gen_cfg.in_channels}->{gen_cfg.out_channels}")
        disc = build_discriminator(disc_cfg, gen_cfg.image_size, seed=[cfg.seed, 1])
        opt_d = Adam(disc.named_parameters(), cfg.lr_d, cfg.beta1, cfg.beta2, cfg.eps)
    return TrainState(gen, disc, opt_g, opt_d)


@contextmanager
def frozen(module: Module):
    """Temporarily stop recording gradients for ``module``'s parameters."""
    params = module.parameters()
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p in params:
            p.requires_grad = True


def _check_finite(step: int, **values: float) -> None:
    for k, v in values.items():
        if not math.isfinite(v):
            raise TrainingError(step, f"non-finite {k} ({v})")


GradHook = Callable[[str, dict], None]


def train_step(state: TrainState, batch: PairedBatch, cfg: TrainConfig,
               on_grads: GradHook | None = None) -> dict[str, float]:
    """One optimization step; mutates ``state`` and returns the logged metrics.

    cgan_l1: the discriminator is updated on (condition, target) vs
    (condition, detached G(condition)), then the generator on
    g_adv + lambda * L1 against the updated discriminator.  l1_only skips
    the discriminator entirely and logs d_loss = g_adv = 0.
    ``on_grads(phase, grads)`` sees each gradient map ("d" then "g").
    """
    if len(batch) == 0:
        raise T.ContractError("empty batch")
    step = state.step + 1
    gen, disc = state.generator, state.discriminator
    dtype = next(iter(state.opt_g.params.values())).dtype if state.opt_g.params else np.float32
    cond = Tensor(batch.inputs.astype(dtype, copy=False))
    target = Tensor(batch.targets.astype(dtype, copy=False))
    gen.train()
    lam = float(cfg.lambda_l1)

    with Tape() as tape:
        fake = gen(cond)
    d_val = g_adv_val = 0.0

    if cfg.mode == "cgan_l1":
        if disc is None:
            raise TrainingError(step, "cgan_l1 mode but the state has no discriminator")
        disc.train()
        with tape:
            real_logits = disc(cond, target)
            fake_logits = disc(cond, fake.detach())
            d_loss, _ = gan_losses(real_logits, fake_logits)
        d_val = d_loss.item()
        _check_finite(step, d_loss=d_val)
        d_grads = T.backward(d_loss, tape)
        gen_params = set(gen.parameters())
        leaked = [p for p in d_grads if p in gen_params and np.any(d_grads[p])]
        if leaked:
            raise TrainingError(step, "generator received gradient in the discriminator step")
        if on_grads:
            on_grads("d", d_grads)
        state.opt_d.step(d_grads)
        with frozen(disc):
            with tape:
                _, g_adv = gan_losses(None, disc(cond, fake))
                g_l1 = l1_loss(fake, target)
                g_total = g_adv + T.scale(g_l1, lam)
            g_adv_val = g_adv.item()
            _check_finite(step, g_adv=g_adv_val, g_l1=g_l1.item(), g_total=g_total.item())
            # backward inside the freeze so D parameters are skipped
            g_grads = T.backward(g_total, tape)
    else:
        with tape:
            g_l1 = l1_loss(fake, target)
            g_total = T.scale(g_l1, lam)
        _check_finite(step, g_l1=g_l1.item(), g_total=g_total.item())
        g_grads = T.backward(g_total, tape)

    g_l1_val, g_total_val = g_l1.item(), g_total.item()
    if on_grads:
        on_grads("g", g_grads)
    state.opt_g.step(g_grads)
    state.step = step
    return {"d_loss": d_val, "g_adv": g_adv_val, "g_l1": g_l1_val, "g_total": g_total_val}


def format_metrics(step: int, m: dict[str, float]) -> str:
    return ",".join([str(step)] + [repr(float(m[k])) for k in METRIC_KEYS])


def parse_metrics_file(path) -> list[dict[str, float]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        parts = line.split(",")
        rows.append({"step": int(parts[0]), **{k: float(v) for k, v in zip(METRIC_KEYS, parts[1:])}})
    return rows


def fit(state: TrainState, dataset, cfg: TrainConfig, metrics_out: TextIO | None = None,
        checkpoint_dir=None, until_step: int | None = None,
        stop_when: Callable[[dict], bool] | None = None) -> TrainState:
    """Run steps until ``until_step`` (default ``cfg.total_steps``).

    Batches come from a :class:`Batcher` positioned at ``state.cursor`` so a
    resumed state sees exactly the batches the uninterrupted run would.
    """
    last = cfg.total_steps if until_step is None else until_step
    batches = Batcher(dataset, cfg.batch_size, cfg.seed, *state.cursor)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    while state.step < last:
        batch = next(batches)
        metrics = train_step(state, batch, cfg)
        state.cursor = batches.cursor
        state.history.append({"step": state.step, **metrics})
        if metrics_out is not None:
            metrics_out.write(format_metrics(state.step, metrics) + "\n")
            metrics_out.flush()
        if state.step % 100 == 0:
            log.info("step %d %s", state.step,
                     " ".join(f"{k}={metrics[k]:.4f}" for k in METRIC_KEYS))
        if ckpt_dir is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(state, ckpt_dir / f"step_{state.step:06d}.vitg")
        if stop_when is not None and stop_when(metrics):
            break
    return state


# ------------------------------------------------------------ checkpoints

def state_tensors(state: TrainState) -> dict[str, np.ndarray]:
    out = {f"gen.{k}": v for k, v in state.generator.state_dict().items()}
    out.update({f"opt_g.{k}": v for k, v in state.opt_g.state_dict().items()})
    if state.discriminator is not None:
        out.update({f"disc.{k}": v for k, v in state.discriminator.state_dict().items()})
        out.update({f"opt_d.{k}": v for k, v in state.opt_d.state_dict().items()})
    out["state.step"] = np.array([state.step], dtype=np.uint64)
    out["state.cursor"] = np.array(state.cursor, dtype=np.uint64)
    return out


def save_checkpoint(state: TrainState, path) -> None:
    write_container(path, state_tensors(state))


def _split(tensors: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    n = len(prefix)
    return {k[n:]: v for k, v in tensors.items() if k.startswith(prefix)}


def load_checkpoint(path, gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig | None,
                    cfg: TrainConfig) -> TrainState:
    """Rebuild a :class:`TrainState` for the given configs and fill it from ``path``.

    Every expected tensor must be present with the expected shape and no
    unknown names may appear.
    """
    tensors = read_container(path)
    state = init_state(gen_cfg, disc_cfg, cfg)
    expected = state_tensors(state)
    missing = sorted(set(expected) - set(tensors))
    unknown = sorted(set(tensors) - set(expected))
    if missing:
        raise CheckpointError(f"{path}: missing {len(missing)} tensors, e.g. {missing[:4]}")
    if unknown:
        raise CheckpointError(f"{path}: unknown tensors {unknown[:4]}")
    for name, arr in expected.items():
        if tensors[name].shape != arr.shape:
            raise CheckpointError(
                f"{path}: {name} has shape {tensors[name].shape}, config expects {arr.shape}")
    state.generator.load_state_dict(_split(tensors, "gen."))
    state.opt_g.load_state_dict(_split(tensors, "opt_g."))
    if state.discriminator is not None:
        state.discriminator.load_state_dict(_split(tensors, "disc."))
        state.opt_d.load_state_dict(_split(tensors, "opt_d."))
    state.step = int(tensors["state.step"][0])
    epoch, index = (int(v) for v in tensors["state.cursor"])
    state.cursor = (epoch, index)
    return state


def load_generator(path, gen_cfg: GeneratorConfig) -> Module:
    """Generator weights only, for inference; other tensors in the file are ignored."""
    tensors = _split(read_container(path), "gen.")
    gen = build_generator(gen_cfg)
    expected = gen.state_dict()
    for name, arr in expected.items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing gen.{name}")
        if tensors[name].shape != arr.shape:
            raise CheckpointError(
                f"{path}: gen.{name} has shape {tensors[name].shape}, config expects {arr.shape}")
    extra = sorted(set(tensors) - set(expected))
    if extra:
        raise CheckpointError(f"{path}: unknown generator tensors {['gen.' + e for e in extra[:4]]}")
    gen.load_state_dict(tensors)
    return gen
