"""Paired samples, on-disk and synthetic datasets, and the seeded batcher."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from ..tensor import ContractError
from .imageio import from_uint8, load_image, save_image
from .rng import XorShift64Star, derive_seed
from .synthetic import SyntheticTaskSpec, render_pair_u8

INPUT_SUFFIX = ".input.png"
TARGET_SUFFIX = ".target.png"


class DataError(ValueError):
    pass


@dataclass
class PairedSample:
    input: np.ndarray   # (c1, h, w) float32 in [-1, 1]
    target: np.ndarray  # (c2, h, w)
    id: str

    def __post_init__(self):
        if self.input.ndim != 3 or self.target.ndim != 3:
            raise DataError(f"{self.id}: images must be (c, h, w)")
        if self.input.shape[1:] != self.target.shape[1:]:
            raise DataError(
                f"{self.id}: input {self.input.shape[1:]} and target "
                f"{self.target.shape[1:]} differ in spatial size")
        for arr in (self.input, self.target):
            if arr.size and (arr.min() < -1.0 or arr.max() > 1.0):
                raise DataError(f"{self.id}: values outside [-1, 1]")


@dataclass
class PairedBatch:
    inputs: np.ndarray   # (b, c1, h, w)
    targets: np.ndarray  # (b, c2, h, w)
    ids: list[str]

    def __len__(self):
        return len(self.ids)


def collate(samples: Sequence[PairedSample]) -> PairedBatch:
    return PairedBatch(np.stack([s.input for s in samples]),
                       np.stack([s.target for s in samples]),
                       [s.id for s in samples])


def synth_pair(spec: SyntheticTaskSpec, index: int) -> PairedSample:
    inp, tgt = render_pair_u8(spec, index)
    return PairedSample(from_uint8(inp), from_uint8(tgt), f"{index:05d}")


class SyntheticDataset:
    """``count`` pairs starting at ``offset``; rendered on access, cached."""

    def __init__(self, spec: SyntheticTaskSpec, count: int, offset: int = 0):
        self.spec, self.count, self.offset = spec, count, offset
        self._cache: dict[int, PairedSample] = {}

    def __len__(self):
        return self.count

    def __getitem__(self, i: int) -> PairedSample:
        if not 0 <= i < self.count:
            raise IndexError(i)
        if i not in self._cache:
            self._cache[i] = synth_pair(self.spec, self.offset + i)
        return self._cache[i]


class DirectoryDataset:
    """``<id>.input.png`` / ``<id>.target.png`` pairs in one directory, sorted by id."""

    def __init__(self, root):
        self.root = Path(root)
        if not self.root.is_dir():
            raise DataError(f"{self.root}: dataset directory not found")
        ids = sorted(p.name[: -len(INPUT_SUFFIX)] for p in self.root.glob("*" + INPUT_SUFFIX))
        missing = [i for i in ids if not (self.root / (i + TARGET_SUFFIX)).exists()]
        if missing:
            raise DataError(f"{self.root}: no target image for ids {missing[:5]}")
        self.ids = ids
        self._cache: dict[int, PairedSample] = {}

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i: int) -> PairedSample:
        if i not in self._cache:
            sid = self.ids[i]
            self._cache[i] = PairedSample(load_image(self.root / (sid + INPUT_SUFFIX)),
                                          load_image(self.root / (sid + TARGET_SUFFIX)), sid)
        return self._cache[i]


def write_pair(sample: PairedSample, root) -> None:
    root = Path(root)
    save_image(sample.input, root / (sample.id + INPUT_SUFFIX))
    save_image(sample.target, root / (sample.id + TARGET_SUFFIX))


class Batcher:
    """Endless seeded epochs; each epoch is a fresh permutation, remainder dropped.

    The iteration position ``(epoch, index)`` fully determines what comes
    next, which is what checkpoints store to resume mid-epoch.
    """

    def __init__(self, dataset, batch_size: int, seed: int, epoch: int = 0, index: int = 0):
        if batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {batch_size}")
        if len(dataset) == 0:
            raise ContractError("cannot batch an empty dataset")
        if len(dataset) < batch_size:
            raise ContractError(
                f"dataset of {len(dataset)} samples is smaller than batch_size {batch_size}")
        self.dataset, self.batch_size, self.seed = dataset, batch_size, seed
        self.epoch, self.index = epoch, index
        self.batches_per_epoch = len(dataset) // batch_size
        self._cached: tuple[int, list] = (-1, [])

    def epoch_order(self, epoch: int) -> list[int]:
        return XorShift64Star(derive_seed(self.seed, epoch)).permutation(len(self.dataset))

    def epoch_batches(self, epoch: int) -> list[list[int]]:
        order = self.epoch_order(epoch)
        b = self.batch_size
        return [order[k * b : (k + 1) * b] for k in range(self.batches_per_epoch)]

    @property
    def cursor(self) -> tuple[int, int]:
        return self.epoch, self.index

    def __iter__(self) -> Iterator[PairedBatch]:
        return self

    def __next__(self) -> PairedBatch:
        if self.index >= self.batches_per_epoch:
            self.epoch, self.index = self.epoch + 1, 0
        if self._cached[0] != self.epoch:
            self._cached = (self.epoch, self.epoch_batches(self.epoch))
        idx = self._cached[1][self.index]
        self.index += 1
        return collate([self.dataset[i] for i in idx])


def batcher(dataset, batch_size: int, seed: int) -> Batcher:
    return Batcher(dataset, batch_size, seed)

