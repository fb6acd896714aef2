"""Image-quality metrics: SSIM, FID over pluggable features, Inception Score.

No pretrained network is bundled.  FID runs on whatever a
:class:`FeatureProvider` returns (pooled pixels by default, or embeddings
precomputed elsewhere and stored in an embedding file), and IS on class
probabilities from a :class:`ClassProbProvider`.
"""
from __future__ import annotations

import math
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ContractError, DimensionError, Tensor


class NumericError(ArithmeticError):
    pass


# reference values from the published comparison (Cityscapes labels -> photo,
# Inception-V3 features); reported for orientation only, never reproduced here
REFERENCE_ROWS = (
    ("ViT cGAN", 939.0, 1.281, 0.46),
    ("U-Net", 4318.0, 1.280, 0.36),
    ("Autoencoder", 6434.0, 1.343, 0.25),
)


# --------------------------------------------------------------------- SSIM

def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_channel(x, y, w, c1, c2) -> float:
    k = w.shape[0]
    wx = sliding_window_view(x, (k, k))
    wy = sliding_window_view(y, (k, k))

    def local(a):
        return np.tensordot(a, w, axes=([2, 3], [0, 1]))

    mu_x, mu_y = local(wx), local(wy)
    sxx = local(wx * wx) - mu_x * mu_x
    syy = local(wy * wy) - mu_y * mu_y
    sxy = local(wx * wy) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(x, y, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 2.0) -> float:
    """Mean SSIM over every valid window position, averaged over channels.

    ``x``/``y`` are (h, w) or (c, h, w); ``data_range`` defaults to 2 for
    images normalized to [-1, 1].
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"ssim: shapes differ, {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[None], y[None]
    if x.ndim != 3:
        raise DimensionError(f"ssim expects (h, w) or (c, h, w), got {x.shape}")
    if min(x.shape[1:]) < window:
        raise DimensionError(f"image {x.shape[1:]} smaller than the {window}x{window} window")
    w = gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    return float(np.mean([_ssim_channel(x[c], y[c], w, c1, c2) for c in range(x.shape[0])]))


def laplacian_energy(images) -> float:
    """Mean absolute 4-neighbour Laplacian over interior pixels; a sharpness proxy."""
    x = np.asarray(images, dtype=np.float64)
    lap = (x[..., 1:-1, :-2] + x[..., 1:-1, 2:] + x[..., :-2, 1:-1] + x[..., 2:, 1:-1]
           - 4.0 * x[..., 1:-1, 1:-1])
    return float(np.abs(lap).mean())


# ---------------------------------------------------------------------- FID

@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mean.shape[0]
        if self.mean.ndim != 1 or self.cov.shape != (d, d):
            raise DimensionError(f"mean {self.mean.shape} and cov {self.cov.shape} disagree")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def from_features(cls, feats) -> "GaussianStats":
        """Sample mean and unbiased (n - 1) covariance of (n, d) features."""
        f = np.asarray(feats, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 2:
            raise ContractError(f"need an (n >= 2, d) feature matrix, got shape {f.shape}")
        mu = f.mean(axis=0)
        xc = f - mu
        return cls(mu, xc.T @ xc / (f.shape[0] - 1))


def _check_psd(name: str, cov: np.ndarray) -> None:
    if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-12):
        raise ContractError(f"{name} covariance is not symmetric")
    scale = max(1.0, float(np.abs(np.diag(cov)).max()))
    if np.linalg.eigvalsh(cov).min() < -1e-8 * scale:
        raise ContractError(f"{name} covariance is not positive semi-definite")


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def fid(a: GaussianStats, b: GaussianStats) -> float:
    """|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^1/2).

    The trace of the square root is taken as tr((S_a^1/2 S_b S_a^1/2)^1/2),
    a symmetric PSD product whose eigenvalues (negatives clipped to 0)
    share the trace of (S_a S_b)^1/2.
    """
    if a.dim != b.dim:
        raise DimensionError(f"fid: feature dims differ, {a.dim} vs {b.dim}")
    _check_psd("first", a.cov)
    _check_psd("second", b.cov)
    root_a = _psd_sqrt(a.cov)
    prod = root_a @ b.cov @ root_a
    vals = np.linalg.eigvalsh((prod + prod.T) / 2)
    tr_root = float(np.sqrt(np.clip(vals, 0.0, None)).sum())
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_root)
    if not math.isfinite(value):
        raise NumericError("fid: non-finite result from the matrix square root")
    return max(value, 0.0)


# ----------------------------------------------------------------------- IS

def _check_probs(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 1:
        raise ContractError(f"expected (n_images, n_classes) probabilities, got {p.shape}")
    if (p < 0).any() or np.abs(p.sum(axis=1) - 1.0).max() > 1e-6:
        raise ContractError("every probability row must be non-negative and sum to 1")
    return p


def _is(p: np.ndarray) -> float:
    marginal = p.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0)
    return float(np.exp(terms.sum(axis=1).mean()))


def inception_score(probs) -> float:
    """exp(mean_i KL(p(y|x_i) || p(y))), with p(y) the mean row."""
    return _is(_check_probs(probs))


def inception_score_splits(probs, splits: int) -> tuple[float, float]:
    """Mean and std of the score over ``splits`` contiguous chunks."""
    p = _check_probs(probs)
    if not 1 <= splits <= p.shape[0]:
        raise ContractError(f"splits must be in [1, {p.shape[0]}]")
    scores = [_is(chunk) for chunk in np.array_split(p, splits)]
    return float(np.mean(scores)), float(np.std(scores))


# ---------------------------------------------------------------- providers

class FeatureProvider(ABC):
    """Deterministic map from an image to a ``dim``-vector.

    ``key`` names the image (``<id>.target`` / ``<id>.output``) for
    providers that look features up instead of computing them.
    """

    dim: int
    name: str = "features"

    @abstractmethod
    def __call__(self, image: np.ndarray, key: str) -> np.ndarray: ...


class PooledPixelProvider(FeatureProvider):
    """Grayscale (channel mean) average-pooled to ``grid`` x ``grid``."""

    name = "pooled_pixels"

    def __init__(self, grid: int = 8):
        self.grid = grid
        self.dim = grid * grid

    def __call__(self, image, key=""):
        img = np.asarray(image, dtype=np.float64)
        gray = img.mean(axis=0) if img.ndim == 3 else img
        h, w = gray.shape
        g = self.grid
        if h % g or w % g:
            raise DimensionError(f"image {h}x{w} does not pool evenly to {g}x{g}")
        return gray.reshape(g, h // g, g, w // g).mean(axis=(1, 3)).reshape(-1)


def write_embeddings(path, records) -> None:
    """``records``: mapping or iterable of (id, vector); all vectors share one length."""
    items = records.items() if hasattr(records, "items") else records
    with open(path, "wb") as f:
        for key, vec in items:
            raw = key.encode("utf-8")
            f.write(struct.pack("<I", len(raw)) + raw)
            f.write(np.asarray(vec, dtype="<f4").tobytes())


def read_embeddings(path, dim: int) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    out, pos = {}, 0
    while pos < len(blob):
        if pos + 4 > len(blob):
            raise OSError(f"{path}: truncated record header at byte {pos}")
        (n,) = struct.unpack_from("<I", blob, pos)
        end = pos + 4 + n + 4 * dim
        if end > len(blob):
            raise OSError(f"{path}: truncated record at byte {pos}")
        key = blob[pos + 4 : pos + 4 + n].decode("utf-8")
        out[key] = np.frombuffer(blob, dtype="<f4", count=dim, offset=pos + 4 + n).astype(np.float64)
        pos = end
    return out


class EmbeddingFileProvider(FeatureProvider):
    """Looks up precomputed embeddings by image key."""

    name = "embedding_file"

    def __init__(self, path, dim: int):
        self.dim = dim
        self.path = str(path)
        self.table = read_embeddings(path, dim)

    def __call__(self, image, key):
        try:
            return self.table[key]
        except KeyError:
            raise KeyError(f"{self.path}: no embedding for {key!r}") from None


class ClassProbProvider(ABC):
    @abstractmethod
    def __call__(self, image: np.ndarray, key: str) -> np.ndarray: ...


class SoftmaxClassProvider(ClassProbProvider):
    """softmax(temperature * features) over a feature provider's output."""

    def __init__(self, features: FeatureProvider, temperature: float = 4.0):
        self.features, self.temperature = features, temperature

    def __call__(self, image, key=""):
        z = self.temperature * np.asarray(self.features(image, key), dtype=np.float64)
        e = np.exp(z - z.max())
        return e / e.sum()


# ------------------------------------------------------------------- report

@dataclass
class EvalReport:
    fid: float
    inception_score: float
    ssim_mean: float
    n: int
    provider: str = "pooled_pixels"

    def table(self) -> str:
        head = f"{'model':<28}{'FID':>12}{'IS':>10}{'SSIM':>10}"
        lines = [head, "-" * len(head),
                 f"{'this run':<28}{self.fid:>12.4f}{self.inception_score:>10.4f}"
                 f"{self.ssim_mean:>10.4f}",
                 "",
                 "reference (Cityscapes labels->photo, Inception-V3 features;",
                 "not reproduced, not comparable with the row above):"]
        for name, f, s, q in REFERENCE_ROWS:
            lines.append(f"{name:<28}{f:>12.0f}{s:>10.3f}{q:>10.2f}")
        return "\n".join(lines) + "\n"

    def key_values(self) -> str:
        rows = [f"fid={self.fid!r}", f"is={self.inception_score!r}",
                f"ssim_mean={self.ssim_mean!r}", f"n={self.n}", f"provider={self.provider}"]
        for name, f, s, q in REFERENCE_ROWS:
            tag = name.lower().replace("-", "_").replace(" ", "_")
            rows += [f"reference.{tag}.fid={f:g}", f"reference.{tag}.is={s:g}",
                     f"reference.{tag}.ssim={q:g}"]
        return "\n".join(rows) + "\n"


def run_generator(generator, inputs: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Inference in eval mode without recording a tape."""
    generator.eval()
    dtype = next(iter(generator.parameters()), Tensor(np.zeros(1, np.float32))).dtype
    outs = []
    for i in range(0, len(inputs), batch_size):
        outs.append(generator(Tensor(inputs[i : i + batch_size].astype(dtype))).data)
    return np.concatenate(outs)


def evaluate_model(generator, dataset, provider: FeatureProvider | None = None,
                   class_provider: ClassProbProvider | None = None,
                   batch_size: int = 8) -> EvalReport:
    n = len(dataset)
    if n == 0:
        raise ContractError("evaluate_model needs a non-empty dataset")
    provider = provider or PooledPixelProvider()
    class_provider = class_provider or SoftmaxClassProvider(provider)
    real, fake, probs, scores = [], [], [], []
    for start in range(0, n, batch_size):
        samples = [dataset[i] for i in range(start, min(n, start + batch_size))]
        outs = run_generator(generator, np.stack([s.input for s in samples]), batch_size)
        for s, out in zip(samples, outs):
            real.append(provider(s.target, f"{s.id}.target"))
            fake.append(provider(out, f"{s.id}.output"))
            probs.append(class_provider(out, f"{s.id}.output"))
            scores.append(ssim(out, s.target))
    return EvalReport(
        fid=fid(GaussianStats.from_features(real), GaussianStats.from_features(fake)),
        inception_score=inception_score(np.stack(probs)),
        ssim_mean=float(np.mean(scores)),
        n=n,
        provider=provider.name,
    )
