"""Frozen-feature probes, mismatch-detection accuracy and the token-count benchmark."""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import ops
from .data import ImageDataset, TokenBatch, dense_tokens, patchify, sparse_tokens, write_dlma
from .model import Params, ViTConfig, cls_output, dilemma_logits, encode, init_params
from .rng import derive_stream, sample_corruption_plan
from .tensor import Tensor, no_grad
from .train import AdamWState, adamw_step

log = logging.getLogger(__name__)


class ProbeUsageError(ValueError):
    """Empty feature sets, k larger than the train set, single-class training data."""


@dataclass
class FeatureSet:
    features: np.ndarray
    labels: np.ndarray
    source: str = "student/final"

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.labels = np.asarray(self.labels)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ProbeUsageError("features must be (n, D) with one label per row")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")

    def __len__(self) -> int:
        return len(self.labels)


def extract_features(
    params: Params,
    cfg: ViTConfig,
    dataset: ImageDataset,
    strip_positions: bool = False,
    batch_size: int = 256,
    source: str = "student",
) -> FeatureSet:
    """Final-layer CLS output of every image, dense and uncorrupted.

    ``strip_positions`` removes every positional contribution, so the result
    is invariant to the order of the image's tiles.
    """
    chunks = []
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            tiles = patchify(dataset.images[start:start + batch_size], cfg.patch_size)
            out = encode(params, cfg, dense_tokens(tiles, strip_positions), strip_positions)
            chunks.append(cls_output(out).data.astype(np.float64))
    feats = np.concatenate(chunks) if chunks else np.zeros((0, cfg.token_dim))
    tag = f"{source}/final" + ("/no-position" if strip_positions else "")
    return FeatureSet(feats, dataset.labels.copy(), tag)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def knn_predict(train: FeatureSet, test: FeatureSet, k: int = 20, tau: float = 0.07, chunk: int = 1024) -> np.ndarray:
    """Cosine-similarity top-k vote weighted by exp(sim / tau)."""
    if len(train) == 0 or len(test) == 0:
        raise ProbeUsageError("k-NN needs non-empty train and test sets")
    if not 1 <= k <= len(train):
        raise ProbeUsageError(f"k={k} must lie in [1, {len(train)}]")
    classes, train_idx = np.unique(train.labels, return_inverse=True)
    a = _unit_rows(train.features)
    preds = np.empty(len(test), dtype=classes.dtype)
    for start in range(0, len(test), chunk):
        sim = _unit_rows(test.features[start:start + chunk]) @ a.T
        top = np.argpartition(-sim, k - 1, axis=1)[:, :k]
        top_sim = np.take_along_axis(sim, top, axis=1)
        votes = np.zeros((len(sim), len(classes)))
        np.add.at(votes, (np.arange(len(sim))[:, None], train_idx[top]), np.exp(top_sim / tau))
        preds[start:start + len(sim)] = classes[votes.argmax(axis=1)]
    return preds


def knn_classify(train: FeatureSet, test: FeatureSet, k: int = 20, tau: float = 0.07) -> float:
    return float(np.mean(knn_predict(train, test, k, tau) == test.labels))


@dataclass
class ProbeResult:
    accuracy: float
    lr: float
    batch_size: int
    normalize: bool
    grid: list[dict] = field(default_factory=list)


DEFAULT_PROBE_GRID = {"lr": (1e-2, 1e-3, 1e-4), "batch_size": (128, 512), "normalize": (True, False)}


def _train_linear(x: np.ndarray, y: np.ndarray, n_classes: int, lr: float, batch_size: int, epochs: int, seed: int) -> Params:
    gen = np.random.default_rng(seed)
    params = {
        "weight": Tensor(np.zeros((x.shape[1], n_classes)), requires_grad=True),
        "bias": Tensor(np.zeros(n_classes), requires_grad=True),
    }
    state = AdamWState()
    for _ in range(epochs):
        order = gen.permutation(len(x))
        for start in range(0, len(x), batch_size):
            idx = order[start:start + batch_size]
            loss = ops.cross_entropy(ops.linear(Tensor(x[idx]), params["weight"], params["bias"]), y[idx])
            for p in params.values():
                p.grad = None
            loss.backward()
            adamw_step(params, state, lr, weight_decay=0.0)
    return params


def linear_probe(
    train: FeatureSet,
    test: FeatureSet,
    grid: Optional[dict] = None,
    epochs: int = 30,
    seed: int = 0,
) -> ProbeResult:
    """Softmax linear classifier on frozen features over a settings grid.

    ``normalize`` standardises each dimension with train-set mean and std.
    Returns the best test accuracy with its settings; every grid point is
    kept in ``grid``.
    """
    grid = grid or DEFAULT_PROBE_GRID
    classes, y_train = np.unique(train.labels, return_inverse=True)
    if len(classes) < 2:
        raise ProbeUsageError("linear probe needs at least two classes in the train set")
    if len(test) == 0:
        raise ProbeUsageError("empty test set")
    lookup = {c: i for i, c in enumerate(classes)}
    y_test = np.array([lookup.get(c, -1) for c in test.labels])
    rows = []
    for lr, bs, norm in itertools.product(grid["lr"], grid["batch_size"], grid["normalize"]):
        x_tr, x_te = train.features.astype(np.float64), test.features.astype(np.float64)
        if norm:
            mu, sd = x_tr.mean(axis=0), x_tr.std(axis=0) + 1e-6
            x_tr, x_te = (x_tr - mu) / sd, (x_te - mu) / sd
        params = _train_linear(x_tr, y_train, len(classes), lr, bs, epochs, seed)
        with no_grad():
            logits = x_te @ params["weight"].data + params["bias"].data
        acc = float(np.mean(logits.argmax(axis=1) == y_test))
        rows.append({"lr": lr, "batch_size": bs, "normalize": norm, "accuracy": acc})
        log.info("linear probe lr=%g bs=%d normalize=%s -> %.4f", lr, bs, norm, acc)
    best = max(rows, key=lambda r: r["accuracy"])
    return ProbeResult(best["accuracy"], best["lr"], best["batch_size"], best["normalize"], rows)


def mismatch_detection_accuracy(
    params: Params,
    cfg: ViTConfig,
    dataset: ImageDataset,
    sparsity: float,
    theta: float,
    n_batches: Optional[int] = None,
    batch_size: int = 128,
    seed: int = 0,
) -> float:
    """Token-level accuracy of the mismatch head on freshly corrupted, un-augmented images.

    A token is predicted mismatched when its logit is positive.
    """
    n = len(dataset) if n_batches is None else min(len(dataset), n_batches * batch_size)
    correct = total = 0
    with no_grad():
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(start + batch_size, n))
            tiles = patchify(dataset.images[idx], cfg.patch_size)
            plans = [
                sample_corruption_plan(cfg.n_positions, sparsity, theta, derive_stream(seed, "md-eval", 0, int(i)))
                for i in idx
            ]
            batch = sparse_tokens(tiles, plans, "dilemma", cfg.patch_size)
            logits = dilemma_logits(params, encode(params, cfg, batch)).data
            correct += int(np.sum((logits > 0) == (batch.aux_labels == 1)))
            total += logits.size
    return correct / total


@dataclass
class BenchRow:
    tokens: int
    mean_ms: float
    std_ms: float
    speedup: float


def throughput_benchmark(
    cfg: ViTConfig,
    token_counts: Sequence[int],
    repeats: int = 5,
    warmup: int = 1,
    batch_size: int = 32,
    seed: int = 0,
) -> list[BenchRow]:
    """Mean forward+backward wall time of the encoder per kept-token count.

    ``speedup`` is relative to the dense (N-token) time, measured alongside
    when N is not among ``token_counts``.
    """
    n = cfg.n_positions
    counts = list(dict.fromkeys(int(t) for t in token_counts))
    for t in counts:
        if not 1 <= t <= n:
            raise ValueError(f"token count {t} outside [1, {n}]")
    measure = counts if n in counts else counts + [n]
    params = init_params(cfg, derive_stream(seed, "bench-init"))
    gen = derive_stream(seed, "bench-data").gen
    tiles = gen.uniform(0, 1, size=(batch_size, n, cfg.patch_dim)).astype(np.float32)
    times: dict[int, list[float]] = {}
    for t in measure:
        plan_gen = derive_stream(seed, "bench-plan", 0, t).gen
        kept = np.sort(np.stack([plan_gen.permutation(n)[:t] for _ in range(batch_size)]), axis=1)
        sub = np.take_along_axis(tiles, kept[..., None], axis=1)
        zeros = np.zeros_like(kept)
        batch = TokenBatch(sub, kept + 1, kept, zeros, zeros, 1.0 - t / n)
        samples = []
        for r in range(warmup + repeats):
            start = time.perf_counter()
            out = encode(params, cfg, batch)
            ops.mean(out * out).backward()
            elapsed = (time.perf_counter() - start) * 1e3
            for p in params.values():
                p.grad = None
            if r >= warmup:
                samples.append(elapsed)
        times[t] = samples
    dense = float(np.mean(times[n]))
    return [
        BenchRow(t, float(np.mean(times[t])), float(np.std(times[t])), dense / float(np.mean(times[t])))
        for t in counts
    ]


def export_features(path, features: FeatureSet) -> None:
    """Write a feature set in the flat binary dataset container."""
    write_dlma(path, features.features.astype(np.float32), features.labels)
