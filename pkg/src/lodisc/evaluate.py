"""Evaluation protocols: linear probing, image retrieval, attention focus.

Features for both protocols are the query backbone's class-token
embeddings with the MLP heads removed, extracted deterministically from
un-augmented images. Retrieval ranks by cosine similarity with ties broken
by ascending gallery index; queries whose label has no gallery positive
are excluded and tallied.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as rng_mod
from .data import Dataset
from .heads import DualEncoder
from .masking import expand_mask, fuse_all, select_pivotal
from .optim import SGD, CosineSchedule
from .tensor import ConfigError, ContractError, Tensor, cross_entropy, linear, no_grad

__all__ = ["FeatureBank", "ProbeConfig", "RetrievalReport", "FocusReport",
           "extract_features", "linear_probe", "retrieve", "foreground_focus"]


@dataclass
class FeatureBank:
    """Frozen backbone embeddings with labels for one dataset split."""

    features: np.ndarray   # (M, D) float32
    labels: np.ndarray     # (M,) int64
    split: str = "train"

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise ContractError(f"features/labels disagree: {self.features.shape[0]} vs {self.labels.shape[0]}")

    def __len__(self) -> int:
        return self.features.shape[0]

    def normalized(self) -> np.ndarray:
        """Rows scaled to unit L2 norm, in float64."""
        f = self.features.astype(np.float64)
        norms = np.sqrt((f * f).sum(axis=1, keepdims=True))
        return f / np.maximum(norms, 1e-12)


def extract_features(dataset: Dataset, dual: DualEncoder, split: str = "train",
                     batch_size: int = 128) -> FeatureBank:
    """Deterministic, augmentation-free class-token embeddings of f_q."""
    if len(dataset) == 0:
        raise ContractError("cannot extract features from an empty dataset")
    chunks = []
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            batch = Tensor(dataset.images[start: start + batch_size])
            chunks.append(dual.backbone_q(batch).data)
    return FeatureBank(features=np.concatenate(chunks), labels=dataset.labels.copy(), split=split)


@dataclass(frozen=True)
class ProbeConfig:
    lr: float = 0.5
    epochs: int = 100
    batch_size: int = 256
    weight_decay: float = 0.0
    momentum: float = 0.9
    seed: int = 0


def linear_probe(train: FeatureBank, test: FeatureBank, cfg: ProbeConfig = ProbeConfig()) -> dict:
    """Train one linear layer on frozen features; report test Top-1/Top-5.

    Top-5 counts a hit when the true label is among the 5 highest logits,
    ties broken by ascending class index.
    """
    train_classes = set(int(c) for c in np.unique(train.labels))
    if len(train_classes) < 2:
        raise ContractError(f"linear probe needs at least 2 classes, got {len(train_classes)}")
    if not set(int(c) for c in np.unique(test.labels)) <= train_classes:
        raise ContractError("test labels are not a subset of train labels")
    n_classes = int(train.labels.max()) + 1
    dim = train.features.shape[1]

    w = Tensor(np.zeros((dim, n_classes), dtype=np.float32), requires_grad=True)
    b = Tensor(np.zeros(n_classes, dtype=np.float32), requires_grad=True)
    opt = SGD([w, b], lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    m = len(train)
    bsz = min(cfg.batch_size, m)
    steps_per_epoch = max(1, m // bsz)
    schedule = CosineSchedule(cfg.lr, 0.0, total_steps=cfg.epochs * steps_per_epoch)
    gen = rng_mod.stream(cfg.seed, "probe")

    step = 0
    for _ in range(cfg.epochs):
        perm = gen.permutation(m)
        for i in range(steps_per_epoch):
            idx = perm[i * bsz: (i + 1) * bsz]
            logits = linear(Tensor(train.features[idx]), w, b)
            loss = cross_entropy(logits, train.labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step(schedule.lr(step))
            step += 1

    with no_grad():
        logits = linear(Tensor(test.features), w, b).data
    order = np.argsort(-logits, axis=1, kind="stable")
    top1 = float((order[:, 0] == test.labels).mean())
    k = min(5, n_classes)
    top5 = float((order[:, :k] == test.labels[:, None]).any(axis=1).mean())
    return {"top1": top1, "top5": top5}


@dataclass
class RetrievalReport:
    """Rank-1/Rank-5/mAP over evaluated queries; metrics are None when
    every query was excluded for lack of a gallery positive."""

    rank1: float | None
    rank5: float | None
    map: float | None
    excluded_queries: int
    evaluated_queries: int

    @property
    def empty_evaluation(self) -> bool:
        return self.evaluated_queries == 0


def retrieve(query: FeatureBank, gallery: FeatureBank) -> RetrievalReport:
    """Cosine-similarity retrieval; self-matches are excluded when the
    query bank is the gallery bank."""
    if len(query) == 0 or len(gallery) == 0:
        raise ContractError("retrieval needs non-empty banks")
    same_bank = query is gallery
    sims = query.normalized() @ gallery.normalized().T
    gallery_idx = np.arange(len(gallery))

    hits1 = hits5 = 0
    ap_sum = 0.0
    evaluated = excluded = 0
    for i in range(len(query)):
        cand = gallery_idx[gallery_idx != i] if same_bank else gallery_idx
        order = cand[np.argsort(-sims[i, cand], kind="stable")]
        rel = gallery.labels[order] == query.labels[i]
        n_pos = int(rel.sum())
        if n_pos == 0:
            excluded += 1
            continue
        hits1 += bool(rel[:1].any())
        hits5 += bool(rel[:5].any())
        ranks = np.flatnonzero(rel) + 1
        precisions = np.cumsum(rel)[ranks - 1] / ranks
        ap_sum += float(precisions.mean())
        evaluated += 1

    if evaluated == 0:
        return RetrievalReport(rank1=None, rank5=None, map=None,
                               excluded_queries=excluded, evaluated_queries=0)
    return RetrievalReport(rank1=hits1 / evaluated, rank5=hits5 / evaluated,
                           map=ap_sum / evaluated, excluded_queries=excluded,
                           evaluated_queries=evaluated)


@dataclass
class FocusReport:
    """How much more often kept patches land on foreground than chance.

    ``per_image`` holds (foreground density inside kept pixels) divided by
    (foreground area fraction) for each image; the mean and its bootstrap
    interval summarize the set.
    """

    mean_ratio: float
    ci_low: float
    ci_high: float
    per_image: np.ndarray
    skipped: int


def foreground_focus(dataset: Dataset, dual: DualEncoder, ratio: float,
                     batch_size: int = 128, n_boot: int = 1000, seed: int = 0) -> FocusReport:
    """Overlap of location-wise kept patches with the known foreground."""
    if dataset.foreground is None:
        raise ContractError("dataset has no foreground masks")
    if len(dataset) == 0:
        raise ContractError("empty dataset")
    vit_cfg = dual.vit_cfg
    ratios = []
    skipped = 0
    for start in range(0, len(dataset), batch_size):
        images = dataset.images[start: start + batch_size]
        fg = dataset.foreground[start: start + batch_size]
        _, attn = dual.encode_key_with_attention(Tensor(images))
        for j, fi in enumerate(fuse_all(attn)):
            mask = select_pivotal(fi, ratio)
            kept = expand_mask(mask, vit_cfg).values.astype(bool)
            area = fg[j].mean()
            if area == 0:
                skipped += 1
                continue
            overlap = fg[j][kept].mean()
            ratios.append(float(overlap / area))
    per_image = np.asarray(ratios)
    if per_image.size == 0:
        raise ContractError("no image had a non-empty foreground")
    gen = rng_mod.stream(seed, "bootstrap")
    boot = np.empty(n_boot)
    for t in range(n_boot):
        boot[t] = per_image[gen.integers(0, per_image.size, size=per_image.size)].mean()
    lo, hi = np.percentile(boot, [2.5, 97.5])
    return FocusReport(mean_ratio=float(per_image.mean()), ci_low=float(lo),
                       ci_high=float(hi), per_image=per_image, skipped=skipped)
