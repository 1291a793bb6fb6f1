"""The training loop wiring global and local branches, plus checkpointing.

One step executes, in order: augment, query forwards on both views, key
forwards on both views with attention capture, mask construction and
application per view, key forwards on both masked views, combined loss,
backward, optimizer step on the query encoder, momentum update. With
strategy "none" the local branch is skipped entirely.

Checkpoint file layout (little-endian):
  magic "LDSC" | u32 version | u32 len + config JSON (UTF-8)
  u32 n_params | per param: u32 name_len + name, u32 rank, u32 dims...
  raw float32 payloads in table order
  u64 optimizer step count | u32 n_moment_params
  per query param in order: exp_avg payload, exp_avg_sq payload (float32)
  u32 len + rng state JSON
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import rng as rng_mod
from .augment import AugmentConfig, augment
from .data import Dataset
from .heads import DualEncoder, HeadConfig
from .losses import BranchOutputs, symmetric_loss, total_loss
from .masking import apply_mask, baseline_mask, fuse_all, select_pivotal
from .optim import AdamW, CosineSchedule
from .tensor import ConfigError, ContractError, NumericError, Tensor
from .vit import ViTConfig

__all__ = [
    "TrainConfig", "StepReport", "Trainer",
    "CheckpointError", "MagicError", "VersionError", "TruncatedError", "ShapeMismatchError",
    "CHECKPOINT_MAGIC", "CHECKPOINT_VERSION",
]

STRATEGIES = ("location", "random", "grid", "border", "none")

CHECKPOINT_MAGIC = b"LDSC"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """A checkpoint file could not be loaded."""


class MagicError(CheckpointError):
    """The file does not start with the checkpoint magic."""


class VersionError(CheckpointError):
    """The checkpoint format version is not supported."""


class TruncatedError(CheckpointError):
    """The file ended before the declared payload did."""


class ShapeMismatchError(CheckpointError):
    """A stored parameter shape disagrees with the declared shape table."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 30
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    weight_decay: float = 0.1
    momentum: float = 0.99
    temperature: float = 0.2
    masking_ratio: float = 0.7
    strategy: str = "location"
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 <= self.masking_ratio < 1.0:
            raise ConfigError(f"masking_ratio must lie in [0, 1), got {self.masking_ratio}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")


@dataclass
class StepReport:
    step: int
    epoch: int
    loss: float
    loss_g: float
    loss_l: float | None
    lr: float

    def metrics_line(self) -> str:
        rec = {"step": self.step, "epoch": self.epoch, "loss": self.loss, "loss_g": self.loss_g}
        if self.loss_l is not None:
            rec["loss_l"] = self.loss_l
        rec["lr"] = self.lr
        return json.dumps(rec)


class Trainer:
    """Drives the combined global-local objective over a dataset."""

    def __init__(self, dual: DualEncoder, dataset: Dataset, cfg: TrainConfig,
                 aug_cfg: AugmentConfig):
        if len(dataset) < cfg.batch_size:
            raise ConfigError(f"batch_size {cfg.batch_size} exceeds dataset size {len(dataset)}")
        self.dual = dual
        self.dataset = dataset
        self.cfg = cfg
        self.aug_cfg = aug_cfg
        self.steps_per_epoch = len(dataset) // cfg.batch_size
        self.schedule = CosineSchedule(cfg.lr_max, cfg.lr_min,
                                       total_steps=cfg.epochs * self.steps_per_epoch)
        self.optimizer = AdamW(dual.query_params(), lr=cfg.lr_max,
                               weight_decay=cfg.weight_decay)
        opt_ids = {id(p) for p in self.optimizer.params}
        for p in dual.key_params():
            if id(p) in opt_ids:
                raise ContractError("momentum encoder parameter found in optimizer state")
        self.rng = rng_mod.stream(cfg.seed, "train")
        self.epoch = 0        # completed epochs
        self.global_step = 0

    # -- single step ----------------------------------------------------------

    def train_step(self, batch: np.ndarray, batch_id: str = "") -> StepReport:
        cfg = self.cfg
        views1, views2 = [], []
        for img in batch:
            v1, v2 = augment(img, self.aug_cfg, self.rng)
            views1.append(v1)
            views2.append(v2)
        x1 = np.stack(views1)
        x2 = np.stack(views2)

        z_q1 = self.dual.encode_query(Tensor(x1))
        z_q2 = self.dual.encode_query(Tensor(x2))
        z_k1, attn1 = self.dual.encode_key_with_attention(Tensor(x1))
        z_k2, attn2 = self.dual.encode_key_with_attention(Tensor(x2))

        if cfg.strategy == "none":
            loss_g = symmetric_loss(z_q1, z_q2, z_k1, z_k2, cfg.temperature)
            loss = loss_g
            loss_l_val = None
        else:
            xm1 = self._masked_views(x1, attn1)
            xm2 = self._masked_views(x2, attn2)
            z_l1 = self.dual.encode_key(Tensor(xm1))
            z_l2 = self.dual.encode_key(Tensor(xm2))
            outputs = BranchOutputs(z_q1=z_q1, z_q2=z_q2, z_k1=z_k1, z_k2=z_k2,
                                    z_l1=z_l1, z_l2=z_l2)
            loss, loss_g, loss_l = total_loss(outputs, cfg.temperature)
            loss_l_val = loss_l.item()

        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise NumericError(f"non-finite loss {loss_val} on batch {batch_id!r} "
                               f"at step {self.global_step}")

        lr = self.schedule.lr(self.global_step)
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step(lr)
        self.dual.momentum_update()

        report = StepReport(step=self.global_step, epoch=self.epoch + 1,
                            loss=loss_val, loss_g=loss_g.item(),
                            loss_l=loss_l_val, lr=lr)
        self.global_step += 1
        return report

    def _masked_views(self, views: np.ndarray, attn) -> np.ndarray:
        cfg = self.cfg
        vit_cfg = self.dual.vit_cfg
        if cfg.strategy == "location":
            masks = [select_pivotal(fi, cfg.masking_ratio) for fi in fuse_all(attn)]
        else:
            masks = [baseline_mask(cfg.strategy, vit_cfg, cfg.masking_ratio, self.rng)
                     for _ in range(views.shape[0])]
        return np.stack([apply_mask(m, v, vit_cfg) for m, v in zip(masks, views)])

    # -- epoch loop -------------------------------------------------------------

    def run(self, out_dir: str | Path | None = None, save_every: int = 0,
            on_step=None) -> list[StepReport]:
        """Train from the current epoch to cfg.epochs.

        Writes one metrics line per step to out_dir/metrics.jsonl and, when
        save_every > 0, a checkpoint every that-many epochs plus one at the
        end. Incomplete trailing batches are dropped.
        """
        out_path = Path(out_dir) if out_dir is not None else None
        metrics_fh = None
        if out_path is not None:
            out_path.mkdir(parents=True, exist_ok=True)
            metrics_fh = open(out_path / "metrics.jsonl", "a", encoding="utf-8")
        reports: list[StepReport] = []
        m = len(self.dataset)
        bsz = self.cfg.batch_size
        try:
            while self.epoch < self.cfg.epochs:
                perm = self.rng.permutation(m)
                for i in range(self.steps_per_epoch):
                    idx = perm[i * bsz: (i + 1) * bsz]
                    batch = self.dataset.images[idx]
                    report = self.train_step(batch, batch_id=f"epoch{self.epoch + 1}/batch{i}")
                    reports.append(report)
                    if metrics_fh is not None:
                        metrics_fh.write(report.metrics_line() + "\n")
                    if on_step is not None:
                        on_step(report)
                self.epoch += 1
                if out_path is not None and save_every > 0 and (
                        self.epoch % save_every == 0 or self.epoch == self.cfg.epochs):
                    self.save_checkpoint(out_path / f"checkpoint-{self.epoch}.ldsc")
        finally:
            if metrics_fh is not None:
                metrics_fh.close()
        return reports

    # -- persistence ------------------------------------------------------------

    def _config_blob(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "train": asdict(self.cfg),
            "augment": _jsonable(asdict(self.aug_cfg)),
            "vit": asdict(self.dual.vit_cfg),
            "head": asdict(self.dual.head_cfg),
            "epoch": self.epoch,
            "global_step": self.global_step,
        }

    def save_checkpoint(self, path: str | Path) -> None:
        named = self.dual.named_query_params() + self.dual.named_key_params()
        blob = json.dumps(self._config_blob(), sort_keys=True,
                          separators=(",", ":")).encode("utf-8")
        rng_blob = json.dumps(rng_mod.state_to_json(self.rng), sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", CHECKPOINT_VERSION))
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<I", len(named)))
            for name, p in named:
                nb = name.encode("utf-8")
                fh.write(struct.pack("<I", len(nb)))
                fh.write(nb)
                fh.write(struct.pack("<I", p.data.ndim))
                fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            for _, p in named:
                fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
            fh.write(struct.pack("<Q", self.optimizer.step_count))
            fh.write(struct.pack("<I", len(self.optimizer.params)))
            for m, v in zip(self.optimizer.exp_avg, self.optimizer.exp_avg_sq):
                fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())
                fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
            fh.write(struct.pack("<I", len(rng_blob)))
            fh.write(rng_blob)

    @classmethod
    def load_checkpoint(cls, path: str | Path, dataset: Dataset,
                        epochs: int | None = None) -> "Trainer":
        """Rebuild a trainer whose next step continues the saved run.

        ``epochs`` extends (or shortens) the target epoch count; note that
        it also rescales the cosine schedule, so an extended run is not a
        bit-exact continuation of the original schedule.
        """
        raw = parse_checkpoint(path)
        train_kwargs = dict(raw["config"]["train"])
        if epochs is not None:
            train_kwargs["epochs"] = int(epochs)
        cfg = TrainConfig(**train_kwargs)
        aug = raw["config"]["augment"]
        aug_cfg = AugmentConfig(crop_scale_range=tuple(aug["crop_scale_range"]),
                                flip_prob=aug["flip_prob"],
                                jitter_strength=aug["jitter_strength"],
                                grayscale_prob=aug["grayscale_prob"],
                                seed=aug["seed"])
        dual = _encoder_from_parsed(raw)
        trainer = cls(dual, dataset, cfg, aug_cfg)
        trainer.epoch = int(raw["config"]["epoch"])
        trainer.global_step = int(raw["config"]["global_step"])
        trainer.optimizer.step_count = raw["opt_step_count"]
        for buf, src in zip(trainer.optimizer.exp_avg, raw["exp_avg"]):
            buf[...] = src
        for buf, src in zip(trainer.optimizer.exp_avg_sq, raw["exp_avg_sq"]):
            buf[...] = src
        trainer.rng = rng_mod.state_from_json(raw["rng_state"])
        return trainer


def _jsonable(d: dict) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedError(f"checkpoint truncated while reading {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def parse_checkpoint(path: str | Path) -> dict:
    """Parse and validate a checkpoint file without touching any live state."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise MagicError(f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise VersionError(f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        config = json.loads(_read_exact(fh, blob_len, "config blob").decode("utf-8"))
        (n_params,) = struct.unpack("<I", _read_exact(fh, 4, "parameter count"))
        table: list[tuple[str, tuple[int, ...]]] = []
        for i in range(n_params):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, f"name length #{i}"))
            name = _read_exact(fh, name_len, f"name #{i}").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"rank of {name}"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, f"dims of {name}"))
            table.append((name, dims))
        params: dict[str, np.ndarray] = {}
        for name, dims in table:
            count = int(np.prod(dims)) if dims else 1
            payload = _read_exact(fh, 4 * count, f"payload of {name}")
            params[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        (opt_steps,) = struct.unpack("<Q", _read_exact(fh, 8, "optimizer step count"))
        (n_moments,) = struct.unpack("<I", _read_exact(fh, 4, "moment count"))
        query_table = [(n, d) for n, d in table if n.startswith("f_q.")]
        if n_moments != len(query_table):
            raise ShapeMismatchError(f"checkpoint stores {n_moments} moment buffers "
                                     f"for {len(query_table)} query parameters")
        exp_avg, exp_avg_sq = [], []
        for name, dims in query_table:
            count = int(np.prod(dims)) if dims else 1
            exp_avg.append(np.frombuffer(_read_exact(fh, 4 * count, f"exp_avg of {name}"),
                                         dtype="<f4").reshape(dims).copy())
            exp_avg_sq.append(np.frombuffer(_read_exact(fh, 4 * count, f"exp_avg_sq of {name}"),
                                            dtype="<f4").reshape(dims).copy())
        (rng_len,) = struct.unpack("<I", _read_exact(fh, 4, "rng state length"))
        rng_state = json.loads(_read_exact(fh, rng_len, "rng state").decode("utf-8"))
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError("checkpoint has trailing bytes after the rng state")
    return {"config": config, "params": params, "opt_step_count": opt_steps,
            "exp_avg": exp_avg, "exp_avg_sq": exp_avg_sq, "rng_state": rng_state}


def _encoder_from_parsed(raw: dict) -> DualEncoder:
    config = raw["config"]
    vit_cfg = ViTConfig(**config["vit"])
    head_cfg = HeadConfig(**config["head"])
    dual = DualEncoder(vit_cfg, head_cfg, momentum=config["train"]["momentum"],
                       rng=rng_mod.stream(config["train"]["seed"], "init"))
    named = dict(dual.named_query_params() + dual.named_key_params())
    stored = raw["params"]
    if set(named) != set(stored):
        missing = sorted(set(named) ^ set(stored))
        raise ShapeMismatchError(f"checkpoint parameter names do not match the model: {missing[:4]}...")
    for name, p in named.items():
        src = stored[name]
        if src.shape != p.data.shape:
            raise ShapeMismatchError(f"parameter {name} has shape {src.shape} in the checkpoint, "
                                     f"model expects {tuple(p.data.shape)}")
        p.data = src.astype(np.float32)
    return dual


def load_encoder(path: str | Path) -> DualEncoder:
    """Load just the dual encoder from a checkpoint (for evaluation)."""
    return _encoder_from_parsed(parse_checkpoint(path))
