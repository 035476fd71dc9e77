"""Training loop for the selector, direct-removal and PIT networks.

Every random draw in :func:`fit` is keyed on ``(seed, epoch)`` or
``(seed, global_step, example)``, so a run resumed from a checkpoint
follows exactly the trajectory of an uninterrupted one.
"""

from __future__ import annotations

import csv
import json
import logging
import shutil
import time
from dataclasses import asdict, dataclass, field, fields
from itertools import permutations
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError, InvalidArgumentError, NonFiniteLossError
from .nets import PitConfig, SelectorConfig, build_model, load_checkpoint, save_checkpoint
from .pit import pit_loss_torch
from .removal import removal_reference
from .signal import EPS, class_vector, log_mse_torch, mix_reference, snr_loss_torch
from .synth import load_dataset, read_manifest

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "loss_db", "dev_sdri_db", "wall_time_s")


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    grad_clip_norm: float = 5.0
    batch_size: int = 8
    max_epochs: int = 200
    steps_per_epoch: int = 0  # 0: dataset size // batch size
    target_count_distribution: tuple = (0.5, 0.5)  # P(I = 1), P(I = 2), ...
    loss_kind: str = "snr"  # snr | log_mse
    pit_loss_kind: str = "log_mse"  # log_mse | snr (experimental)
    inactive_target_prob: float = 0.0
    crop_s: float = 0.0  # 0: train on whole scenes
    dtype: str = "float32"  # float64 for deterministic checks
    dev_items: int = 0  # 0: all dev items
    seed: int = 0

    def __post_init__(self):
        self.target_count_distribution = tuple(float(p) for p in self.target_count_distribution)
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if not self.target_count_distribution or min(self.target_count_distribution) < 0 \
                or sum(self.target_count_distribution) <= 0:
            raise ConfigurationError("target_count_distribution must be non-negative with positive mass")
        if self.loss_kind not in ("snr", "log_mse") or self.pit_loss_kind not in ("snr", "log_mse"):
            raise ConfigurationError("loss kinds are 'snr' or 'log_mse'")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError("dtype is 'float32' or 'float64'")

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)

    def to_dict(self):
        d = asdict(self)
        d["target_count_distribution"] = list(self.target_count_distribution)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


def sample_target_vector(active_classes, distribution, rng, num_classes):
    """Draw how many classes to select, then which of the active ones.

    ``distribution[i]`` is the probability of selecting ``i + 1`` classes; it
    is truncated to at most ``len(active_classes)`` and renormalized.
    """
    active = sorted(int(c) for c in active_classes)
    if not active:
        raise InvalidArgumentError("no active classes to select from")
    p = np.asarray(distribution, dtype=np.float64)[: len(active)]
    if p.sum() <= 0:
        raise InvalidArgumentError("target-count distribution has no mass at feasible counts")
    count = int(rng.choice(len(p), p=p / p.sum())) + 1
    chosen = rng.choice(active, size=count, replace=False)
    return class_vector(chosen, num_classes)


@dataclass
class TrainingExample:
    id: str
    mixture: np.ndarray
    stems: np.ndarray
    active_classes: list
    o: np.ndarray
    reference: np.ndarray


def _crop(item, crop_n, rng, tries=10):
    """Random crop; the returned active classes are those at least as loud as the background in it."""
    total = item.mixture.shape[0]
    if crop_n <= 0 or crop_n >= total:
        return item.mixture, item.stems, item.background, list(item.active_classes)
    best = None
    for _ in range(tries):
        start = int(rng.integers(0, total - crop_n + 1))
        sl = slice(start, start + crop_n)
        bg_energy = float(np.sum(item.background[sl] ** 2))
        active = [c for c in item.active_classes if np.sum(item.stems[c, sl] ** 2) > max(bg_energy, 1e-12)]
        if best is None or len(active) > len(best[1]):
            best = (sl, active)
        if active:
            break
    sl, active = best
    return item.mixture[sl], item.stems[:, sl], item.background[sl], active


def make_example(item, kind, config, rng, num_classes, pit_outputs=None):
    crop_n = int(round(config.crop_s * item.sample_rate))
    mixture, stems, _, active = _crop(item, crop_n, rng)
    if kind == "pit":
        if len(item.active_classes) > pit_outputs:
            raise ConfigurationError(f"item {item.id} has {len(item.active_classes)} classes > K={pit_outputs}")
        refs = np.zeros((pit_outputs, mixture.shape[0]))
        refs[: len(item.active_classes)] = stems[sorted(item.active_classes)]
        return TrainingExample(item.id, mixture, stems, active, None, refs)
    if not active:
        active = list(item.active_classes)
    if config.inactive_target_prob > 0 and rng.random() < config.inactive_target_prob:
        inactive = [c for c in range(num_classes) if c not in active]
        pool = inactive or active
        o = class_vector([int(rng.choice(pool))], num_classes)
    else:
        o = sample_target_vector(active, config.target_count_distribution, rng, num_classes)
    if kind == "removal-direct":
        reference = removal_reference(mixture, stems, o)
    else:
        reference = mix_reference(stems, o)
    return TrainingExample(item.id, mixture, stems, active, o, reference)


def collate(examples, dtype):
    lengths = {ex.mixture.shape[0] for ex in examples}
    if len(lengths) != 1:
        raise ConfigurationError(f"batch mixes signal lengths {sorted(lengths)}; set crop_s")
    batch = {
        "ids": [ex.id for ex in examples],
        "mixture": torch.as_tensor(np.stack([ex.mixture for ex in examples]), dtype=dtype),
        "reference": torch.as_tensor(np.stack([ex.reference for ex in examples]), dtype=dtype),
    }
    if examples[0].o is not None:
        batch["o"] = torch.as_tensor(np.stack([ex.o for ex in examples]), dtype=dtype)
    return batch


def example_losses(model, batch, kind, config):
    """Per-example objective to minimize, in dB."""
    if kind == "pit":
        est = model(batch["mixture"])
        ref = batch["reference"]
        if config.pit_loss_kind == "log_mse":
            return pit_loss_torch(ref, est)[0]
        # experimental: negative SNR per pair; zero references make this ill-posed
        pair = -10.0 * torch.log10(((ref.unsqueeze(2) ** 2).sum(-1) + EPS)
                                   / (((ref.unsqueeze(2) - est.unsqueeze(1)) ** 2).sum(-1) + EPS))
        perms = torch.tensor(list(permutations(range(ref.shape[1]))))
        return pair[:, torch.arange(ref.shape[1]), perms].mean(-1).min(dim=1)[0]
    est = model(batch["mixture"], batch["o"])
    ref = batch["reference"]
    if config.loss_kind == "log_mse":
        return log_mse_torch(ref, est)
    nonzero = (ref * ref).sum(-1) > 0
    safe_ref = torch.where(nonzero.unsqueeze(-1), ref, torch.ones_like(ref))
    return torch.where(nonzero, -snr_loss_torch(safe_ref, est), log_mse_torch(ref, est))


def clip_gradients(parameters, max_norm):
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    grads = [p.grad for p in parameters if p.grad is not None]
    if not grads:
        return 0.0
    total = torch.sqrt(sum((g.double() ** 2).sum() for g in grads)).item()
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads:
            g.mul_(scale)
    return total


def train_step(model, optimizer, batch, kind, config):
    """One clipped Adam update on the batch-mean loss; returns the loss before the update."""
    optimizer.zero_grad(set_to_none=True)
    losses = example_losses(model, batch, kind, config)
    bad = ~torch.isfinite(losses)
    if bad.any():
        ids = [i for i, b in zip(batch["ids"], bad.tolist()) if b]
        raise NonFiniteLossError(f"non-finite loss for examples {ids}", ids)
    loss = losses.mean()
    loss.backward()
    clip_gradients(list(model.parameters()), config.grad_clip_norm)
    optimizer.step()
    return float(loss.item())


def make_optimizer(model, config):
    return torch.optim.Adam(model.parameters(), lr=config.learning_rate)


@dataclass
class FitResult:
    model: torch.nn.Module
    checkpoint: Path
    best_checkpoint: Path | None
    log_path: Path
    losses: list = field(default_factory=list)


def _read_log(path, upto_step):
    if not path.exists():
        return []
    with open(path) as f:
        return [row for row in csv.DictReader(f) if int(row["step"]) <= upto_step]


def fit(train_manifest, kind, train_config, model_config, out_dir, dev_manifest=None, resume=False):
    """Train a model and write checkpoints plus a CSV log to ``out_dir``.

    Writes ``epochNNN.npz`` per epoch, ``last.npz``, ``best.npz`` (best dev
    SDRi when ``dev_manifest`` is given) and ``log.csv``. With ``resume`` the
    run continues from ``last.npz``.
    """
    from .evaluate import dev_sdri

    cfg = train_config
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    items = load_dataset(train_manifest)
    if not items:
        raise ConfigurationError(f"no items in {train_manifest}")
    dev = load_dataset(dev_manifest) if dev_manifest else []
    if cfg.dev_items:
        dev = dev[: cfg.dev_items]
    num_classes = items[0].stems.shape[0]
    sample_rate = items[0].sample_rate
    if isinstance(model_config, dict):
        model_config = (PitConfig if kind == "pit" else SelectorConfig)(**model_config)
    if kind != "pit" and model_config.num_classes != num_classes:
        raise ConfigurationError(f"model has {model_config.num_classes} classes, data has {num_classes}")
    pit_outputs = model_config.output_channels if kind == "pit" else None

    last_path = out_dir / "last.npz"
    start_epoch, global_step, best_dev = 0, 0, -np.inf
    if resume and last_path.exists():
        ckpt = load_checkpoint(last_path, expected_kind=kind, expected_config=model_config)
        model = ckpt.model
        optimizer = make_optimizer(model, cfg)
        optimizer.load_state_dict(ckpt.optimizer_state)
        start_epoch, global_step = ckpt.extra["epoch"] + 1, ckpt.extra["global_step"]
        best_dev = ckpt.extra.get("best_dev_sdri_db", -np.inf)
        if best_dev is None:
            best_dev = -np.inf
    else:
        torch.manual_seed(cfg.seed)
        model = build_model(kind, model_config, cfg.torch_dtype)
        optimizer = make_optimizer(model, cfg)
    for group in optimizer.param_groups:
        group["lr"] = cfg.learning_rate

    log_path = out_dir / "log.csv"
    rows = _read_log(log_path, global_step) if resume else []
    with open(log_path, "w", newline="") as f:
        writer = csv.DictWriter(f, LOG_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)

    steps_per_epoch = cfg.steps_per_epoch or max(1, len(items) // cfg.batch_size)
    (out_dir / "train_config.json").write_text(json.dumps(
        {"kind": kind, "train": cfg.to_dict(), "model": model_config.to_dict(),
         "train_manifest": str(train_manifest), "dev_manifest": str(dev_manifest) if dev_manifest else None},
        indent=1))
    losses = []
    t0 = time.time()
    best_path = out_dir / "best.npz" if (out_dir / "best.npz").exists() else None
    for epoch in range(start_epoch, cfg.max_epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(items))
        model.train()
        for s in range(steps_per_epoch):
            idx = [order[(s * cfg.batch_size + b) % len(items)] for b in range(cfg.batch_size)]
            examples = [make_example(items[i], kind, cfg, np.random.default_rng([cfg.seed, global_step, b]),
                                     num_classes, pit_outputs) for b, i in enumerate(idx)]
            try:
                loss = train_step(model, optimizer, collate(examples, cfg.torch_dtype), kind, cfg)
            except NonFiniteLossError as exc:
                raise NonFiniteLossError(f"epoch {epoch} step {global_step}: {exc}", exc.example_ids) from exc
            global_step += 1
            losses.append(loss)
            row = {"step": global_step, "epoch": epoch, "loss_db": f"{loss:.6f}", "dev_sdri_db": "",
                   "wall_time_s": f"{time.time() - t0:.3f}"}
            if s == steps_per_epoch - 1 and dev:
                model.eval()
                score = dev_sdri(model, kind, dev)
                row["dev_sdri_db"] = f"{score:.4f}"
                if score > best_dev:
                    best_dev = score
                    best_path = out_dir / "best.npz"
                    save_checkpoint(model, best_path, kind, extra={"epoch": epoch, "dev_sdri_db": score,
                                                                   "sample_rate": sample_rate})
            with open(log_path, "a", newline="") as f:
                csv.DictWriter(f, LOG_COLUMNS).writerow(row)
        extra = {"epoch": epoch, "global_step": global_step,
                 "best_dev_sdri_db": None if best_dev == -np.inf else best_dev, "train_config": cfg.to_dict(),
                 "sample_rate": sample_rate}
        epoch_path = out_dir / f"epoch{epoch:03d}.npz"
        save_checkpoint(model, epoch_path, kind, optimizer, extra)
        shutil.copyfile(epoch_path, last_path)
        log.info("epoch %d done, step %d, last loss %.3f dB", epoch, global_step, losses[-1] if losses else np.nan)
    model.eval()
    return FitResult(model, last_path, best_path, log_path, losses)


def manifest_num_classes(manifest):
    rec = read_manifest(manifest)[0]
    return len(rec["stem_paths"])
