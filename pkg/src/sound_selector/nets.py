"""Conv-TasNet style networks: the class-conditioned Sound Selector and a PIT baseline.

Both share one trunk: a ReLU conv encoder (frame length ``L``, hop ``L/2``),
a separator made of ``R`` repeats of ``X`` dilated depthwise-separable
blocks on a ``B``-channel bottleneck, a sigmoid mask head and a transposed
conv decoder. The selector multiplies the bottleneck stream by a learned
class embedding after the first ``integration_repeat`` repeats.
"""

from __future__ import annotations

import json
import os
import tempfile
import zipfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError, InvalidArgumentError
from .signal import check_class_vector

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class SelectorConfig:
    """Architecture hyperparameters (Conv-TasNet naming in comments)."""

    num_classes: int
    encoder_filters: int = 256  # N
    frame_length: int = 20  # L
    bottleneck_channels: int = 256  # B
    conv_channels: int = 512  # H
    kernel_size: int = 3  # P
    blocks_per_repeat: int = 8  # X
    repeats: int = 4  # R
    embedding_dim: int = 256  # D
    integration_repeat: int = 1

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise InvalidArgumentError(f"{f.name} must be positive")
        if self.frame_length % 2:
            raise InvalidArgumentError("frame_length must be even")
        if self.integration_repeat >= self.repeats:
            raise InvalidArgumentError("integration_repeat must leave at least one repeat above it")

    @property
    def stride(self):
        return self.frame_length // 2

    @classmethod
    def miniature(cls, num_classes, **kw):
        """Tiny network for gradient checks."""
        base = dict(encoder_filters=8, bottleneck_channels=8, conv_channels=16, blocks_per_repeat=2,
                    repeats=2, embedding_dim=8)
        return cls(num_classes, **{**base, **kw})

    @classmethod
    def toy(cls, num_classes, **kw):
        """Small network that trains on one CPU core in minutes."""
        base = dict(encoder_filters=64, bottleneck_channels=64, conv_channels=128, blocks_per_repeat=4,
                    repeats=2, embedding_dim=64)
        return cls(num_classes, **{**base, **kw})

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class PitConfig:
    """Trunk hyperparameters plus the number of output channels ``K``."""

    output_channels: int = 3
    encoder_filters: int = 256
    frame_length: int = 20
    bottleneck_channels: int = 256
    conv_channels: int = 512
    kernel_size: int = 3
    blocks_per_repeat: int = 8
    repeats: int = 4

    def __post_init__(self):
        if self.output_channels < 2:
            raise InvalidArgumentError("PIT needs at least 2 output channels")
        if self.frame_length % 2:
            raise InvalidArgumentError("frame_length must be even")

    @property
    def stride(self):
        return self.frame_length // 2

    @classmethod
    def miniature(cls, output_channels, **kw):
        base = dict(encoder_filters=8, bottleneck_channels=8, conv_channels=16, blocks_per_repeat=2, repeats=2)
        return cls(output_channels, **{**base, **kw})

    @classmethod
    def toy(cls, output_channels, **kw):
        base = dict(encoder_filters=64, bottleneck_channels=64, conv_channels=128, blocks_per_repeat=4, repeats=2)
        return cls(output_channels, **{**base, **kw})

    def to_dict(self):
        return asdict(self)


def frame_count(num_samples, frame_length):
    """Encoder frames for a signal of ``num_samples`` (hop = half a frame)."""
    if num_samples < frame_length:
        raise InvalidArgumentError(f"input of {num_samples} samples is shorter than one frame ({frame_length})")
    return (num_samples - frame_length) // (frame_length // 2) + 1


class GlobalLayerNorm(nn.Module):
    """Normalize over channels and time jointly, per example."""

    def __init__(self, channels, eps=1e-8):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(1, channels, 1))
        self.bias = nn.Parameter(torch.zeros(1, channels, 1))
        self.eps = eps

    def forward(self, x):
        mean = x.mean(dim=(1, 2), keepdim=True)
        var = ((x - mean) ** 2).mean(dim=(1, 2), keepdim=True)
        return self.gain * (x - mean) / torch.sqrt(var + self.eps) + self.bias


class DilatedBlock(nn.Module):
    def __init__(self, bottleneck, hidden, kernel_size, dilation):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv1d(bottleneck, hidden, 1),
            nn.PReLU(),
            GlobalLayerNorm(hidden),
            nn.Conv1d(hidden, hidden, kernel_size, padding=dilation * (kernel_size - 1) // 2,
                      dilation=dilation, groups=hidden),
            nn.PReLU(),
            GlobalLayerNorm(hidden),
            nn.Conv1d(hidden, bottleneck, 1),
        )

    def forward(self, x):
        return x + self.net(x)


class _TasNetTrunk(nn.Module):
    def __init__(self, cfg, num_masks):
        super().__init__()
        self.num_masks = num_masks
        self.frame_length = cfg.frame_length
        nf, b = cfg.encoder_filters, cfg.bottleneck_channels
        self.encoder = nn.Conv1d(1, nf, cfg.frame_length, stride=cfg.stride, bias=False)
        self.input_norm = GlobalLayerNorm(nf)
        self.bottleneck = nn.Conv1d(nf, b, 1)
        self.repeats = nn.ModuleList(
            nn.Sequential(*[DilatedBlock(b, cfg.conv_channels, cfg.kernel_size, 2**x)
                            for x in range(cfg.blocks_per_repeat)])
            for _ in range(cfg.repeats)
        )
        self.mask_head = nn.Sequential(nn.PReLU(), nn.Conv1d(b, nf * num_masks, 1))
        self.decoder = nn.ConvTranspose1d(nf, 1, cfg.frame_length, stride=cfg.stride, bias=False)

    def encode(self, y):
        if y.dim() != 2:
            raise InvalidArgumentError(f"expected (batch, samples) input, got shape {tuple(y.shape)}")
        frame_count(y.shape[-1], self.frame_length)
        return torch.relu(self.encoder(y.unsqueeze(1)))

    def decode(self, w, masks, num_samples):
        batch, nf, frames = w.shape
        masks = torch.sigmoid(masks).view(batch, self.num_masks, nf, frames)
        masked = (masks * w.unsqueeze(1)).view(batch * self.num_masks, nf, frames)
        out = self.decoder(masked).view(batch, self.num_masks, -1)
        return nn.functional.pad(out, (0, num_samples - out.shape[-1]))


def embed_classes(o, table):
    """Class embedding ``W o``: sum of the embedding columns selected by ``o``.

    ``table`` is ``(D, N)``; ``o`` is ``(N,)`` or ``(batch, N)``.
    """
    o = torch.as_tensor(o, dtype=table.dtype, device=table.device)
    if o.shape[-1] != table.shape[1]:
        raise InvalidArgumentError(f"class vector length {o.shape[-1]} != number of classes {table.shape[1]}")
    if torch.any(o.reshape(-1, o.shape[-1]).sum(-1) == 0):
        raise InvalidArgumentError("class vector selects no class")
    return o @ table.T


def integrate(h, c):
    """Elementwise product of every frame of ``h`` (batch, D, F) with ``c`` (batch, D)."""
    if h.shape[-2] != c.shape[-1]:
        raise InvalidArgumentError(f"feature width {h.shape[-2]} != embedding width {c.shape[-1]}")
    return h * c.unsqueeze(-1)


class SoundSelector(_TasNetTrunk):
    """Extract the sum of all sounds of the classes flagged in an n-hot vector."""

    def __init__(self, cfg):
        super().__init__(cfg, num_masks=1)
        self.config = cfg
        d, b = cfg.embedding_dim, cfg.bottleneck_channels
        self.embedding = nn.Parameter(torch.randn(d, cfg.num_classes) / np.sqrt(d))
        self.embedding_proj = nn.Linear(d, b, bias=False) if d != b else None

    def class_embedding(self, o):
        c = embed_classes(o, self.embedding)
        return self.embedding_proj(c) if self.embedding_proj is not None else c

    def forward(self, y, o):
        """``y`` (batch, T), ``o`` (batch, N) -> estimate (batch, T)."""
        w = self.encode(y)
        h = self.bottleneck(self.input_norm(w))
        c = self.class_embedding(o)
        for r, repeat in enumerate(self.repeats):
            if r == self.config.integration_repeat:
                h = integrate(h, c)
            h = repeat(h)
        return self.decode(w, self.mask_head(h), y.shape[-1])[:, 0]


class PitSeparator(_TasNetTrunk):
    """K-output separator trained with permutation invariant training."""

    def __init__(self, cfg):
        super().__init__(cfg, num_masks=cfg.output_channels)
        self.config = cfg

    def forward(self, y):
        """``y`` (batch, T) -> estimates (batch, K, T)."""
        w = self.encode(y)
        h = self.bottleneck(self.input_norm(w))
        for repeat in self.repeats:
            h = repeat(h)
        return self.decode(w, self.mask_head(h), y.shape[-1])


def _model_dtype(model):
    return next(model.parameters()).dtype


def forward(y, o, model):
    """Run the selector on one waveform; numpy in, float64 numpy out."""
    o = check_class_vector(o)
    if o.shape[0] != model.config.num_classes:
        raise InvalidArgumentError(
            f"class vector length {o.shape[0]} != model's number of classes {model.config.num_classes}")
    dtype = _model_dtype(model)
    with torch.no_grad():
        out = model(torch.as_tensor(np.asarray(y), dtype=dtype)[None], torch.as_tensor(o, dtype=dtype)[None])
    return out[0].double().numpy()


def pit_forward(y, model):
    """Run the PIT separator on one waveform; returns a list of K float64 arrays."""
    dtype = _model_dtype(model)
    with torch.no_grad():
        out = model(torch.as_tensor(np.asarray(y), dtype=dtype)[None])
    return list(out[0].double().numpy())


# -- checkpoint container --------------------------------------------------------
#
# A checkpoint is an uncompressed .npz archive:
#   __meta__            uint8 bytes of a JSON object: format_version, kind,
#                       config, dtype, extra, and optimizer param_groups
#   param/<name>        one array per entry of the model state_dict
#   optim/<i>/<key>     Adam state tensors (optional)

MODEL_KINDS = {"selector": (SoundSelector, SelectorConfig), "removal-direct": (SoundSelector, SelectorConfig),
               "pit": (PitSeparator, PitConfig)}


def build_model(kind, config, dtype=torch.float32):
    try:
        cls, cfg_cls = MODEL_KINDS[kind]
    except KeyError:
        raise InvalidArgumentError(f"unknown model kind {kind!r}; expected one of {sorted(MODEL_KINDS)}") from None
    if isinstance(config, dict):
        config = cfg_cls(**config)
    return cls(config).to(dtype)


def save_checkpoint(model, path, kind="selector", optimizer=None, extra=None):
    """Write model weights (and optionally Adam state) atomically to ``path``."""
    path = Path(path)
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {"format_version": CHECKPOINT_VERSION, "kind": kind, "config": model.config.to_dict(),
            "dtype": str(_model_dtype(model)).replace("torch.", ""), "extra": extra or {}}
    if optimizer is not None:
        state = optimizer.state_dict()
        meta["optimizer_groups"] = state["param_groups"]
        for idx, entry in state["state"].items():
            for key, value in entry.items():
                arrays[f"optim/{idx}/{key}"] = torch.as_tensor(value).cpu().numpy()
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            np.savez(f, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class Checkpoint:
    model: nn.Module
    kind: str
    extra: dict
    optimizer_state: dict | None


def load_checkpoint(path, expected_kind=None, expected_config=None):
    """Load a checkpoint written by :func:`save_checkpoint`.

    Raises :class:`CheckpointError` for truncated/corrupt files, version
    mismatches, or a config differing from ``expected_config``.
    """
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {k: archive[k] for k in archive.files}
        meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, ValueError, OSError, EOFError, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {meta.get('format_version')!r} != {CHECKPOINT_VERSION}")
    kind = meta["kind"]
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointError(f"checkpoint holds a {kind!r} model, expected {expected_kind!r}")
    if expected_config is not None:
        expected = expected_config.to_dict() if hasattr(expected_config, "to_dict") else dict(expected_config)
        diffs = [f"{k}: checkpoint {meta['config'].get(k)!r} vs expected {v!r}"
                 for k, v in expected.items() if meta["config"].get(k) != v]
        if diffs:
            raise CheckpointError("config mismatch: " + "; ".join(diffs))
    model = build_model(kind, meta["config"], getattr(torch, meta["dtype"]))
    state = {k[len("param/"):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("param/")}
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"weights do not match the stored config: {exc}") from exc
    optimizer_state = None
    if "optimizer_groups" in meta:
        per_param = {}
        for k, v in arrays.items():
            if k.startswith("optim/"):
                _, idx, key = k.split("/")
                per_param.setdefault(int(idx), {})[key] = torch.from_numpy(v.copy())
        optimizer_state = {"state": per_param, "param_groups": meta["optimizer_groups"]}
    return Checkpoint(model, kind, meta["extra"], optimizer_state)
