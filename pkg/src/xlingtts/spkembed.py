"""x-vector speaker embedder: TDNN frame layers, statistics pooling, segment layers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

VAR_FLOOR = 1e-6


@dataclass(frozen=True)
class XVectorConfig:
    n_mels: int = 20
    n_speakers: int = 12
    hidden: int = 64
    d_xvec: int = 32
    contexts: Tuple[int, ...] = (5, 3, 3)
    var_floor: float = VAR_FLOOR

    @property
    def min_frames(self) -> int:
        return 1 + sum(c - 1 for c in self.contexts)


XVECTOR_PRESETS = {
    "desk": XVectorConfig(),
    # same layer layout as the full-size recipe, hidden width 256
    "full": XVectorConfig(hidden=256, d_xvec=256, contexts=(5, 3, 3, 1, 1)),
}


def stats_pool(h: torch.Tensor, mask: Optional[torch.Tensor] = None,
               var_floor: float = VAR_FLOOR) -> torch.Tensor:
    """Per-channel mean and floored std over time.

    h: [B, T, C]; mask: [B, T] bool, True on valid frames. Returns [B, 2C].
    Population variance, so repeating every frame leaves the statistics unchanged.
    """
    if mask is None:
        mean = h.mean(1)
        var = ((h - mean[:, None]) ** 2).mean(1)
    else:
        w = mask.to(h.dtype)[..., None]
        n = w.sum(1).clamp_min(1.0)
        mean = (h * w).sum(1) / n
        var = (((h - mean[:, None]) ** 2) * w).sum(1) / n
    std = var.clamp_min(var_floor).sqrt()
    return torch.cat([mean, std], dim=-1)


class XVectorModel(nn.Module):
    def __init__(self, config: XVectorConfig):
        super().__init__()
        self.config = config
        layers, c_in = [], config.n_mels
        for k in config.contexts:
            layers.append(nn.Conv1d(c_in, config.hidden, kernel_size=k))
            c_in = config.hidden
        self.frame_layers = nn.ModuleList(layers)
        self.segment = nn.Linear(2 * config.hidden, config.hidden)
        self.embedding = nn.Linear(config.hidden, config.d_xvec)
        self.output = nn.Linear(config.d_xvec, config.n_speakers)

    @property
    def min_frames(self) -> int:
        return self.config.min_frames

    def embed(self, mel: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Map mel [T, M] or [B, T, M] to x-vectors [d] or [B, d]."""
        single = mel.dim() == 2
        if single:
            mel = mel[None]
        T = mel.shape[1]
        if T < self.min_frames or (lengths is not None and int(lengths.min()) < self.min_frames):
            raise ValueError(f"x-vector needs at least {self.min_frames} frames, got "
                             f"{T if lengths is None else int(lengths.min())}")
        h = mel.transpose(1, 2)
        for conv in self.frame_layers:
            h = F.relu(conv(h))
        h = h.transpose(1, 2)
        mask = None
        if lengths is not None:
            valid = lengths - (self.min_frames - 1)
            mask = torch.arange(h.shape[1], device=h.device)[None] < valid[:, None]
        pooled = stats_pool(h, mask, self.config.var_floor)
        x = self.embedding(F.relu(self.segment(pooled)))
        return x[0] if single else x

    def classify(self, xvec: torch.Tensor) -> torch.Tensor:
        return self.output(F.relu(xvec))

    def forward(self, mel, lengths=None):
        x = self.embed(mel, lengths)
        return self.classify(x), x

    def add_speaker(self) -> int:
        """Append one softmax row initialised to the mean of the existing rows."""
        old = self.output
        new = nn.Linear(old.in_features, old.out_features + 1).to(old.weight)
        with torch.no_grad():
            new.weight[:-1] = old.weight
            new.weight[-1] = old.weight.mean(0)
            new.bias[:-1] = old.bias
            new.bias[-1] = old.bias.mean()
        self.output = new
        self.config = XVectorConfig(**{**self.config.__dict__, "n_speakers": new.out_features})
        return new.out_features - 1


def _as_array(v) -> np.ndarray:
    if isinstance(v, torch.Tensor):
        v = v.detach().cpu().numpy()
    return np.asarray(v, dtype=np.float64)


def cosine_distance(a, b) -> float:
    """1 - cos(a, b), clipped to [0, 2]."""
    a, b = _as_array(a), _as_array(b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine distance undefined for a zero vector")
    return float(np.clip(1.0 - a @ b / (na * nb), 0.0, 2.0))


def l2_distance(a, b):
    """Euclidean distance. Stays a tensor (differentiable) when given tensors."""
    if isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor):
        a, b = torch.as_tensor(a), torch.as_tensor(b)
        if a.shape != b.shape:
            raise ValueError(f"length mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
        return torch.linalg.vector_norm(a - b, dim=-1)
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def pad_mels(mels: Sequence[np.ndarray]) -> Tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([m.shape[0] for m in mels])
    out = torch.zeros(len(mels), int(lengths.max()), mels[0].shape[1])
    for i, m in enumerate(mels):
        out[i, : m.shape[0]] = torch.as_tensor(m)
    return out, lengths
