"""IoT feature extractor, embedding projector and the edge specialist."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, StateError, ValidationError
from .layers import Block


@dataclass
class IoTEncoderConfig:
    in_channels: int
    window_len: int
    architecture: str = "transformer"  # transformer | cnn | resnet
    patch: int = 8
    width: int = 64
    depth: int = 2
    heads: int = 4
    feature_dim: int = 64

    def to_dict(self) -> dict:
        return asdict(self)


class PatchTransformer(nn.Module):
    """Non-overlapping temporal patches -> linear embedding -> transformer; summary token out."""

    def __init__(self, cfg: IoTEncoderConfig):
        super().__init__()
        self.patch = cfg.patch
        self.n_patches = -(-cfg.window_len // cfg.patch)
        self.embed = nn.Linear(cfg.in_channels * cfg.patch, cfg.width)
        self.cls = nn.Parameter(torch.zeros(1, 1, cfg.width))
        self.pos = nn.Parameter(0.02 * torch.randn(1, self.n_patches + 1, cfg.width))
        self.blocks = nn.ModuleList(Block(cfg.width, cfg.heads) for _ in range(cfg.depth))
        self.ln = nn.LayerNorm(cfg.width)
        self.head = nn.Linear(cfg.width, cfg.feature_dim)

    def forward(self, x):
        B, C, T = x.shape
        pad = self.n_patches * self.patch - T
        if pad:
            x = F.pad(x, (0, pad))
        x = x.view(B, C, self.n_patches, self.patch).permute(0, 2, 1, 3).reshape(B, self.n_patches, C * self.patch)
        x = torch.cat([self.cls.expand(B, -1, -1), self.embed(x)], dim=1) + self.pos
        for blk in self.blocks:
            x = blk(x)
        return self.head(self.ln(x[:, 0]))


class ConvEncoder(nn.Module):
    def __init__(self, cfg: IoTEncoderConfig):
        super().__init__()
        w = cfg.width
        layers, c = [], cfg.in_channels
        for _ in range(max(1, cfg.depth)):
            layers += [nn.Conv1d(c, w, 5, padding=2), nn.BatchNorm1d(w), nn.ReLU()]
            c = w
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(w, cfg.feature_dim)

    def forward(self, x):
        return self.head(self.body(x).mean(-1))


class _ResBlock(nn.Module):
    def __init__(self, w):
        super().__init__()
        self.c1 = nn.Conv1d(w, w, 3, padding=1)
        self.b1 = nn.BatchNorm1d(w)
        self.c2 = nn.Conv1d(w, w, 3, padding=1)
        self.b2 = nn.BatchNorm1d(w)

    def forward(self, x):
        return F.relu(x + self.b2(self.c2(F.relu(self.b1(self.c1(x))))))


class ResNetEncoder(nn.Module):
    def __init__(self, cfg: IoTEncoderConfig):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv1d(cfg.in_channels, cfg.width, 7, padding=3), nn.BatchNorm1d(cfg.width), nn.ReLU())
        self.blocks = nn.Sequential(*[_ResBlock(cfg.width) for _ in range(max(1, cfg.depth))])
        self.head = nn.Linear(cfg.width, cfg.feature_dim)

    def forward(self, x):
        return self.head(self.blocks(self.stem(x)).mean(-1))


ARCHITECTURES = {"transformer": PatchTransformer, "cnn": ConvEncoder, "resnet": ResNetEncoder}


class Projector(nn.Module):
    def __init__(self, feature_dim: int, embed_dim: int, identity_init: bool = False):
        super().__init__()
        self.linear = nn.Linear(feature_dim, embed_dim)
        if identity_init:
            if feature_dim != embed_dim:
                raise ConfigError("identity projector needs feature_dim == embed_dim")
            with torch.no_grad():
                self.linear.weight.copy_(torch.eye(embed_dim))
                self.linear.bias.zero_()

    def forward(self, h):
        return self.linear(h)


class IoTModel(nn.Module):
    """Feature extractor mu followed by projector g; embeddings are unit-norm."""

    def __init__(self, cfg: IoTEncoderConfig, embed_dim: int):
        super().__init__()
        if cfg.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown IoT architecture {cfg.architecture!r}")
        self.cfg = cfg
        self.embed_dim = embed_dim
        self.mu = ARCHITECTURES[cfg.architecture](cfg)
        self.g = Projector(cfg.feature_dim, embed_dim)

    def check_input(self, x: torch.Tensor) -> torch.Tensor:
        expected = (self.cfg.in_channels, self.cfg.window_len)
        if x.dim() == 2:
            x = x[None]
        if x.dim() != 3 or tuple(x.shape[1:]) != expected:
            raise ValidationError(f"expected window shape {expected}, got {tuple(x.shape[-2:]) if x.dim() >= 2 else tuple(x.shape)}")
        return x

    def features(self, x) -> torch.Tensor:
        return self.mu(self.check_input(x))

    def forward(self, x) -> torch.Tensor:
        return project(self.features(x), self.g)

    @torch.no_grad()
    def embed(self, x: np.ndarray | torch.Tensor, batch_size: int = 512) -> np.ndarray:
        """Inference-mode embeddings for an array of windows."""
        was = self.training
        self.eval()
        x = torch.as_tensor(np.asarray(x), dtype=torch.float32)
        out = [self(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        self.train(was)
        if not out:
            return np.zeros((0, self.embed_dim), np.float32)
        return torch.cat(out).numpy()

    @torch.no_grad()
    def embed_features(self, x, batch_size: int = 512) -> np.ndarray:
        was = self.training
        self.eval()
        x = torch.as_tensor(np.asarray(x), dtype=torch.float32)
        out = [self.features(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        self.train(was)
        return torch.cat(out).numpy() if out else np.zeros((0, self.cfg.feature_dim), np.float32)


def extract_features(x, model: IoTModel) -> torch.Tensor:
    return model.features(torch.as_tensor(x))


def project(h: torch.Tensor, g: Projector) -> torch.Tensor:
    if h.shape[-1] != g.linear.in_features:
        raise ConfigError(f"feature dim {h.shape[-1]} does not match projector input {g.linear.in_features}")
    return F.normalize(g(h), dim=-1)


class Specialist(nn.Module):
    """Linear softmax head over seen classes on top of a frozen feature extractor."""

    def __init__(self, feature_dim: int, seen_classes: list[int]):
        super().__init__()
        self.seen_classes = list(seen_classes)
        self.head = nn.Linear(feature_dim, len(seen_classes))
        self.register_buffer("trained", torch.tensor(False))

    def logits(self, h: torch.Tensor) -> torch.Tensor:
        if not bool(self.trained):
            raise StateError("specialist has not been trained")
        return self.head(h)

    def fit(self, feats: np.ndarray, labels: np.ndarray, epochs: int = 200, lr: float = 0.01,
            weight_decay: float = 1e-4, seed: int = 0) -> list[float]:
        """Full-batch cross-entropy on precomputed (detached) features."""
        torch.manual_seed(seed)
        index = {c: i for i, c in enumerate(self.seen_classes)}
        try:
            y = torch.tensor([index[int(c)] for c in labels])
        except KeyError as e:
            raise ValidationError(f"label {e.args[0]} is not a seen class") from None
        h = torch.as_tensor(np.asarray(feats), dtype=torch.float32)
        opt = torch.optim.Adam(self.head.parameters(), lr=lr, weight_decay=weight_decay)
        losses = []
        for _ in range(epochs):
            opt.zero_grad()
            loss = F.cross_entropy(self.head(h), y)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        self.trained.fill_(True)
        return losses

    @torch.no_grad()
    def predict_proba(self, feats: np.ndarray) -> np.ndarray:
        h = torch.as_tensor(np.asarray(feats), dtype=torch.float32)
        return torch.softmax(self.logits(h), dim=-1).numpy()

    @torch.no_grad()
    def predict(self, feats: np.ndarray) -> np.ndarray:
        h = torch.as_tensor(np.asarray(feats), dtype=torch.float32)
        local = specialist_predict(self.logits(h).numpy())
        return np.asarray(self.seen_classes)[local]


def specialist_predict(logits: np.ndarray) -> np.ndarray:
    """Argmax over seen-class logits; numpy's argmax keeps the lowest index on ties."""
    return np.argmax(np.asarray(logits), axis=-1)
