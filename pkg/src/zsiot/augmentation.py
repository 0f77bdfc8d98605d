"""Conditional WGAN-GP over raw windows, unseen-class synthesis and fine-tuning."""

from __future__ import annotations

import copy
import logging
import warnings
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .contrastive import TrainConfig, TrainResult, fit_contrastive
from .errors import DivergenceError, ValidationError

logger = logging.getLogger(__name__)


@dataclass
class GanConfig:
    noise_dim: int = 32
    gen_hidden: Sequence[int] = (256, 256)
    critic_hidden: Sequence[int] = (256, 256)
    xi: float = 10.0
    critic_steps: int = 5
    n_aug: int | None = None  # None -> median per-seen-class train count
    gan_lr: float = 2e-3
    gan_epochs: int = 30
    batch_size: int = 64
    cls_weight: float = 1.0
    filter_synthetic: bool = True
    collapse_var: float = 1e-4
    collapse_patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.xi <= 0:
            raise ValidationError("gradient-penalty coefficient must be positive")
        if self.critic_steps < 1:
            raise ValidationError("critic_steps must be >= 1")
        self.gen_hidden = tuple(self.gen_hidden)
        self.critic_hidden = tuple(self.critic_hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gen_hidden"], d["critic_hidden"] = list(self.gen_hidden), list(self.critic_hidden)
        return d


def _mlp(sizes, final_act=None):
    layers = []
    for a, b in zip(sizes[:-2], sizes[1:-1]):
        layers += [nn.Linear(a, b), nn.LeakyReLU(0.2)]
    layers.append(nn.Linear(sizes[-2], sizes[-1]))
    if final_act is not None:
        layers.append(final_act)
    return nn.Sequential(*layers)


class Generator(nn.Module):
    """Dense map from (z, t(y)) to a window of shape ``out_shape`` = (C, T)."""

    def __init__(self, noise_dim: int, cond_dim: int, out_shape: tuple[int, int], hidden=(256, 256)):
        super().__init__()
        self.noise_dim = noise_dim
        self.out_shape = tuple(out_shape)
        self.net = _mlp([noise_dim + cond_dim, *hidden, int(np.prod(out_shape))])

    def forward(self, z, t):
        return self.net(torch.cat([z, t], dim=1)).view(-1, *self.out_shape)


class Critic(nn.Module):
    def __init__(self, in_shape: tuple[int, int], cond_dim: int, hidden=(256, 256)):
        super().__init__()
        self.net = _mlp([int(np.prod(in_shape)) + cond_dim, *hidden, 1])

    def forward(self, x, t):
        return self.net(torch.cat([x.flatten(1), t], dim=1)).squeeze(1)


class LinearSoftmax(nn.Module):
    """Linear classifier over flattened windows, restricted to a fixed class set."""

    def __init__(self, in_shape: tuple[int, int], classes: Sequence[int]):
        super().__init__()
        self.classes = [int(c) for c in classes]
        self.linear = nn.Linear(int(np.prod(in_shape)), len(self.classes))

    def forward(self, x):
        return self.linear(x.flatten(1))

    def local_labels(self, y) -> torch.Tensor:
        index = {c: i for i, c in enumerate(self.classes)}
        try:
            return torch.tensor([index[int(c)] for c in torch.as_tensor(y).reshape(-1)])
        except KeyError as e:
            raise ValidationError(f"label {e.args[0]} is outside the classifier's class set") from None


def train_seen_classifier(X: np.ndarray, y: np.ndarray, classes: Sequence[int], epochs: int = 100,
                          lr: float = 1e-3, batch_size: int = 128, seed: int = 0) -> LinearSoftmax:
    """Cross-entropy on D^s, then frozen."""
    torch.manual_seed(seed)
    clf = LinearSoftmax(X.shape[1:], classes)
    Xt = torch.as_tensor(X, dtype=torch.float32)
    yt = clf.local_labels(y)
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    g = torch.Generator().manual_seed(seed)
    for _ in range(epochs):
        perm = torch.randperm(len(yt), generator=g)
        for s in range(0, len(perm), batch_size):
            idx = perm[s:s + batch_size]
            loss = F.cross_entropy(clf(Xt[idx]), yt[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    for p in clf.parameters():
        p.requires_grad_(False)
    return clf.eval()


def classification_loss(classifier: LinearSoftmax, x_tilde: torch.Tensor, y) -> torch.Tensor:
    """L_CLS = -mean log Pr(y | x~) under the frozen classifier."""
    return F.cross_entropy(classifier(x_tilde), classifier.local_labels(y))


def gradient_penalty(D, x_hat: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """mean over samples of (||grad_x_hat D(x_hat, t)||_2 - 1)^2."""
    x_hat = x_hat.detach().requires_grad_(True)
    out = D(x_hat, t)
    if out.requires_grad:
        (grad,) = torch.autograd.grad(out.sum(), x_hat, create_graph=True, allow_unused=True)
    else:
        grad = None
    if grad is None:  # critic does not depend on its input
        grad = torch.zeros_like(x_hat)
    norms = grad.flatten(1).norm(dim=1)
    return ((norms - 1) ** 2).mean()


@dataclass
class WganTerms:
    value: torch.Tensor
    real: torch.Tensor
    fake: torch.Tensor
    penalty: torch.Tensor
    x_fake: torch.Tensor


def wgan_loss(D, G, real_batch: torch.Tensor, prototypes: torch.Tensor, xi: float = 10.0,
              z: torch.Tensor | None = None, alpha: torch.Tensor | None = None,
              generator: torch.Generator | None = None) -> WganTerms:
    """L_WGAN = E[D(x,t)] - E[D(x~,t)] - xi * E[(||grad D(x^,t)|| - 1)^2].

    ``prototypes`` holds t(y) per sample, [B, d]. ``z`` and ``alpha`` may be
    supplied for reproducible checks; otherwise they are drawn here.
    """
    B = real_batch.shape[0]
    if prototypes.shape[0] != B:
        raise ValidationError("need one conditioning prototype per real sample")
    if z is None:
        z = torch.randn(B, G.noise_dim, generator=generator)
    if alpha is None:
        alpha = torch.rand(B, generator=generator)
    x_fake = G(z, prototypes)
    a = alpha.view(B, *([1] * (real_batch.dim() - 1)))
    x_hat = a * real_batch + (1 - a) * x_fake.detach()
    real = D(real_batch, prototypes).mean()
    fake = D(x_fake, prototypes).mean()
    pen = gradient_penalty(D, x_hat, prototypes)
    if not torch.isfinite(pen):
        raise DivergenceError(f"non-finite gradient penalty (critic real {float(real.detach()):.3g}, "
                              f"fake {float(fake.detach()):.3g})")
    return WganTerms(real - fake - xi * pen, real, fake, pen, x_fake)


@dataclass
class GanResult:
    generator: Generator
    critic: Critic
    wasserstein: list[float] = field(default_factory=list)
    gen_var: list[float] = field(default_factory=list)
    collapsed: bool = False


def train_gan(X: np.ndarray, y: np.ndarray, prototypes: torch.Tensor, seen_classes: Sequence[int],
              cfg: GanConfig, classifier: LinearSoftmax | None = None) -> GanResult:
    """Alternate ``critic_steps`` critic updates with one generator update.

    ``prototypes`` is the frozen [N_classes, d] prototype matrix indexed by
    class id; only seen rows are used. The generator minimises
    -E[D(x~)] + cls_weight * L_CLS; the critic maximises L_WGAN.
    """
    X = np.asarray(X, dtype=np.float32)
    y = np.asarray(y)
    if not set(np.unique(y)) <= set(int(c) for c in seen_classes):
        raise ValidationError("GAN training data must come from seen classes only")
    torch.manual_seed(cfg.seed)
    g = torch.Generator().manual_seed(cfg.seed)
    P = prototypes.detach()
    shape = X.shape[1:]
    G = Generator(cfg.noise_dim, P.shape[1], shape, cfg.gen_hidden)
    D = Critic(shape, P.shape[1], cfg.critic_hidden)
    if classifier is None and cfg.cls_weight > 0:
        classifier = train_seen_classifier(X, y, seen_classes, seed=cfg.seed)
    opt_g = torch.optim.Adam(G.parameters(), lr=cfg.gan_lr, betas=(0.5, 0.9))
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.gan_lr, betas=(0.5, 0.9))
    Xt, yt = torch.from_numpy(X), torch.as_tensor(y)
    n = len(yt)
    bs = min(cfg.batch_size, n)
    steps = max(1, -(-n // bs))
    res = GanResult(G, D)
    best_w, best_state, low = float("inf"), None, 0

    def draw():
        idx = torch.randint(n, (bs,), generator=g)
        return Xt[idx], yt[idx]

    for epoch in range(cfg.gan_epochs):
        w_sum, w_cnt, var_sum = 0.0, 0, 0.0
        for _ in range(steps):
            for _ in range(cfg.critic_steps):
                xb, yb = draw()
                terms = wgan_loss(D, G, xb, P[yb], cfg.xi, generator=g)
                opt_d.zero_grad()
                (-terms.value).backward()
                opt_d.step()
                w_sum += float((terms.real - terms.fake).detach())
                w_cnt += 1
            xb, yb = draw()
            z = torch.randn(bs, cfg.noise_dim, generator=g)
            x_fake = G(z, P[yb])
            loss_g = -D(x_fake, P[yb]).mean()
            if classifier is not None and cfg.cls_weight > 0:
                loss_g = loss_g + cfg.cls_weight * classification_loss(classifier, x_fake, yb)
            opt_g.zero_grad()
            loss_g.backward()
            opt_g.step()
            var_sum += float(x_fake.detach().var(dim=0).mean())
        w = w_sum / w_cnt
        res.wasserstein.append(w)
        res.gen_var.append(var_sum / steps)
        if abs(w) < best_w:
            best_w, best_state = abs(w), copy.deepcopy(G.state_dict())
        low = low + 1 if res.gen_var[-1] < cfg.collapse_var else 0
        if low >= cfg.collapse_patience and not res.collapsed:
            warnings.warn(f"generator output variance below {cfg.collapse_var} for {low} epochs; "
                          "keeping the checkpoint with the smallest Wasserstein estimate")
            res.collapsed = True
            break
        logger.debug("gan epoch %d W %.4f var %.4f", epoch, w, res.gen_var[-1])
    if res.collapsed and best_state is not None:
        G.load_state_dict(best_state)
    G.eval()
    return res


@torch.no_grad()
def synthesize_unseen(G: Generator, prototypes: torch.Tensor, unseen_classes: Sequence[int], n_aug: int,
                      seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """N_aug generated windows per unseen class, conditioned on its prototype."""
    unseen = [int(c) for c in unseen_classes]
    if n_aug <= 0 or not unseen:
        return np.zeros((0, *G.out_shape), np.float32), np.zeros(0, np.int64)
    g = torch.Generator().manual_seed(seed)
    xs, ys = [], []
    for c in unseen:
        z = torch.randn(n_aug, G.noise_dim, generator=g)
        t = prototypes[c].detach().expand(n_aug, -1)
        xs.append(G(z, t).numpy().astype(np.float32))
        ys.append(np.full(n_aug, c, np.int64))
    return np.concatenate(xs), np.concatenate(ys)


def filter_synthetic(model: nn.Module, X_aug: np.ndarray, y_aug: np.ndarray,
                     prototypes: torch.Tensor) -> np.ndarray:
    """Mask of synthetic windows whose embedding is closest to their own class prototype.

    The argmax runs over every class, so a kept sample also sits away from
    the seen prototypes.
    """
    if len(y_aug) == 0:
        return np.zeros(0, bool)
    E = model.embed(X_aug)
    sims = E @ prototypes.detach().numpy().T
    return np.argmax(sims, axis=1) == np.asarray(y_aug)


def default_n_aug(y_train: np.ndarray) -> int:
    _, counts = np.unique(y_train, return_counts=True)
    return int(np.median(counts)) if len(counts) else 0


def finetune(model: nn.Module, prototypes: torch.Tensor, X_seen: np.ndarray, y_seen: np.ndarray,
             X_aug: np.ndarray, y_aug: np.ndarray, cfg: TrainConfig, log_path=None) -> TrainResult:
    """Eq.-1 fine-tuning of mu and g on D^s + D^aug with prototypes frozen."""
    if len(y_aug) == 0:
        return TrainResult()
    P = prototypes.detach().clone()
    X = np.concatenate([np.asarray(X_seen, np.float32), np.asarray(X_aug, np.float32)])
    y = np.concatenate([np.asarray(y_seen), np.asarray(y_aug)])
    labels = list(range(P.shape[0]))
    return fit_contrastive(model, X, y, lambda: P, labels, list(model.parameters()), cfg, log_path=log_path)
