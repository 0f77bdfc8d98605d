"""Soft prompt, cross-attention fusion and the class-prototype text branch."""

from __future__ import annotations

import math
import warnings
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ValidationError
from .encoder import TextEncoder
from .prompts import FIXED_TEMPLATE, HardPromptSet


class SoftPrompt(nn.Module):
    """M context vectors shared by every class; the class tokens sit in the middle."""

    def __init__(self, n_ctx: int, width: int, init_std: float = 0.02, generator=None):
        super().__init__()
        self.ctx = nn.Parameter(torch.randn(n_ctx, width, generator=generator) * init_std)

    @property
    def n_ctx(self) -> int:
        return self.ctx.shape[0]

    @property
    def class_token_position(self) -> int:
        return math.ceil(self.n_ctx / 2)


def build_soft_prompt(class_tokens: torch.Tensor, state: SoftPrompt, encoder: TextEncoder | None = None) -> torch.Tensor:
    """Concatenate l_1..l_ceil(M/2), the class token embeddings, then the remaining context."""
    if encoder is not None:
        budget = encoder.max_content_tokens - state.n_ctx
        if budget < 1:
            raise ValidationError(f"{state.n_ctx} context vectors leave no room for class tokens")
        if class_tokens.shape[0] > budget:
            warnings.warn(f"class tokens truncated from {class_tokens.shape[0]} to {budget}")
            class_tokens = class_tokens[:budget]
    if class_tokens.shape[0] < 1:
        raise ValidationError("class name produced no tokens")
    h = state.class_token_position
    ctx = state.ctx.to(class_tokens.dtype)
    return torch.cat([ctx[:h], class_tokens, ctx[h:]], dim=0)


class CrossAttentionFusion(nn.Module):
    """Queries and values from soft-prompt embeddings, keys from hard-prompt embeddings."""

    def __init__(self, dim: int, attn_init_scale: float | None = None):
        super().__init__()
        self.rho_q = nn.Linear(dim, dim)
        self.rho_k = nn.Linear(dim, dim)
        self.rho_v = nn.Linear(dim, dim)
        if attn_init_scale is not None:
            # identity maps, with Q and K scaled so initial logits are attn_init_scale * cosine
            gain = math.sqrt(attn_init_scale * math.sqrt(dim))
            with torch.no_grad():
                for m, g in ((self.rho_q, gain), (self.rho_k, gain), (self.rho_v, 1.0)):
                    m.weight.copy_(g * torch.eye(dim))
                    m.bias.zero_()

    def forward(self, t_l: torch.Tensor, t_a: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return fuse_prototypes(t_l, t_a, self)


def fuse_prototypes(t_l: torch.Tensor, t_a: torch.Tensor, params: CrossAttentionFusion) -> tuple[torch.Tensor, torch.Tensor]:
    """Return (T, A) with A = softmax(Q K^T / sqrt(d_K)) over classes and T = A V."""
    if t_l.shape != t_a.shape or t_l.dim() != 2:
        raise ValidationError(f"soft/hard embeddings must be matching [N_c, d], got {tuple(t_l.shape)} and {tuple(t_a.shape)}")
    q = params.rho_q(t_l)
    k = params.rho_k(t_a)
    v = params.rho_v(t_l)
    attn = torch.softmax(q @ k.T / math.sqrt(k.shape[-1]), dim=-1)
    return attn @ v, attn


class TextBranch(nn.Module):
    """Produces one unit-norm prototype per class in ``class_names`` order.

    ``mode="fused"`` runs soft prompt + cross-attention; ``mode="template"``
    encodes the fixed template only and has no trainable parameters.
    The frozen encoder is held by reference and is not part of the state dict.
    """

    def __init__(self, encoder: TextEncoder, class_names: Sequence[str], prompts: HardPromptSet | None = None,
                 n_ctx: int = 8, mode: str = "fused", seed: int = 0, init_std: float = 0.02,
                 attn_init_scale: float | None = 10.0):
        super().__init__()
        if mode not in ("fused", "template"):
            raise ValidationError(f"unknown text branch mode {mode!r}")
        object.__setattr__(self, "encoder", encoder)
        self.class_names = list(class_names)
        self.mode = mode
        self._class_tokens = [encoder.token_embedding(encoder.tokenize(c)).detach() for c in self.class_names]
        if mode == "fused":
            if prompts is None:
                raise ValidationError("fused mode needs hard prompts")
            prompts.check(self.class_names)
            g = torch.Generator().manual_seed(seed)
            self.soft_prompt = SoftPrompt(n_ctx, encoder.width, init_std, generator=g)
            torch.manual_seed(seed)
            self.fusion = CrossAttentionFusion(encoder.embed_dim, attn_init_scale)
            with torch.no_grad():
                t_a = encoder.encode_text([prompts[c] for c in self.class_names])
            self.register_buffer("t_a", t_a.detach().clone())
        else:
            with torch.no_grad():
                t = encoder.encode_text([FIXED_TEMPLATE.format(c=c) for c in self.class_names])
            self.register_buffer("template", t.detach().clone())

    def soft_embeddings(self) -> torch.Tensor:
        seqs = [build_soft_prompt(tok, self.soft_prompt, self.encoder) for tok in self._class_tokens]
        return self.encoder.encode(seqs)

    def forward(self) -> torch.Tensor:
        if self.mode == "template":
            return self.template
        t, _ = fuse_prototypes(self.soft_embeddings(), self.t_a, self.fusion)
        return F.normalize(t, dim=-1)

    @torch.no_grad()
    def prototypes(self) -> torch.Tensor:
        """Frozen snapshot used after training."""
        return self.forward().detach().clone()


def encode_hard_prompt(class_name: str, prompts: HardPromptSet, encoder: TextEncoder) -> torch.Tensor:
    with torch.no_grad():
        return encoder.encode_text([prompts[class_name]])[0]
