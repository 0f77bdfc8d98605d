"""Frozen text encoders behind a common handle.

An encoder exposes ``tokenize`` (text -> ids without start/end markers),
``token_embedding`` (ids -> [L, width]) and ``encode`` (list of [L_i, width]
sequences -> unit-norm [B, embed_dim]). The encoder wraps each sequence with
its own start/end embeddings and pads to ``context_limit``.
"""

from __future__ import annotations

import math
import re
import zlib
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..layers import Block

_WORD = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


class TextEncoder(nn.Module):
    embed_dim: int
    width: int
    context_limit: int

    def tokenize(self, text: str) -> list[int]:
        raise NotImplementedError

    def token_embedding(self, ids) -> torch.Tensor:
        raise NotImplementedError

    def encode(self, seqs: Sequence[torch.Tensor]) -> torch.Tensor:
        raise NotImplementedError

    @property
    def max_content_tokens(self) -> int:
        return self.context_limit - 2

    def freeze(self) -> "TextEncoder":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def train(self, mode: bool = True):
        # always frozen
        return super().train(False)

    def encode_text(self, texts: Sequence[str]) -> torch.Tensor:
        seqs = []
        for t in texts:
            ids = self.tokenize(t)[: self.max_content_tokens]
            seqs.append(self.token_embedding(ids))
        return self.encode(seqs)

    def describe(self) -> dict:
        raise NotImplementedError


class ToyTextEncoder(TextEncoder):
    """Seeded random frozen transformer over hashed word tokens.

    Token meanings survive the residual stream and mean pooling, so
    phrases sharing words land near each other.
    """

    SOT, EOT = 0, 1

    def __init__(self, embed_dim: int = 64, width: int = 64, vocab_size: int = 4096,
                 context_limit: int = 77, layers: int = 1, heads: int = 4, seed: int = 0):
        super().__init__()
        self.embed_dim, self.width, self.context_limit = embed_dim, width, context_limit
        self.vocab_size, self.layers, self.heads, self.seed = vocab_size, layers, heads, seed
        g = torch.Generator().manual_seed(seed)
        with torch.random.fork_rng():
            # default initialisers (biases) must not depend on the caller's RNG state
            torch.manual_seed(seed)
            self.tok = nn.Embedding(vocab_size, width)
            self.pos = nn.Parameter(torch.zeros(context_limit, width))
            self.blocks = nn.ModuleList(Block(width, heads) for _ in range(layers))
            self.ln = nn.LayerNorm(width)
            self.proj = nn.Linear(width, embed_dim, bias=False)
        with torch.no_grad():
            for p in self.parameters():
                if p.dim() > 1:
                    p.copy_(torch.randn(p.shape, generator=g) / math.sqrt(p.shape[-1]))
            self.tok.weight.copy_(torch.randn(self.tok.weight.shape, generator=g))
            self.pos.copy_(0.05 * torch.randn(self.pos.shape, generator=g))
            for blk in self.blocks:
                blk.out.weight.mul_(0.5)
                blk.mlp[2].weight.mul_(0.5)
        self.freeze()

    def tokenize(self, text: str) -> list[int]:
        return [2 + zlib.crc32(w.encode()) % (self.vocab_size - 2) for w in _WORD.findall(text.lower())]

    def token_embedding(self, ids) -> torch.Tensor:
        ids = torch.as_tensor(list(ids), dtype=torch.long)
        return self.tok(ids)

    def encode(self, seqs: Sequence[torch.Tensor]) -> torch.Tensor:
        L = self.context_limit
        dtype = self.tok.weight.dtype
        sot = self.tok.weight[self.SOT]
        eot = self.tok.weight[self.EOT]
        rows, masks, content = [], [], []
        for s in seqs:
            s = s.to(dtype)
            n = s.shape[0] + 2
            if n > L:
                raise ValueError(f"sequence of {n} tokens exceeds context limit {L}")
            if n < 3:
                raise ValueError("empty token sequence")
            pad = torch.zeros(L - n, self.width, dtype=dtype)
            rows.append(torch.cat([sot[None], s, eot[None], pad]))
            masks.append(torch.arange(L) >= n)
            content.append((torch.arange(L) >= 1) & (torch.arange(L) < n - 1))
        x = torch.stack(rows) + self.pos
        pad_mask = torch.stack(masks)
        for blk in self.blocks:
            x = blk(x, pad_mask)
        # pool over content tokens only; markers are shared by every input
        keep = torch.stack(content).to(dtype)[..., None]
        pooled = (x * keep).sum(1) / keep.sum(1)
        return F.normalize(self.proj(self.ln(pooled)), dim=-1)

    def describe(self) -> dict:
        return {"backend": "toy", "embed_dim": self.embed_dim, "width": self.width,
                "vocab_size": self.vocab_size, "context_limit": self.context_limit,
                "layers": self.layers, "heads": self.heads, "seed": self.seed}


class ClipTextEncoder(TextEncoder):
    """Pre-trained CLIP text tower (e.g. ViT-B/16 text encoder) from local weights."""

    def __init__(self, model=None, tokenizer=None, path: str | Path | None = None):
        super().__init__()
        if model is None:
            from transformers import CLIPTextModelWithProjection, CLIPTokenizer

            model = CLIPTextModelWithProjection.from_pretrained(path, local_files_only=True)
            tokenizer = CLIPTokenizer.from_pretrained(path, local_files_only=True)
        self.model = model
        self._tokenizer = tokenizer
        self.path = str(path) if path else None
        cfg = model.config
        self.embed_dim = cfg.projection_dim
        self.width = cfg.hidden_size
        self.context_limit = cfg.max_position_embeddings
        self.sot_id = cfg.bos_token_id
        self.eot_id = cfg.eos_token_id
        self.freeze()

    def tokenize(self, text: str) -> list[int]:
        tok = self._tokenizer
        if callable(getattr(tok, "encode", None)):
            return list(tok.encode(text, add_special_tokens=False))
        return list(tok(text))

    def token_embedding(self, ids) -> torch.Tensor:
        ids = torch.as_tensor(list(ids), dtype=torch.long)
        return self.model.text_model.embeddings.token_embedding(ids)

    def encode(self, seqs: Sequence[torch.Tensor]) -> torch.Tensor:
        tm = self.model.text_model
        L = self.context_limit
        emb = tm.embeddings.token_embedding.weight
        sot, eot = emb[self.sot_id], emb[self.eot_id]
        rows, ends = [], []
        for s in seqs:
            n = s.shape[0] + 2
            if n > L:
                raise ValueError(f"sequence of {n} tokens exceeds context limit {L}")
            rows.append(torch.cat([sot[None], s.to(emb.dtype), eot[None], eot.expand(L - n, -1)]))
            ends.append(n - 1)
        x = torch.stack(rows) + tm.embeddings.position_embedding.weight[:L]
        causal = torch.full((L, L), float("-inf"), dtype=x.dtype).triu(1)[None, None]
        out = tm.encoder(inputs_embeds=x, attention_mask=causal)
        hidden = out[0] if isinstance(out, tuple) else out.last_hidden_state
        hidden = tm.final_layer_norm(hidden)
        pooled = hidden[torch.arange(len(seqs)), torch.tensor(ends)]
        return F.normalize(self.model.text_projection(pooled), dim=-1)

    def describe(self) -> dict:
        return {"backend": "clip", "path": self.path, "embed_dim": self.embed_dim}


def build_text_encoder(cfg: dict) -> TextEncoder:
    cfg = dict(cfg)
    backend = cfg.pop("backend", "toy")
    if backend == "toy":
        return ToyTextEncoder(**cfg)
    if backend == "clip":
        cfg.pop("embed_dim", None)
        return ClipTextEncoder(path=cfg["path"])
    raise ValueError(f"unknown text encoder backend {backend!r}")
