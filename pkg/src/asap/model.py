"""Small from-scratch encoders, the two biased multimodal encoders and the task heads.

Layout follows the usual dual-stream detector: a ViT-style image encoder, a
transformer text encoder, then

* a vision-biased multimodal encoder (image tokens query the text tokens),
* a text-biased multimodal encoder (text tokens query the image patches),

each block being pre-norm self-attention -> cross-attention -> MLP.  Every
cross-attention weight tensor is returned so that it can be supervised or
visualized.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data.vocab import PAD_ID

CKPT_VERSION = "asap-ckpt/1"


PIXEL_MEAN, PIXEL_STD = 0.5, 0.25  # fixed input normalization for [0, 1] images
FLATTEN_DIM = 8  # per-patch width kept by the "flatten" bbox pooling
BBOX_POOLS = ("mean", "flatten")


@dataclass
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 128
    num_heads: int = 4
    num_layers_unimodal: int = 2
    num_layers_multimodal: int = 2
    vocab_size: int = 256
    max_text_len: int = 24
    delta_init: float = 0.5
    mlp_ratio: int = 2
    bbox_pool: str = "flatten"  # one of BBOX_POOLS

    def __post_init__(self):
        counts = (
            self.image_size, self.patch_size, self.embed_dim, self.num_heads,
            self.num_layers_unimodal, self.num_layers_multimodal, self.vocab_size,
            self.max_text_len, self.mlp_ratio,
        )
        if any(int(c) < 1 for c in counts):
            raise ValueError("all ModelConfig counts must be >= 1")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.bbox_pool not in BBOX_POOLS:
            raise ValueError(f"unknown bbox_pool {self.bbox_pool!r}")

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return g, g

    @property
    def num_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


@dataclass
class EncodedFeatures:
    cls: torch.Tensor  # (B, D)
    tokens: torch.Tensor  # (B, L, D)
    pad_mask: torch.Tensor  # (B, L) bool, True = real token


@dataclass
class AttentionMap:
    weights: torch.Tensor  # (B, layers, heads, Q, K); Q includes the cls query at index 0
    query_side: str  # "text" or "vision"

    def mean(self) -> torch.Tensor:
        """Average over layers and heads -> (B, Q, K)."""
        return self.weights.mean(dim=(1, 2))


@dataclass
class MultimodalFeatures:
    vision_biased: EncodedFeatures
    text_biased: EncodedFeatures
    fused_cls: torch.Tensor
    attn_text_biased: AttentionMap
    attn_vision_biased: AttentionMap


@dataclass
class HeadOutputs:
    authenticity_prob: torch.Tensor  # (B,) probability the pair is NOT manipulated
    bin_logit: torch.Tensor  # (B,) logit that the pair IS manipulated
    multilabel_logits: torch.Tensor  # (B, 4) FS, FA, TS, TA
    bbox: torch.Tensor  # (B, 4) cx, cy, w, h in [0, 1]
    token_logits: torch.Tensor  # (B, L_text, 2)
    patch_logits: torch.Tensor  # (B, L_patch)


def scaled_dot_attention(q, k, v, key_mask=None):
    """Softmax attention over the key axis, scaled by ``1/sqrt(head_dim)``.

    ``key_mask`` (broadcastable to ``(..., K)``, True = real) gives padded keys
    exactly zero weight.  A row with no real key gets all-zero weights.
    Returns ``(output, weights)``.
    """
    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        key_mask = key_mask.unsqueeze(-2).expand_as(logits)
        logits = logits.masked_fill(~key_mask, float("-inf"))
        has_key = key_mask.any(dim=-1, keepdim=True)
        logits = torch.where(has_key, logits, torch.zeros_like(logits))
        weights = torch.softmax(logits, dim=-1) * key_mask
    else:
        weights = torch.softmax(logits, dim=-1)
    return weights @ v, weights


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def _split(self, x):
        B, L, D = x.shape
        return x.view(B, L, self.num_heads, D // self.num_heads).transpose(1, 2)

    def forward(self, x, context, key_mask=None):
        q, k, v = self._split(self.q(x)), self._split(self.k(context)), self._split(self.v(context))
        mask = None if key_mask is None else key_mask[:, None, :]
        out, weights = scaled_dot_attention(q, k, v, mask)
        B, H, Q, hd = out.shape
        return self.out(out.transpose(1, 2).reshape(B, Q, H * hd)), weights


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: int, cross: bool = False):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, num_heads)
        self.cross = cross
        if cross:
            self.norm_q = nn.LayerNorm(dim)
            self.norm_kv = nn.LayerNorm(dim)
            self.cross_attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim))

    def forward(self, x, mask=None, context=None, context_mask=None):
        h = self.norm1(x)
        x = x + self.self_attn(h, h, mask)[0]
        weights = None
        if self.cross:
            out, weights = self.cross_attn(self.norm_q(x), self.norm_kv(context), context_mask)
            x = x + out
        x = x + self.mlp(self.norm2(x))
        return x, weights


class ImageEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = nn.Linear(cfg.patch_size * cfg.patch_size * 3, d)
        self.cls = nn.Parameter(torch.zeros(1, 1, d))
        self.pos = nn.Parameter(torch.randn(1, cfg.num_patches + 1, d) * 0.02)
        self.blocks = nn.ModuleList(Block(d, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.num_layers_unimodal))
        self.norm = nn.LayerNorm(d)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        B, H, W, C = images.shape
        p = self.cfg.patch_size
        x = images.reshape(B, H // p, p, W // p, p, C).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(B, (H // p) * (W // p), p * p * C)

    def forward(self, images: torch.Tensor) -> EncodedFeatures:
        cfg = self.cfg
        if images.dim() != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, 3):
            raise ValueError(
                f"expected images of shape (B, {cfg.image_size}, {cfg.image_size}, 3), got {tuple(images.shape)}"
            )
        x = self.patch_embed(self.patchify((images - PIXEL_MEAN) / PIXEL_STD))
        x = torch.cat([self.cls.expand(x.shape[0], -1, -1), x], dim=1) + self.pos
        for blk in self.blocks:
            x, _ = blk(x)
        x = self.norm(x)
        mask = torch.ones(x.shape[0], x.shape[1] - 1, dtype=torch.bool, device=x.device)
        return EncodedFeatures(cls=x[:, 0], tokens=x[:, 1:], pad_mask=mask)


class TextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.embed = nn.Embedding(cfg.vocab_size, d)
        # small init keeps cross-attention updates comparable to the word embedding
        nn.init.normal_(self.embed.weight, std=0.02)
        self.cls = nn.Parameter(torch.zeros(1, 1, d))
        self.pos = nn.Parameter(torch.randn(1, cfg.max_text_len + 1, d) * 0.02)
        self.blocks = nn.ModuleList(Block(d, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.num_layers_unimodal))
        self.norm = nn.LayerNorm(d)

    def forward(self, ids: torch.Tensor, pad_mask: torch.Tensor) -> EncodedFeatures:
        cfg = self.cfg
        if ids.dim() != 2 or ids.shape[1] != cfg.max_text_len:
            raise ValueError(f"expected ids of shape (B, {cfg.max_text_len}), got {tuple(ids.shape)}")
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= cfg.vocab_size):
            raise ValueError("token id outside vocabulary")
        x = self.embed(ids)
        x = torch.cat([self.cls.expand(x.shape[0], -1, -1), x], dim=1) + self.pos
        full_mask = torch.cat([torch.ones_like(pad_mask[:, :1]), pad_mask], dim=1)
        for blk in self.blocks:
            x, _ = blk(x, full_mask)
        x = self.norm(x)
        return EncodedFeatures(cls=x[:, 0], tokens=x[:, 1:], pad_mask=pad_mask)


class MultimodalEncoder(nn.Module):
    """Query stream attends to itself, then cross-attends to the other modality's tokens."""

    def __init__(self, cfg: ModelConfig, query_side: str):
        super().__init__()
        d = cfg.embed_dim
        self.query_side = query_side
        self.blocks = nn.ModuleList(
            Block(d, cfg.num_heads, cfg.mlp_ratio, cross=True) for _ in range(cfg.num_layers_multimodal)
        )
        self.norm = nn.LayerNorm(d)

    def forward(self, query: EncodedFeatures, key: EncodedFeatures) -> tuple[EncodedFeatures, AttentionMap]:
        x = torch.cat([query.cls[:, None], query.tokens], dim=1)
        mask = torch.cat([torch.ones_like(query.pad_mask[:, :1]), query.pad_mask], dim=1)
        maps = []
        for blk in self.blocks:
            x, w = blk(x, mask, key.tokens, key.pad_mask)
            maps.append(w)
        x = self.norm(x)
        feats = EncodedFeatures(cls=x[:, 0], tokens=x[:, 1:], pad_mask=query.pad_mask)
        return feats, AttentionMap(weights=torch.stack(maps, dim=1), query_side=self.query_side)


def _mlp3(d_in: int, d_hidden: int, d_out: int) -> nn.Sequential:
    mlp = nn.Sequential(
        nn.Linear(d_in, d_hidden), nn.GELU(), nn.Linear(d_hidden, d_hidden), nn.GELU(), nn.Linear(d_hidden, d_out)
    )
    nn.init.zeros_(mlp[-1].bias)
    return mlp


class ASAPModel(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        d = cfg.embed_dim
        self.image_encoder = ImageEncoder(cfg)
        self.text_encoder = TextEncoder(cfg)
        self.vision_mm = MultimodalEncoder(cfg, "vision")
        self.text_mm = MultimodalEncoder(cfg, "text")
        self.delta = nn.Parameter(torch.tensor(float(cfg.delta_init)))
        # contrastive projections and temperature
        self.vision_proj = nn.Linear(d, d)
        self.text_proj = nn.Linear(d, d)
        self.tau = nn.Parameter(torch.tensor(0.07))
        # heads
        self.ied_head = _mlp3(d, d, 1)
        self.bin_head = nn.Linear(d, 1)
        self.mul_head = nn.Linear(d, 4)
        bbox_in = d
        if cfg.bbox_pool == "flatten":
            # per-patch projection, concatenated in raster order so position survives pooling
            self.bbox_proj = nn.Linear(d, FLATTEN_DIM)
            bbox_in = FLATTEN_DIM * cfg.num_patches
        self.bbox_head = _mlp3(bbox_in, d, 4)
        self.token_head = nn.Linear(d, 2)
        self.patch_head = nn.Linear(d, 1)

    # -- encoders ---------------------------------------------------------
    def encode_image(self, images: torch.Tensor) -> EncodedFeatures:
        if images.dim() == 3:
            images = images.unsqueeze(0)
        return self.image_encoder(images)

    def encode_text(self, ids, pad_mask=None) -> EncodedFeatures:
        """Accepts either a padded ``(B, L)`` id tensor plus mask or a list of
        id sequences, which are padded/truncated to ``max_text_len``."""
        if pad_mask is None:
            ids, pad_mask = pad_ids(ids, self.cfg.max_text_len, self.cfg.vocab_size)
            ids, pad_mask = ids.to(self.delta.device), pad_mask.to(self.delta.device)
        return self.text_encoder(ids, pad_mask)

    def multimodal(self, img: EncodedFeatures, txt: EncodedFeatures, delta=None) -> MultimodalFeatures:
        vis, attn_v = self.vision_mm(img, txt)
        tex, attn_t = self.text_mm(txt, img)
        delta = self.delta if delta is None else delta
        return MultimodalFeatures(
            vision_biased=vis,
            text_biased=tex,
            fused_cls=delta * vis.cls + tex.cls,
            attn_text_biased=attn_t,
            attn_vision_biased=attn_v,
        )

    def authenticity(self, mm: MultimodalFeatures) -> torch.Tensor:
        return torch.sigmoid(self.ied_head(mm.fused_cls).squeeze(-1))

    def run_heads(self, mm: MultimodalFeatures) -> HeadOutputs:
        fused = mm.fused_cls
        patches = mm.vision_biased.tokens
        patch_logits = self.patch_head(patches).squeeze(-1)
        if self.cfg.bbox_pool == "flatten":
            pooled = self.bbox_proj(patches).flatten(1)
        else:
            pooled = patches.mean(dim=1)
        return HeadOutputs(
            authenticity_prob=self.authenticity(mm),
            bin_logit=self.bin_head(fused).squeeze(-1),
            multilabel_logits=self.mul_head(fused),
            bbox=torch.sigmoid(self.bbox_head(pooled)),
            token_logits=self.token_head(mm.text_biased.tokens),
            patch_logits=patch_logits,
        )

    def forward(self, images, ids, pad_mask):
        img = self.encode_image(images)
        txt = self.encode_text(ids, pad_mask)
        mm = self.multimodal(img, txt)
        return mm, self.run_heads(mm)

    def contrastive_embed(self, feats: EncodedFeatures, side: str) -> torch.Tensor:
        proj = self.vision_proj if side == "vision" else self.text_proj
        return proj(feats.cls)


def pad_ids(seqs, max_len: int, vocab_size: int | None = None):
    """Pad/truncate id sequences to ``max_len``; returns ``(ids, pad_mask)``."""
    if isinstance(seqs, torch.Tensor) and seqs.dim() == 1:
        seqs = [seqs.tolist()]
    elif seqs and isinstance(seqs[0], int):
        seqs = [list(seqs)]
    elif len(seqs) == 0:
        seqs = [[]]
    ids = torch.full((len(seqs), max_len), PAD_ID, dtype=torch.long)
    mask = torch.zeros((len(seqs), max_len), dtype=torch.bool)
    for i, s in enumerate(seqs):
        s = [int(t) for t in s][:max_len]
        if vocab_size is not None and any(t < 0 or t >= vocab_size for t in s):
            raise ValueError("token id outside vocabulary")
        ids[i, : len(s)] = torch.tensor(s, dtype=torch.long)
        mask[i, : len(s)] = True
    return ids, mask


def save_checkpoint(path, model: ASAPModel, **extra) -> None:
    payload = {
        "version": CKPT_VERSION,
        "model_config": model.cfg.to_json(),
        "state_dict": model.state_dict(),
    }
    payload.update(extra)
    torch.save(payload, path)


def load_checkpoint(path, map_location="cpu") -> tuple[ASAPModel, dict]:
    payload = torch.load(path, map_location=map_location, weights_only=False)
    if payload.get("version") != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    model = ASAPModel(ModelConfig.from_json(payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
