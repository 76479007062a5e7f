"""Text-to-patch attention heatmaps.

For one sample the text-biased cross-attention (averaged over layers and
heads) is read off for each word and for the whole sentence, min-max
normalized per map, upsampled to image size and written as grayscale PNGs
with the ground-truth box drawn in red.  Raw weights go to a JSON file next
to the images.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .data import vocab
from .data.synthetic import MediaSample
from .masks import patch_flags_from_bbox
from .model import ASAPModel, pad_ids


@torch.no_grad()
def text_patch_attention(model: ASAPModel, sample: MediaSample) -> tuple[np.ndarray, list[str]]:
    """Return ``(weights, words)``: weights is ``(n_words, num_patches)``,
    one row per real word, averaged over layers and heads."""
    model.eval()
    cfg = model.cfg
    ids, mask = pad_ids([sample.text_ids], cfg.max_text_len, cfg.vocab_size)
    img = model.encode_image(torch.from_numpy(np.ascontiguousarray(sample.image, dtype=np.float32))[None])
    txt = model.encode_text(ids, mask)
    mm = model.multimodal(img, txt)
    n = int(mask.sum())
    weights = mm.attn_text_biased.mean()[0, 1 : n + 1].double().numpy()
    return weights, vocab.words(sample.text)[:n]


def box_patch_mask(sample: MediaSample, grid: tuple[int, int]) -> np.ndarray:
    return patch_flags_from_bbox(sample.labels.y_box, grid)


def attention_mass_in_box(weights: np.ndarray, inside: np.ndarray) -> float:
    """Share of a row's attention that lands on patches overlapping the box."""
    return float(np.asarray(weights)[..., inside].sum(-1).mean())


def manipulated_word_mass(model: ASAPModel, sample: MediaSample) -> float | None:
    """Mean in-box attention mass over the sample's manipulated words, or None
    when the sample lacks either a manipulated word or an image box."""
    inside = box_patch_mask(sample, model.cfg.grid)
    weights, words = text_patch_attention(model, sample)
    rows = [p for p in sample.fake_text_pos if p < len(words)]
    if not rows or not inside.any():
        return None
    return attention_mass_in_box(weights[rows], inside)


def normalize(m: np.ndarray) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    if hi - lo <= 0:
        return np.zeros_like(m, dtype=np.float64)
    return (m - lo) / (hi - lo)


def heatmap_image(row: np.ndarray, grid: tuple[int, int], size: int, box_xyxy=None) -> Image.Image:
    """Grayscale heatmap (nearest-neighbour upsampled) with an optional red box."""
    g = normalize(row.reshape(grid))
    pixels = np.round(g * 255).astype(np.uint8)
    im = Image.fromarray(pixels, mode="L").resize((size, size), Image.NEAREST).convert("RGB")
    if box_xyxy is not None and box_xyxy[2] > box_xyxy[0]:
        x1, y1, x2, y2 = box_xyxy
        ImageDraw.Draw(im).rectangle([x1, y1, x2 - 1, y2 - 1], outline=(255, 0, 0))
    return im


def _slug(word: str) -> str:
    return re.sub(r"[^a-z0-9]+", "", word.lower()) or "tok"


def render_attention(model: ASAPModel, sample: MediaSample, out_dir, words: list[int] | None = None) -> dict:
    """Write per-word and sentence heatmaps for ``sample`` under ``out_dir``.

    ``words`` selects word positions; by default the manipulated ones, or
    every word for an untouched sentence.  Returns the JSON summary.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid, size = model.cfg.grid, model.cfg.image_size
    weights, tokens = text_patch_attention(model, sample)
    if words is None:
        words = [p for p in sample.fake_text_pos if p < len(tokens)] or list(range(len(tokens)))
    box = sample.box_xyxy if any(sample.box_xyxy) else None
    inside = box_patch_mask(sample, grid)

    files = {}
    for p in words:
        name = f"{sample.id}_word{p:02d}_{_slug(tokens[p])}.png"
        heatmap_image(weights[p], grid, size, box).save(out / name)
        files[name] = p
    sentence = weights.mean(0)
    heatmap_image(sentence, grid, size, box).save(out / f"{sample.id}_sentence.png")
    Image.fromarray(np.round(sample.image * 255).astype(np.uint8), mode="RGB").save(out / f"{sample.id}_image.png")

    summary = {
        "id": sample.id,
        "text": sample.text,
        "words": tokens,
        "manipulated_positions": list(sample.fake_text_pos),
        "box_xyxy": list(box) if box else None,
        "grid": list(grid),
        "word_files": files,
        "raw_weights": weights.tolist(),
        "mass_in_box": {str(p): attention_mass_in_box(weights[p], inside) for p in words} if inside.any() else None,
    }
    (out / f"{sample.id}_attn.json").write_text(json.dumps(summary, indent=1))
    return summary
