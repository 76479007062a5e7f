"""JSON Lines manifest with PNG images stored next to it.

One object per line::

    {"id": "000017", "image": "images/000017.png", "text": "...",
     "fake_cls": ["face_swap", "text_attribute"],
     "fake_image_box": [x1, y1, x2, y2],      # pixels, all zero when absent
     "fake_text_pos": [1],                    # word indices into ``text``
     "caption": "...", "explanation": "..."}

Image paths are relative to the manifest's directory.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .synthetic import FAKE_CLS_NAMES, MediaSample, make_labels

REQUIRED_KEYS = ("id", "image", "text", "fake_cls", "fake_image_box", "fake_text_pos", "caption", "explanation")
AUX_KEYS = ("caption", "explanation")
_CLS_TO_TYPE = {v: k for k, v in FAKE_CLS_NAMES.items()}


class ManifestError(ValueError):
    pass


def validate_entry(entry: dict, lineno: int | None = None, require_aux: bool = True) -> dict:
    where = f" (line {lineno})" if lineno is not None else ""
    needed = REQUIRED_KEYS if require_aux else tuple(k for k in REQUIRED_KEYS if k not in AUX_KEYS)
    missing = [k for k in needed if k not in entry]
    if missing:
        raise ManifestError(f"manifest entry missing keys {missing}{where}")
    box = entry["fake_image_box"]
    if not (isinstance(box, list) and len(box) == 4 and all(isinstance(v, (int, float)) for v in box)):
        raise ManifestError(f"fake_image_box must be 4 numbers{where}")
    pos = entry["fake_text_pos"]
    if not (isinstance(pos, list) and all(isinstance(p, int) and p >= 0 for p in pos)):
        raise ManifestError(f"fake_text_pos must be a list of token indices{where}")
    bad = [c for c in entry["fake_cls"] if c not in _CLS_TO_TYPE]
    if bad:
        raise ManifestError(f"unknown fake_cls values {bad}{where}")
    return entry


def save_manifest(path: str | Path, entries: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for entry in entries:
            validate_entry(entry)
            fh.write(json.dumps({k: entry[k] for k in REQUIRED_KEYS}) + "\n")


def load_manifest(path: str | Path, require_aux: bool = True) -> list[dict]:
    """Read and validate a manifest.  Evaluation passes ``require_aux=False``
    since auxiliary texts are a training-only input."""
    entries = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON on line {lineno}: {exc}") from exc
            entries.append(validate_entry(entry, lineno, require_aux))
    return entries


def sample_to_entry(sample: MediaSample, image_relpath: str) -> dict:
    return {
        "id": sample.id,
        "image": image_relpath,
        "text": sample.text,
        "fake_cls": [FAKE_CLS_NAMES[t] for t in sample.manip_type],
        "fake_image_box": [float(v) for v in sample.box_xyxy],
        "fake_text_pos": list(sample.fake_text_pos),
        "caption": sample.caption,
        "explanation": sample.explanation,
    }


def write_dataset(out_dir: str | Path, samples: list[MediaSample], name: str = "manifest.jsonl") -> Path:
    """Write PNGs under ``out_dir/images`` and the manifest at ``out_dir/name``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        rel = f"images/{s.id}.png"
        pixels = np.round(s.image * 255.0).astype(np.uint8)
        Image.fromarray(pixels, mode="RGB").save(out_dir / rel, format="PNG", optimize=False)
        entries.append(sample_to_entry(s, rel))
    manifest = out_dir / name
    save_manifest(manifest, entries)
    return manifest


def entry_to_sample(entry: dict, root: Path, max_text_len: int = 24) -> MediaSample:
    with Image.open(root / entry["image"]) as im:
        image = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    kinds = tuple(_CLS_TO_TYPE[c] for c in entry["fake_cls"])
    box = tuple(float(v) for v in entry["fake_image_box"])
    return MediaSample(
        id=str(entry["id"]),
        image=image,
        text=entry["text"],
        labels=make_labels(kinds, box, entry["fake_text_pos"], image.shape[0], max_text_len),
        manip_type=kinds,
        caption=entry.get("caption") or "",
        explanation=entry.get("explanation") or "",
        fake_text_pos=list(entry["fake_text_pos"]),
        box_xyxy=box,
    )


def load_samples(path: str | Path, max_text_len: int = 24, require_aux: bool = True) -> list[MediaSample]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    return [entry_to_sample(e, path.parent, max_text_len) for e in load_manifest(path, require_aux)]
