"""Procedural DGM4-style image-text pairs with exact manipulation annotations.

Every image shows one face glyph (its mouth encodes an emotion) and one colored
shape on a gray background.  The paired sentence names the emotion, the color
and the shape.  Manipulations:

* ``FS`` face swap: the face is re-drawn with another identity (skin tone, eye
  style) and a blending-noise trace.
* ``FA`` face attribute: the mouth is re-drawn with another emotion and the
  face region gets a tint + mild noise trace.
* ``TS`` text swap: the color or shape word is replaced.
* ``TA`` text attribute: the emotion word is replaced.

Category assignment is stratified (exact counts from the mix), everything else
is drawn from a generator seeded by ``(seed, index)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw

from . import vocab

TYPES = ("FS", "FA", "TS", "TA")
FAKE_CLS_NAMES = {
    "FS": "face_swap",
    "FA": "face_attribute",
    "TS": "text_swap",
    "TA": "text_attribute",
}

DEFAULT_MIX = {
    "NONE": 0.337,
    "FS": 0.14,
    "FA": 0.14,
    "TS": 0.12,
    "TA": 0.12,
    "FS+TA": 0.072,
    "FA+TS": 0.071,
}

TEXT_TEMPLATES = (
    "a {emo} person next to a {color} {shape}",
    "the {color} {shape} sits beside a {emo} face",
    "photo of a {emo} man near one {color} {shape}",
    "a {color} {shape} and a {emo} woman",
)
CAPTION_TEMPLATES = (
    "a picture of a {emo} face and a {color} {shape}",
    "this image shows a {color} {shape} near a {emo} face",
)
EXPLANATION_TEMPLATE = "{text} the {emo} expression is clearly visible with the {color} {shape} nearby"

_RGB = {
    "red": (0.86, 0.12, 0.12),
    "green": (0.12, 0.70, 0.20),
    "blue": (0.15, 0.25, 0.90),
    "purple": (0.58, 0.18, 0.75),
}
# each expression also has its own mouth colour, outside the shape palette,
# so the emotion is readable from patch colour as well as from the stroke
_MOUTH_RGB = {
    "happy": (1.0, 0.55, 0.0),
    "sad": (0.0, 0.70, 0.85),
    "surprised": (0.05, 0.05, 0.05),
}
_SKIN = (0.96, 0.80, 0.62)
_SWAP_SKINS = ((1.0, 0.93, 0.88), (0.55, 0.38, 0.25), (0.80, 0.86, 0.55))


class ConfigError(ValueError):
    """Raised for invalid generator settings (e.g. a mix that does not sum to 1)."""


@dataclass
class SampleLabels:
    y_bin: int
    y_mul: np.ndarray  # (4,) over FS, FA, TS, TA
    y_box: np.ndarray  # (4,) normalized cx, cy, w, h; zeros when no image edit
    y_tok: np.ndarray  # (max_text_len,) 0/1
    pristine: bool


@dataclass
class MediaSample:
    id: str
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    text: str
    labels: SampleLabels
    manip_type: tuple[str, ...]
    caption: str = ""
    explanation: str = ""
    fake_text_pos: list[int] = field(default_factory=list)
    box_xyxy: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    scene: dict | None = None  # generator-side attributes, absent for loaded samples

    @property
    def text_ids(self) -> list[int]:
        return vocab.encode(self.text)

    @property
    def caption_ids(self) -> list[int]:
        return vocab.encode(self.caption)

    @property
    def explanation_ids(self) -> list[int]:
        return vocab.encode(self.explanation)


def validate_mix(mix: dict[str, float]) -> dict[str, float]:
    unknown = set(mix) - set(DEFAULT_MIX)
    if unknown:
        raise ConfigError(f"unknown manipulation categories in mix: {sorted(unknown)}")
    if any(v < 0 for v in mix.values()):
        raise ConfigError("mix proportions must be non-negative")
    total = sum(mix.values())
    if abs(total - 1.0) > 1e-6:
        raise ConfigError(f"mix proportions sum to {total:.6f}, expected 1")
    return dict(mix)


def parse_mix(spec: str) -> dict[str, float]:
    """Parse ``"NONE=0.5,FS=0.5"`` into a validated mix dict."""
    mix = {}
    for part in spec.split(","):
        if not part.strip():
            continue
        key, sep, value = part.partition("=")
        if not sep:
            raise ConfigError(f"bad mix entry {part!r}, expected KEY=VALUE")
        try:
            mix[key.strip().upper()] = float(value)
        except ValueError as exc:
            raise ConfigError(f"bad mix value in {part!r}") from exc
    return validate_mix(mix)


def _stratified_categories(n: int, mix: dict[str, float], seed: int) -> list[str]:
    keys = list(mix)
    raw = np.array([mix[k] * n for k in keys])
    counts = np.floor(raw).astype(int)
    # largest remainder, ties broken by key order
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    cats = [k for k, c in zip(keys, counts) for _ in range(c)]
    order = np.random.default_rng([seed, 2**31 - 1]).permutation(n)
    return [cats[i] for i in order]


def _paint(img: np.ndarray, mask: np.ndarray, rgb) -> None:
    img[mask] = rgb


def _mask(size: int, draw_fn) -> np.ndarray:
    canvas = Image.new("L", (size, size), 0)
    draw_fn(ImageDraw.Draw(canvas))
    return np.asarray(canvas) > 0


def _draw_face(img, cx, cy, r, emotion, skin, eye_style):
    size = img.shape[0]
    _paint(img, _mask(size, lambda d: d.ellipse([cx - r, cy - r, cx + r, cy + r], fill=255)), skin)
    dark = (0.08, 0.06, 0.05)
    for ex in (cx - r / 2.7, cx + r / 2.7):
        ey = cy - r / 3.5
        if eye_style == "round":
            box = [ex - 1.5, ey - 1.5, ex + 1.5, ey + 1.5]
            _paint(img, _mask(size, lambda d, b=box: d.ellipse(b, fill=255)), dark)
        else:
            box = [ex - 2, ey - 1, ex + 2, ey + 1]
            _paint(img, _mask(size, lambda d, b=box: d.rectangle(b, fill=255)), dark)
    _draw_mouth(img, cx, cy, r, emotion)


def _draw_mouth(img, cx, cy, r, emotion):
    size = img.shape[0]
    w = r * 0.55
    if emotion == "happy":
        fn = lambda d: d.arc([cx - w, cy - r * 0.25, cx + w, cy + r * 0.6], 20, 160, fill=255, width=3)
    elif emotion == "sad":
        fn = lambda d: d.arc([cx - w, cy + r * 0.3, cx + w, cy + r * 1.1], 200, 340, fill=255, width=3)
    else:
        fn = lambda d: d.ellipse([cx - 3.5, cy + r * 0.2, cx + 3.5, cy + r * 0.2 + 7], fill=255)
    _paint(img, _mask(size, fn), _MOUTH_RGB[emotion])


def _draw_shape(img, cx, cy, s, shape, rgb):
    size = img.shape[0]
    h = s / 2
    if shape == "circle":
        fn = lambda d: d.ellipse([cx - h, cy - h, cx + h, cy + h], fill=255)
    elif shape == "square":
        fn = lambda d: d.rectangle([cx - h, cy - h, cx + h, cy + h], fill=255)
    else:
        fn = lambda d: d.polygon([(cx, cy - h), (cx - h, cy + h), (cx + h, cy + h)], fill=255)
    _paint(img, _mask(size, fn), rgb)


def _other(rng, options, current):
    return options[int(rng.choice([i for i, o in enumerate(options) if o != current]))]


def _render_sample(index: int, category: str, seed: int, image_size: int, max_text_len: int) -> MediaSample:
    rng = np.random.default_rng([seed, index])
    size = image_size
    scale = size / 64.0
    kinds = () if category == "NONE" else tuple(category.split("+"))

    emotion = vocab.EMOTIONS[rng.integers(len(vocab.EMOTIONS))]
    color = vocab.COLORS[rng.integers(len(vocab.COLORS))]
    shape = vocab.SHAPES[rng.integers(len(vocab.SHAPES))]
    template = int(rng.integers(len(TEXT_TEMPLATES)))

    r = float(rng.uniform(9, 12)) * scale
    s = float(rng.uniform(20, 26)) * scale
    margin = r + 2 * scale
    while True:
        fcx, fcy = rng.uniform(margin, size - margin, size=2)
        ocx, ocy = rng.uniform(s / 2 + 1, size - s / 2 - 1, size=2)
        if max(abs(fcx - ocx), abs(fcy - ocy)) > r + s / 2 + 2 * scale:
            break

    base = rng.uniform(0.55, 0.75)
    img = np.full((size, size, 3), base, dtype=np.float64)
    img += rng.normal(0.0, 0.015, size=img.shape)
    _draw_shape(img, ocx, ocy, s, shape, _RGB[color])
    _draw_face(img, fcx, fcy, r, emotion, _SKIN, "round")

    box = (0.0, 0.0, 0.0, 0.0)
    image_emotion = emotion
    if "FS" in kinds or "FA" in kinds:
        x1, y1 = max(0.0, math.floor(fcx - r - 1)), max(0.0, math.floor(fcy - r - 1))
        x2, y2 = min(float(size), math.ceil(fcx + r + 1)), min(float(size), math.ceil(fcy + r + 1))
        box = (x1, y1, x2, y2)
        region = (slice(int(y1), int(y2)), slice(int(x1), int(x2)))
        if "FS" in kinds:
            skin = _SWAP_SKINS[rng.integers(len(_SWAP_SKINS))]
            _draw_face(img, fcx, fcy, r, emotion, skin, "square")
            img[region] += rng.normal(0.0, 0.06, size=img[region].shape)
        else:
            image_emotion = _other(rng, vocab.EMOTIONS, emotion)
            # erase the old mouth before drawing the new one
            erase = _mask(size, lambda d: d.ellipse([fcx - r * 0.7, fcy - r * 0.05, fcx + r * 0.7, fcy + r * 0.92], fill=255))
            inside = _mask(size, lambda d: d.ellipse([fcx - r, fcy - r, fcx + r, fcy + r], fill=255))
            _paint(img, erase & inside, _SKIN)
            _draw_mouth(img, fcx, fcy, r, image_emotion)
            img[region] *= np.array([1.06, 0.94, 0.92])
            img[region] += rng.normal(0.0, 0.03, size=img[region].shape)
    img = np.clip(img, 0.0, 1.0)
    # quantize now so the in-memory image equals its PNG round trip
    img = np.round(img * 255.0).astype(np.uint8).astype(np.float32) / 255.0

    text_emotion, text_color, text_shape = emotion, color, shape
    if "TA" in kinds:
        text_emotion = _other(rng, vocab.EMOTIONS, emotion)
    if "TS" in kinds:
        if rng.random() < 0.5:
            text_color = _other(rng, vocab.COLORS, color)
        else:
            text_shape = _other(rng, vocab.SHAPES, shape)
    text = TEXT_TEMPLATES[template].format(emo=text_emotion, color=text_color, shape=text_shape)
    tokens = vocab.words(text)
    swapped = {w for w, orig in ((text_emotion, emotion), (text_color, color), (text_shape, shape)) if w != orig}
    fake_text_pos = [i for i, w in enumerate(tokens) if w in swapped]

    scene = {
        "image_emotion": image_emotion,
        "color": color,
        "shape": shape,
        "text_emotion": text_emotion,
        "text_color": text_color,
        "text_shape": text_shape,
        "caption_template": int(rng.integers(len(CAPTION_TEMPLATES))),
    }
    sample = MediaSample(
        id=f"{index:06d}",
        image=img,
        text=text,
        labels=make_labels(kinds, box, fake_text_pos, size, max_text_len),
        manip_type=kinds,
        fake_text_pos=fake_text_pos,
        box_xyxy=box,
        scene=scene,
    )
    sample.caption = stub_caption(sample)
    sample.explanation = stub_explanation(sample)
    return sample


def make_labels(kinds, box_xyxy, fake_text_pos, image_size: int, max_text_len: int) -> SampleLabels:
    y_mul = np.array([float(t in kinds) for t in TYPES], dtype=np.float32)
    x1, y1, x2, y2 = box_xyxy
    if x2 > x1 and y2 > y1:
        y_box = np.array(
            [(x1 + x2) / 2 / image_size, (y1 + y2) / 2 / image_size, (x2 - x1) / image_size, (y2 - y1) / image_size],
            dtype=np.float32,
        )
    else:
        y_box = np.zeros(4, dtype=np.float32)
    y_tok = np.zeros(max_text_len, dtype=np.float32)
    for p in fake_text_pos:
        if p < max_text_len:
            y_tok[p] = 1.0
    pristine = not kinds
    return SampleLabels(y_bin=int(not pristine), y_mul=y_mul, y_box=y_box, y_tok=y_tok, pristine=pristine)


def stub_caption(sample: MediaSample) -> str:
    """Describe what is actually drawn, so the caption always matches the image."""
    sc = sample.scene
    if sc is None:
        return sample.caption
    return CAPTION_TEMPLATES[sc["caption_template"]].format(emo=sc["image_emotion"], color=sc["color"], shape=sc["shape"])


def stub_explanation(sample: MediaSample) -> str:
    """Elaborate on the sentence; matches the image only when nothing was edited."""
    sc = sample.scene
    if sc is None:
        return sample.explanation
    return EXPLANATION_TEMPLATE.format(
        text=sample.text, emo=sc["text_emotion"], color=sc["text_color"], shape=sc["text_shape"]
    )


def generate_dataset(
    n: int,
    seed: int = 0,
    mix: dict[str, float] | None = None,
    image_size: int = 64,
    max_text_len: int = 24,
) -> list[MediaSample]:
    if n < 1:
        raise ConfigError("n must be >= 1")
    mix = validate_mix(DEFAULT_MIX if mix is None else mix)
    categories = _stratified_categories(n, mix, seed)
    return [_render_sample(i, c, seed, image_size, max_text_len) for i, c in enumerate(categories)]
