"""Closed word-level vocabulary shared by the generator, the stub texts and any
remote auxiliary text (unknown words map to ``[UNK]``)."""

from __future__ import annotations

import re

PAD, UNK, CLS = "[PAD]", "[UNK]", "[CLS]"
PAD_ID, UNK_ID, CLS_ID = 0, 1, 2

EMOTIONS = ("happy", "sad", "surprised")
COLORS = ("red", "green", "blue", "purple")
SHAPES = ("circle", "square", "triangle")

# Everything the templates in ``synthetic`` can emit, plus some common words so
# that remote model output is not all UNK.
_WORDS = (
    EMOTIONS
    + COLORS
    + SHAPES
    + (
        "a", "an", "the", "one", "of", "and", "with", "to", "is", "are", "in",
        "on", "at", "by", "near", "next", "beside", "sits", "stands", "shows",
        "showing", "picture", "photo", "image", "person", "man", "woman", "face",
        "looks", "looking", "expression", "clearly", "visible", "likely",
        "depicts", "scene", "there", "nearby", "shape", "colored", "plain",
        "gray", "background", "left", "right", "small", "large", "who", "very",
        "smiling", "frowning", "crying", "shocked", "celebrating", "joy",
        "detail", "describes", "text", "corresponding", "specific", "information",
        "this", "that", "it", "its", "their", "people", "object", "center",
    )
)

VOCAB: tuple[str, ...] = (PAD, UNK, CLS) + tuple(dict.fromkeys(_WORDS))
WORD_TO_ID: dict[str, int] = {w: i for i, w in enumerate(VOCAB)}
VOCAB_SIZE = 256  # embedding table size; ids above len(VOCAB) are never produced

assert len(VOCAB) <= VOCAB_SIZE

_SPLIT = re.compile(r"[a-z]+")


def words(text: str) -> list[str]:
    return _SPLIT.findall(text.lower())


def encode(text: str, max_len: int | None = None) -> list[int]:
    """Map text to ids word by word; out-of-vocabulary words become ``UNK_ID``."""
    ids = [WORD_TO_ID.get(w, UNK_ID) for w in words(text)]
    return ids if max_len is None else ids[:max_len]


def decode(ids) -> str:
    return " ".join(VOCAB[i] if i < len(VOCAB) else UNK for i in ids if i != PAD_ID)
