"""Auxiliary caption / explanation text from a chat-completion endpoint.

Request (POST ``$ASAP_LLM_ENDPOINT``, ``Authorization: Bearer $ASAP_LLM_KEY``)::

    {"model": "<model>", "max_tokens": 64,
     "messages": [{"role": "user", "content": <content>}]}

For captions ``content`` is a list with the instruction text part and an
``image_url`` part holding a base64 PNG data URL; for explanations it is the
filled-in instruction string.  The response must carry
``choices[0].message.content``.

Responses are cached as ``<cache_dir>/<kind>/<sha256>.json``.  Any network,
auth or format failure logs a warning and falls back to the local stub.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
from pathlib import Path

import httpx
import numpy as np
from PIL import Image

from .synthetic import MediaSample, stub_caption, stub_explanation

log = logging.getLogger(__name__)

CAPTION_INSTRUCTION = "Give the caption of this picture"
EXPLANATION_INSTRUCTION = (
    "Refer to the following text to describe the specific information of the corresponding image: [T]"
)
KINDS = ("caption", "explanation")


def explanation_prompt(text: str) -> str:
    return EXPLANATION_INSTRUCTION.replace("[T]", text)


def _png_bytes(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.round(image * 255.0).astype(np.uint8), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


class AuxTextClient:
    def __init__(
        self,
        endpoint: str | None = None,
        api_key: str | None = None,
        cache_dir: str | Path | None = None,
        model: str = "default",
        timeout: float = 30.0,
        transport: httpx.BaseTransport | None = None,
    ):
        self.endpoint = endpoint
        self.api_key = api_key
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self.model = model
        self.timeout = timeout
        self._transport = transport
        self.requests_sent = 0

    @classmethod
    def from_env(cls, cache_dir=None, **kwargs) -> "AuxTextClient":
        return cls(
            endpoint=os.environ.get("ASAP_LLM_ENDPOINT") or None,
            api_key=os.environ.get("ASAP_LLM_KEY") or None,
            cache_dir=cache_dir,
            **kwargs,
        )

    def _cache_path(self, kind: str, payload: bytes) -> Path | None:
        if self.cache_dir is None:
            return None
        digest = hashlib.sha256(kind.encode() + b"\0" + payload).hexdigest()
        return self.cache_dir / kind / f"{digest}.json"

    def _request(self, content) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {"model": self.model, "max_tokens": 64, "messages": [{"role": "user", "content": content}]}
        with httpx.Client(timeout=self.timeout, transport=self._transport) as client:
            self.requests_sent += 1
            resp = client.post(self.endpoint, json=body, headers=headers)
            resp.raise_for_status()
            text = resp.json()["choices"][0]["message"]["content"]
        if not isinstance(text, str) or not text.strip():
            raise ValueError("empty completion")
        return text.strip()

    def generate(self, kind: str, image: np.ndarray | None = None, text: str | None = None) -> str | None:
        """Return remote text for ``kind`` or None when unavailable."""
        if kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if not self.endpoint:
            return None
        if kind == "caption":
            png = _png_bytes(image)
            payload = png
            url = "data:image/png;base64," + base64.b64encode(png).decode("ascii")
            content = [
                {"type": "text", "text": CAPTION_INSTRUCTION},
                {"type": "image_url", "image_url": {"url": url}},
            ]
        else:
            content = explanation_prompt(text)
            payload = content.encode("utf-8")

        cache = self._cache_path(kind, payload)
        if cache is not None and cache.exists():
            return json.loads(cache.read_text(encoding="utf-8"))["text"]
        try:
            out = self._request(content)
        except (httpx.HTTPError, KeyError, IndexError, TypeError, ValueError) as exc:
            log.warning("auxiliary %s request failed (%s); using stub text", kind, exc)
            return None
        if cache is not None:
            cache.parent.mkdir(parents=True, exist_ok=True)
            cache.write_text(json.dumps({"kind": kind, "text": out}), encoding="utf-8")
        return out

    def caption(self, sample: MediaSample) -> str:
        out = self.generate("caption", image=sample.image)
        return out if out is not None else stub_caption(sample)

    def explanation(self, sample: MediaSample) -> str:
        out = self.generate("explanation", text=sample.text)
        return out if out is not None else stub_explanation(sample)


def remote_auxtext(sample: MediaSample, kind: str, endpoint: str | None = None, **kwargs) -> str:
    client = AuxTextClient(endpoint=endpoint, **kwargs)
    return client.caption(sample) if kind == "caption" else client.explanation(sample)
