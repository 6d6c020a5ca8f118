"""Frozen dual encoders.

Two backends implement the same surface:

* ``ToyBackend`` -- a small seeded stand-in for a pretrained dual encoder.
  Image path: crop, bilinear resize to ``input_size``, center, affine map,
  tanh, normalize.  Text path: mean-pool the token embeddings, affine map,
  tanh, normalize.  The text path has an exact vector-Jacobian product so
  prompt context vectors can be optimized through it.
* ``AdapterBackend`` -- talks to an external encoder through a small
  request/response protocol (see ``BackendServer`` for the reference server
  side).  Real checkpoints plug in there.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import threading
import urllib.error
import urllib.request
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .embedcore import normalize_rows
from .errors import (
    BackendUnavailable,
    ConfigError,
    DimensionMismatch,
    GradientUnsupported,
    InvalidImage,
    UnknownToken,
)

DEFAULT_TEMPLATE = "a photo of a {}"
PLACEHOLDER = "{}"

VjpFn = Callable[[np.ndarray], list]


@dataclass(frozen=True)
class ImageRef:
    """Pixels in [0, 1] (H x W or H x W x channels) plus an optional crop box.

    ``crop_box`` is ``(x, y, w, h)`` in pixels and must lie inside the image.
    """

    pixels: np.ndarray
    crop_box: tuple | None = None
    ident: str | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim not in (2, 3) or px.shape[0] < 1 or px.shape[1] < 1:
            raise InvalidImage(f"expected an H x W[ x C] array, got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise InvalidImage("pixel values must be finite and within [0, 1]")
        object.__setattr__(self, "pixels", px)
        if self.crop_box is not None:
            x, y, w, h = (int(v) for v in self.crop_box)
            H, W = px.shape[:2]
            if w < 1 or h < 1 or x < 0 or y < 0 or x + w > W or y + h > H:
                raise InvalidImage(f"crop box {self.crop_box} outside {W}x{H} image")
            object.__setattr__(self, "crop_box", (x, y, w, h))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def with_box(self, box) -> "ImageRef":
        return ImageRef(self.pixels, tuple(box), self.ident)

    def gray(self) -> np.ndarray:
        px = self.pixels if self.pixels.ndim == 2 else self.pixels.mean(axis=2)
        if self.crop_box is not None:
            x, y, w, h = self.crop_box
            px = px[y : y + h, x : x + w]
        return px


@dataclass(frozen=True)
class TokenSequence:
    """Ordered token embeddings; ``class_slot`` marks the class-name token."""

    entries: np.ndarray
    class_slot: int | None = None

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.float64)
        if e.ndim != 2 or e.shape[0] < 1:
            raise ValueError(f"token sequence must be (length >= 1, dim), got {e.shape}")
        if self.class_slot is not None and not 0 <= self.class_slot < e.shape[0]:
            raise ValueError(f"class_slot {self.class_slot} outside sequence of {e.shape[0]}")
        object.__setattr__(self, "entries", e)

    def __len__(self):
        return self.entries.shape[0]


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of a 2-D array to ``size x size``."""
    H, W = img.shape

    def axis(n_in):
        src = (np.arange(size) + 0.5) * (n_in / size) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(H)
    x0, x1, fx = axis(W)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def split_template(template: str) -> tuple[list[str], list[str]]:
    """Split a template around its single ``{}`` into prefix and suffix words."""
    if template.count(PLACEHOLDER) != 1:
        raise ConfigError(f"template must contain exactly one {PLACEHOLDER!r}: {template!r}")
    before, after = template.split(PLACEHOLDER)
    return before.split(), after.split()


class EncoderBackend(ABC):
    """Frozen image/text encoder producing unit-norm embeddings of size ``dim``."""

    name: str
    dim: int
    text_context_dim: int
    input_size: int
    differentiable_text: bool

    @abstractmethod
    def encode_images(self, imgs: Sequence[ImageRef]) -> np.ndarray:
        """(n, dim) unit-norm rows."""

    def encode_image(self, img: ImageRef) -> np.ndarray:
        return self.encode_images([img])[0]

    @abstractmethod
    def encode_texts(self, seqs: Sequence[TokenSequence], with_vjp: bool = False):
        """Encode several token sequences.

        Returns ``emb`` of shape (n, dim), or ``(emb, vjp)`` when ``with_vjp``;
        ``vjp(G)`` maps an (n, dim) cotangent to one (len_i, text_context_dim)
        gradient per sequence.
        """

    def encode_text(self, toks: TokenSequence, with_vjp: bool = False):
        if not with_vjp:
            return self.encode_texts([toks])[0]
        emb, vjp = self.encode_texts([toks], with_vjp=True)
        return emb[0], (lambda g: vjp(np.asarray(g, dtype=np.float64)[None, :])[0])

    def text_jacobian(self, toks: TokenSequence) -> np.ndarray:
        """Jacobian d(embedding)/d(entries), shape (dim, len, text_context_dim)."""
        _, vjp = self.encode_text(toks, with_vjp=True)
        eye = np.eye(self.dim)
        return np.stack([vjp(eye[i]) for i in range(self.dim)])

    @abstractmethod
    def token_vectors(self, words: Sequence[str]) -> np.ndarray:
        """Fixed vocabulary lookup, (len(words), text_context_dim)."""

    def zero_shot_tokens(self, class_name: str, template: str = DEFAULT_TEMPLATE) -> TokenSequence:
        # the class name always occupies one slot, even when it has spaces
        before, after = split_template(template)
        words = [*before, class_name, *after]
        return TokenSequence(self.token_vectors(words), class_slot=len(before))

    def class_token(self, class_name: str) -> np.ndarray:
        return self.token_vectors([class_name])[0]

    def checksum(self) -> str:
        """Digest of the frozen parameters, for before/after comparisons."""
        return ""

    def fingerprint(self) -> dict:
        return {"name": self.name, "dim": self.dim, "checksum": self.checksum()}


def zero_shot_tokens(backend: EncoderBackend, class_name: str, template: str = DEFAULT_TEMPLATE) -> TokenSequence:
    return backend.zero_shot_tokens(class_name, template)


def zero_shot_embeddings(backend: EncoderBackend, class_names: Sequence[str], templates=(DEFAULT_TEMPLATE,)) -> np.ndarray:
    """(K, dim) class embeddings; several templates are averaged then renormalized."""
    templates = list(templates) or [DEFAULT_TEMPLATE]
    seqs = [backend.zero_shot_tokens(c, t) for c in class_names for t in templates]
    emb = backend.encode_texts(seqs).reshape(len(class_names), len(templates), -1)
    return normalize_rows(emb.mean(axis=1))


def _stable_hash(word: str) -> int:
    return int.from_bytes(hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest(), "little")


class ToyBackend(EncoderBackend):
    """Deterministic seeded encoder with an analytic text-path gradient."""

    differentiable_text = True

    def __init__(self, seed: int = 0, dim: int = 64, text_context_dim: int | None = None,
                 input_size: int = 16, vocab_size: int = 4096, bias_std: float = 0.05):
        if dim < 8:
            raise ConfigError(f"toy backend needs dim >= 8, got {dim}")
        self.seed = int(seed)
        self.dim = int(dim)
        self.text_context_dim = int(text_context_dim or dim)
        self.input_size = int(input_size)
        self.vocab_size = int(vocab_size)
        self.name = f"toy-s{self.seed}-d{self.dim}"
        rng = np.random.default_rng(self.seed)
        n_px = self.input_size * self.input_size
        self.w_img = rng.normal(0.0, 1.0 / np.sqrt(n_px), (self.dim, n_px))
        self.b_img = rng.normal(0.0, bias_std, self.dim)
        self.w_txt = rng.normal(0.0, 1.0 / np.sqrt(self.text_context_dim), (self.dim, self.text_context_dim))
        self.b_txt = rng.normal(0.0, bias_std, self.dim)
        self.vocab = rng.normal(0.0, 1.0, (self.vocab_size, self.text_context_dim))
        for arr in (self.w_img, self.b_img, self.w_txt, self.b_txt, self.vocab):
            arr.setflags(write=False)

    def _pixels(self, img: ImageRef) -> np.ndarray:
        return resize_bilinear(img.gray(), self.input_size).ravel() - 0.5

    def encode_images(self, imgs):
        if len(imgs) == 0:
            return np.zeros((0, self.dim))
        x = np.stack([self._pixels(im) for im in imgs])
        return normalize_rows(np.tanh(x @ self.w_img.T + self.b_img))

    def encode_texts(self, seqs, with_vjp=False):
        if len(seqs) == 0:
            out = np.zeros((0, self.dim))
            return (out, lambda g: []) if with_vjp else out
        for s in seqs:
            if s.entries.shape[1] != self.text_context_dim:
                raise DimensionMismatch(
                    f"token dim {s.entries.shape[1]} != text_context_dim {self.text_context_dim}"
                )
        lengths = [len(s) for s in seqs]
        pooled = np.stack([s.entries.mean(axis=0) for s in seqs])
        t = np.tanh(pooled @ self.w_txt.T + self.b_txt)
        norms = np.linalg.norm(t, axis=1, keepdims=True)
        h = t / norms
        if not with_vjp:
            return h

        def vjp(g):
            g = np.asarray(g, dtype=np.float64)
            g_t = (g - h * np.sum(h * g, axis=1, keepdims=True)) / norms
            g_pooled = (g_t * (1.0 - t * t)) @ self.w_txt
            return [np.tile(g_pooled[i] / n, (n, 1)) for i, n in enumerate(lengths)]

        return h, vjp

    def token_vectors(self, words):
        idx = [_stable_hash(w) % self.vocab_size for w in words]
        return self.vocab[idx].copy()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self.w_img, self.b_img, self.w_txt, self.b_txt, self.vocab):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def fingerprint(self) -> dict:
        return {"name": "toy", "seed": self.seed, "dim": self.dim,
                "text_context_dim": self.text_context_dim, "input_size": self.input_size,
                "checksum": self.checksum()}


def toy_backend(seed: int = 0, dim: int = 64, **kwargs) -> ToyBackend:
    return ToyBackend(seed=seed, dim=dim, **kwargs)


# ---------------------------------------------------------------------------
# adapter protocol
#
# request  = {"kind": "image" | "text" | "vjp" | "tokens" | "info", "payload": {...}}
# response = {"embedding": [d float32 values], "vjp": handle?} or {"error": {...}}
# ---------------------------------------------------------------------------

_ERRORS = {cls.__name__: cls for cls in (UnknownToken, InvalidImage, GradientUnsupported,
                                         DimensionMismatch, BackendUnavailable)}


def image_request(img: ImageRef) -> dict:
    return {"kind": "image", "payload": {
        "pixels": img.pixels.tolist(),
        "crop_box": list(img.crop_box) if img.crop_box is not None else None,
    }}


def text_request(toks: TokenSequence, want_vjp: bool = False) -> dict:
    return {"kind": "text", "payload": {
        "tokens": toks.entries.tolist(),
        "class_slot": toks.class_slot,
        "want_vjp": bool(want_vjp),
    }}


class BackendServer:
    """Serves a local backend over the adapter protocol (JSON-compatible dicts).

    VJP handles are held until consumed by a ``vjp`` request.  Access is
    serialized with a lock so non-reentrant backends are safe to wrap.
    """

    def __init__(self, backend: EncoderBackend):
        self.backend = backend
        self._pending: dict[int, VjpFn] = {}
        self._ids = itertools.count(1)
        self._lock = threading.Lock()

    def handle(self, request: dict) -> dict:
        try:
            with self._lock:
                return self._dispatch(request.get("kind"), request.get("payload") or {})
        except (UnknownToken, InvalidImage, GradientUnsupported, DimensionMismatch) as exc:
            return {"error": {"type": type(exc).__name__, "message": str(exc)}}

    def _dispatch(self, kind, payload):
        b = self.backend
        if kind == "info":
            return {"name": b.name, "dim": b.dim, "text_context_dim": b.text_context_dim,
                    "input_size": b.input_size, "differentiable_text": b.differentiable_text,
                    "checksum": b.checksum()}
        if kind == "image":
            box = payload.get("crop_box")
            img = ImageRef(np.asarray(payload["pixels"]), tuple(box) if box else None)
            return {"embedding": b.encode_image(img).astype(np.float32).tolist()}
        if kind == "text":
            toks = TokenSequence(np.asarray(payload["tokens"]), payload.get("class_slot"))
            if not payload.get("want_vjp"):
                return {"embedding": b.encode_text(toks).astype(np.float32).tolist()}
            if not b.differentiable_text:
                raise GradientUnsupported(f"backend {b.name} has no text-path gradient")
            emb, vjp = b.encode_text(toks, with_vjp=True)
            handle = next(self._ids)
            self._pending[handle] = vjp
            return {"embedding": emb.astype(np.float32).tolist(), "vjp": handle}
        if kind == "vjp":
            vjp = self._pending.pop(int(payload["handle"]), None)
            if vjp is None:
                return {"error": {"type": "BackendUnavailable", "message": "unknown vjp handle"}}
            return {"grad": vjp(np.asarray(payload["cotangent"], dtype=np.float64)).tolist()}
        if kind == "tokens":
            return {"tokens": b.token_vectors(payload["words"]).tolist()}
        return {"error": {"type": "BackendUnavailable", "message": f"unknown request kind {kind!r}"}}


class HttpTransport:
    """POSTs protocol requests as JSON to ``url``."""

    def __init__(self, url: str, timeout: float = 60.0):
        self.url = url
        self.timeout = timeout

    def __call__(self, request: dict) -> dict:
        data = json.dumps(request).encode("utf-8")
        req = urllib.request.Request(self.url, data=data, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError) as exc:
            raise BackendUnavailable(f"adapter at {self.url} unreachable: {exc}") from exc


def make_http_server(backend: EncoderBackend, host: str = "127.0.0.1", port: int = 0):
    """Return an ``http.server`` instance exposing ``backend`` (call ``serve_forever``)."""
    from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

    server = BackendServer(backend)

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            body = self.rfile.read(int(self.headers.get("Content-Length", 0)))
            out = json.dumps(server.handle(json.loads(body))).encode("utf-8")
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(out)))
            self.end_headers()
            self.wfile.write(out)

        def log_message(self, *args):
            pass

    return ThreadingHTTPServer((host, port), Handler)


class AdapterBackend(EncoderBackend):
    """Client side of the adapter protocol.

    ``transport`` is any callable taking a request dict and returning a
    response dict: ``HttpTransport(url)`` for a remote process or
    ``BackendServer(b).handle`` in-process.
    """

    def __init__(self, transport: Callable[[dict], dict], info: dict | None = None):
        self.transport = transport
        self.info = info or self._call({"kind": "info", "payload": {}})
        self.name = str(self.info.get("name", "adapter"))
        self.dim = int(self.info["dim"])
        self.text_context_dim = int(self.info["text_context_dim"])
        self.input_size = int(self.info.get("input_size", 224))
        self.differentiable_text = bool(self.info.get("differentiable_text", False))

    def _call(self, request):
        try:
            resp = self.transport(request)
        except BackendUnavailable:
            raise
        except Exception as exc:  # transport failures of any flavour
            raise BackendUnavailable(str(exc)) from exc
        err = resp.get("error")
        if err:
            raise _ERRORS.get(err.get("type"), BackendUnavailable)(err.get("message", ""))
        return resp

    def _embedding(self, resp):
        v = np.asarray(resp["embedding"], dtype=np.float64)
        if v.shape != (self.dim,):
            raise DimensionMismatch(f"adapter returned shape {v.shape}, expected ({self.dim},)")
        return v / np.linalg.norm(v)

    def encode_images(self, imgs):
        if len(imgs) == 0:
            return np.zeros((0, self.dim))
        return np.stack([self._embedding(self._call(image_request(im))) for im in imgs])

    def encode_texts(self, seqs, with_vjp=False):
        if with_vjp and not self.differentiable_text:
            raise GradientUnsupported(f"adapter {self.name} does not expose text-path VJPs")
        resps = [self._call(text_request(s, with_vjp)) for s in seqs]
        emb = np.stack([self._embedding(r) for r in resps]) if resps else np.zeros((0, self.dim))
        if not with_vjp:
            return emb
        handles = [r["vjp"] for r in resps]

        def vjp(g):
            g = np.asarray(g, dtype=np.float64)
            return [np.asarray(self._call({"kind": "vjp", "payload": {
                        "handle": h, "cotangent": row.tolist()}})["grad"], dtype=np.float64)
                    for h, row in zip(handles, g)]

        return emb, vjp

    def token_vectors(self, words):
        resp = self._call({"kind": "tokens", "payload": {"words": list(words)}})
        return np.asarray(resp["tokens"], dtype=np.float64)

    def checksum(self) -> str:
        return str(self.info.get("checksum", ""))

    def fingerprint(self) -> dict:
        return {"name": "adapter", "backend": self.name, "dim": self.dim, "checksum": self.checksum()}
