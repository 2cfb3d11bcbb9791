"""Frozen stand-ins for the pre-trained face, text, and image backbones.

All three are seed-deterministic functions of the world: weights are drawn
once at construction and never updated by any training stage. They operate
on plain numpy arrays (no gradient tape) since nothing downstream ever
differentiates through them.

The text and image encoders share the world's semantic map: caption class
embeddings and image embeddings expose the same rotated attribute code in
their leading coordinates, which is what makes cross-modal cosine scores
meaningful. The image encoder reads only the attribute subspace of x0, so
its output carries no identity information at all.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .autodiff import sinusoidal_positions
from .errors import ContractError
from .world import PAD_TOKEN, WorldSpec

Array = np.ndarray

FACE_PATCH_COUNT = 4
PATCH_DIM = 32
TEXT_CLS_DIM = 32
FACE_CLS_DIM = 32
_FACE_HIDDEN = 64
_POSITION_SCALE = 0.25
_MIX_SCALE = 0.1
_BASE_EMBED_SCALE = 0.1
_BIAS_SCALE = 0.35


@dataclass(frozen=True)
class FaceEncoder:
    """Reference vector -> class embedding plus patch tokens.

    The class path is a bias-free two-layer tanh map, so it is odd: a
    negated reference gives the exactly negated embedding, and the zero
    (null-face) reference maps to the zero class vector. Patch tokens are
    fixed learned constants shifted by a linear view of the reference.
    """

    w1: Array  # (hidden, d_face)
    w2: Array  # (d_r, hidden)
    patch_base: Array  # (L_r, d)
    patch_mod: Array  # (d, d_face)

    @property
    def d_face(self) -> int:
        return self.w1.shape[1]

    def encode(self, references: Array) -> tuple[Array, Array]:
        references = _check_batch(references, self.d_face, "reference")
        cls = np.tanh(references @ self.w1.T) @ self.w2.T
        patches = self.patch_base[None, :, :] + (references @ self.patch_mod.T)[
            :, None, :
        ]
        return cls, patches

    def weight_arrays(self) -> dict[str, Array]:
        return {
            "face.w1": self.w1,
            "face.w2": self.w2,
            "face.patch_base": self.patch_base,
            "face.patch_mod": self.patch_mod,
        }


@dataclass(frozen=True)
class TextEncoder:
    """Token ids -> per-token patch embeddings and a pooled class embedding.

    Embedding rows of attribute words carry that word's slot code in a
    dedicated coordinate block; one frozen residual self-attention layer
    mixes tokens mildly; the class projection rotates the pooled code block
    through the world's semantic map and adds a fixed off-block bias.
    """

    embedding: Array  # (n_tokens, d)
    wq: Array
    wk: Array
    wv: Array
    wo: Array  # all (d, d)
    cls_proj: Array  # (d_t, d)
    cls_bias: Array  # (d_t,)

    @property
    def n_tokens(self) -> int:
        return self.embedding.shape[0]

    @property
    def d(self) -> int:
        return self.embedding.shape[1]

    def encode(self, tokens: Array) -> tuple[Array, Array]:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ContractError(f"tokens must be (batch, length), got {tokens.shape}")
        if tokens.min() < 0 or tokens.max() >= self.n_tokens:
            raise ContractError("token id outside vocabulary")
        mask = (tokens != PAD_TOKEN).astype(np.float64)
        if np.any(mask.sum(axis=1) == 0):
            raise ContractError("caption with no content tokens")
        b, length = tokens.shape
        emb = self.embedding[tokens] + _POSITION_SCALE * sinusoidal_positions(
            length, self.d
        )
        scores = (emb @ self.wq.T) @ (emb @ self.wk.T).swapaxes(-1, -2)
        scores = scores / np.sqrt(self.d) - 1e9 * (1.0 - mask[:, None, :])
        weights = np.exp(scores - scores.max(axis=-1, keepdims=True))
        weights = weights / weights.sum(axis=-1, keepdims=True)
        mixed = weights @ (emb @ self.wv.T) @ self.wo.T
        patches = emb + mixed * mask[:, :, None]
        pooled = (patches * mask[:, :, None]).sum(axis=1) / mask.sum(axis=1)[:, None]
        cls = pooled @ self.cls_proj.T + self.cls_bias
        return cls, patches

    def weight_arrays(self) -> dict[str, Array]:
        return {
            "text.embedding": self.embedding,
            "text.wq": self.wq,
            "text.wk": self.wk,
            "text.wv": self.wv,
            "text.wo": self.wo,
            "text.cls_proj": self.cls_proj,
            "text.cls_bias": self.cls_bias,
        }


@dataclass(frozen=True)
class ImageEncoder:
    """Image vector -> class embedding in the shared semantic space.

    Reads the attribute subspace of x0 only (the identity subspace is
    orthogonal to ``attr_reader`` by world construction), rotates it through
    the semantic map, and pads with a fixed bias block.
    """

    attr_reader: Array  # (d_attr, d_x): semantic_map @ render_attr.T
    bias: Array  # (d_t,), nonzero only past the semantic block

    @property
    def d_x(self) -> int:
        return self.attr_reader.shape[1]

    @property
    def d_t(self) -> int:
        return self.bias.shape[0]

    def encode(self, x0: Array) -> Array:
        x0 = _check_batch(x0, self.d_x, "image")
        semantic = x0 @ self.attr_reader.T
        out = np.zeros((x0.shape[0], self.d_t))
        out[:, : semantic.shape[1]] = semantic
        return out + self.bias

    def weight_arrays(self) -> dict[str, Array]:
        return {"image.attr_reader": self.attr_reader, "image.bias": self.bias}


@dataclass(frozen=True)
class FrozenEncoders:
    face: FaceEncoder
    text: TextEncoder
    image: ImageEncoder

    def weight_arrays(self) -> dict[str, Array]:
        out: dict[str, Array] = {}
        for enc in (self.face, self.text, self.image):
            out.update(enc.weight_arrays())
        return out

    def weight_hash(self) -> str:
        return hash_arrays(self.weight_arrays())


def _check_batch(values: Array, dim: int, name: str) -> Array:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != dim:
        raise ContractError(
            f"{name} batch must have shape (n, {dim}), got {values.shape}"
        )
    return values


def hash_arrays(arrays: dict[str, Array]) -> str:
    """Content hash of named arrays; order-insensitive, shape-sensitive."""
    digest = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        digest.update(name.encode())
        digest.update(str(arr.shape).encode())
        digest.update(arr.tobytes())
    return digest.hexdigest()


def build_encoders(world: WorldSpec) -> FrozenEncoders:
    """Construct all three frozen encoders from the world's seed and maps."""
    ss = np.random.SeedSequence([world.seed, 0x0E2C])
    rng_face, rng_text, rng_image = (np.random.default_rng(s) for s in ss.spawn(3))

    d_face = world.d_face
    w1 = rng_face.standard_normal((_FACE_HIDDEN, d_face)) / np.sqrt(d_face)
    w2 = rng_face.standard_normal((FACE_CLS_DIM, _FACE_HIDDEN)) / np.sqrt(_FACE_HIDDEN)
    patch_base = rng_face.standard_normal((FACE_PATCH_COUNT, PATCH_DIM))
    patch_mod = rng_face.standard_normal((PATCH_DIM, d_face)) / np.sqrt(d_face)
    face = FaceEncoder(w1=w1, w2=w2, patch_base=patch_base, patch_mod=patch_mod)

    d = PATCH_DIM
    d_attr = world.d_attr
    if d < d_attr:
        raise ContractError(
            f"patch width {d} cannot hold the {d_attr}-dim attribute code"
        )
    embedding = _BASE_EMBED_SCALE * rng_text.standard_normal((world.n_tokens, d))
    offset = 0
    for k, codes in enumerate(world.slot_codes):
        base = world.slot_token_base[k]
        width = codes.shape[1]
        for s in range(codes.shape[0]):
            embedding[base + s, offset : offset + width] += codes[s]
        offset += width
    wq, wk, wv = (
        rng_text.standard_normal((d, d)) / np.sqrt(d) for _ in range(3)
    )
    wo = _MIX_SCALE * rng_text.standard_normal((d, d)) / np.sqrt(d)
    cls_proj = np.zeros((TEXT_CLS_DIM, d))
    cls_proj[:d_attr, :d_attr] = world.semantic_map
    cls_bias = np.zeros(TEXT_CLS_DIM)
    cls_bias[d_attr:] = _BIAS_SCALE * rng_text.standard_normal(TEXT_CLS_DIM - d_attr)
    text = TextEncoder(
        embedding=embedding,
        wq=wq,
        wk=wk,
        wv=wv,
        wo=wo,
        cls_proj=cls_proj,
        cls_bias=cls_bias,
    )

    attr_reader = world.semantic_map @ world.render_attr.T
    image_bias = np.zeros(TEXT_CLS_DIM)
    image_bias[d_attr:] = _BIAS_SCALE * rng_image.standard_normal(
        TEXT_CLS_DIM - d_attr
    )
    image = ImageEncoder(attr_reader=attr_reader, bias=image_bias)

    return FrozenEncoders(face=face, text=text, image=image)
