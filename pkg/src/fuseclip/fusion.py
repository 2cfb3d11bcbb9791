"""The trainable joint encoder: cascaded feature-fusion blocks with dual
cross-attention over the text and face patch streams, plus the projection
heads mapping the pooled joint embedding into the text and face target
spaces.

Every attention output projection, every feed-forward output layer, and
both head weight matrices start at zero. A freshly built encoder is
therefore an exact function of the caption alone: the reference stream
cannot influence the text stream through any zeroed gate, and training
starts from the guided (face-free) path.

All forward methods are batched: sequences are (batch, length, width)
tensors and masks are (batch, length) numpy arrays with 1 for real tokens.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import FrozenEncoders
from .errors import ConfigError, ContractError
from .world import PAD_TOKEN

Array = np.ndarray


class Module:
    """Minimal parameter container with stable, path-like names."""

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


class Attention(Module):
    """Multi-head scaled dot-product attention with a zero-initialized
    output projection; serves as self-attention when both streams match."""

    def __init__(self, name: str, width: int, n_heads: int, rng: np.random.Generator):
        if width % n_heads != 0:
            raise ConfigError(f"width {width} not divisible by {n_heads} heads")
        self.name = name
        self.width = width
        self.n_heads = n_heads
        scale = 1.0 / math.sqrt(width)
        self.wq = Tensor(scale * rng.standard_normal((width, width)), requires_grad=True)
        self.wk = Tensor(scale * rng.standard_normal((width, width)), requires_grad=True)
        self.wv = Tensor(scale * rng.standard_normal((width, width)), requires_grad=True)
        self.wo = Tensor(np.zeros((width, width)), requires_grad=True)

    def named_parameters(self):
        return [
            (f"{self.name}.wq", self.wq),
            (f"{self.name}.wk", self.wk),
            (f"{self.name}.wv", self.wv),
            (f"{self.name}.wo", self.wo),
        ]

    def _split(self, x: Tensor) -> Tensor:
        b, length, _ = x.shape
        head_dim = self.width // self.n_heads
        x = ad.reshape(x, (b, length, self.n_heads, head_dim))
        return ad.transpose(x, (0, 2, 1, 3))

    def _merge(self, x: Tensor) -> Tensor:
        b, _, length, _ = x.shape
        x = ad.transpose(x, (0, 2, 1, 3))
        return ad.reshape(x, (b, length, self.width))

    def __call__(
        self,
        queries: Tensor,
        keys_values: Tensor,
        key_mask: Array | None = None,
        query_mask: Array | None = None,
    ) -> Tensor:
        if queries.shape[-1] != self.width or keys_values.shape[-1] != self.width:
            raise ContractError(
                f"stream width mismatch: expected {self.width}, got "
                f"{queries.shape[-1]} and {keys_values.shape[-1]}"
            )
        q = self._split(queries @ self.wq)
        k = self._split(keys_values @ self.wk)
        v = self._split(keys_values @ self.wv)
        out = ad.scaled_dot_attention(
            q,
            k,
            v,
            key_mask=None if key_mask is None else key_mask[:, None, :],
            query_mask=None if query_mask is None else query_mask[:, None, :],
        )
        return self._merge(out) @ self.wo


class FeedForward(Module):
    """Two-layer GELU MLP; the output layer starts at zero."""

    def __init__(self, name: str, width: int, hidden: int, rng: np.random.Generator):
        self.name = name
        scale = 1.0 / math.sqrt(width)
        self.w1 = Tensor(scale * rng.standard_normal((width, hidden)), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = Tensor(np.zeros((hidden, width)), requires_grad=True)
        self.b2 = Tensor(np.zeros(width), requires_grad=True)

    def named_parameters(self):
        return [
            (f"{self.name}.w1", self.w1),
            (f"{self.name}.b1", self.b1),
            (f"{self.name}.w2", self.w2),
            (f"{self.name}.b2", self.b2),
        ]

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(ad.gelu(ad.linear(x, self.w1, self.b1)), self.w2, self.b2)


class LayerNorm(Module):
    def __init__(self, name: str, width: int):
        self.name = name
        self.gain = Tensor(np.ones(width), requires_grad=True)
        self.bias = Tensor(np.zeros(width), requires_grad=True)

    def named_parameters(self):
        return [(f"{self.name}.gain", self.gain), (f"{self.name}.bias", self.bias)]

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)


class DualCrossAttention(Module):
    """Both streams attend to each other; each direction has its own
    projections, residual connection, and layer norm.

    Parallel by default: both directions read the block's inputs. The
    sequential variant updates the face stream first and lets the text
    stream attend to the already-updated face values.
    """

    def __init__(
        self,
        name: str,
        width: int,
        n_heads: int,
        rng: np.random.Generator,
        sequential: bool = False,
    ):
        self.sequential = sequential
        self.text_from_face = Attention(f"{name}.t2r", width, n_heads, rng)
        self.face_from_text = Attention(f"{name}.r2t", width, n_heads, rng)
        self.ln_text = LayerNorm(f"{name}.ln_t", width)
        self.ln_face = LayerNorm(f"{name}.ln_r", width)

    def named_parameters(self):
        return (
            self.text_from_face.named_parameters()
            + self.face_from_text.named_parameters()
            + self.ln_text.named_parameters()
            + self.ln_face.named_parameters()
        )

    def __call__(
        self, text: Tensor, face: Tensor, text_mask: Array
    ) -> tuple[Tensor, Tensor]:
        if text.shape[-1] != face.shape[-1]:
            raise ContractError(
                f"stream widths differ: {text.shape[-1]} vs {face.shape[-1]}"
            )
        mixed_face = self.ln_face(
            face + self.face_from_text(face, text, key_mask=text_mask)
        )
        face_source = mixed_face if self.sequential else face
        mixed_text = self.ln_text(
            text + self.text_from_face(text, face_source, query_mask=text_mask)
        )
        return mixed_text, mixed_face


class FeatureFusionBlock(Module):
    """DCA, then per-stream self-attention and feed-forward sublayers, all
    with post-norm residuals; shape-preserving on both streams."""

    def __init__(
        self,
        name: str,
        width: int,
        n_heads: int,
        ff_hidden: int,
        rng: np.random.Generator,
        sequential_dca: bool = False,
    ):
        self.dca = DualCrossAttention(
            f"{name}.dca", width, n_heads, rng, sequential=sequential_dca
        )
        self.self_text = Attention(f"{name}.sa_t", width, n_heads, rng)
        self.self_face = Attention(f"{name}.sa_r", width, n_heads, rng)
        self.ln_sa_text = LayerNorm(f"{name}.ln_sa_t", width)
        self.ln_sa_face = LayerNorm(f"{name}.ln_sa_r", width)
        self.ff_text = FeedForward(f"{name}.ff_t", width, ff_hidden, rng)
        self.ff_face = FeedForward(f"{name}.ff_r", width, ff_hidden, rng)
        self.ln_ff_text = LayerNorm(f"{name}.ln_ff_t", width)
        self.ln_ff_face = LayerNorm(f"{name}.ln_ff_r", width)

    def named_parameters(self):
        out = []
        for sub in (
            self.dca,
            self.self_text,
            self.self_face,
            self.ln_sa_text,
            self.ln_sa_face,
            self.ff_text,
            self.ff_face,
            self.ln_ff_text,
            self.ln_ff_face,
        ):
            out.extend(sub.named_parameters())
        return out

    def __call__(
        self, text: Tensor, face: Tensor, text_mask: Array
    ) -> tuple[Tensor, Tensor]:
        text, face = self.dca(text, face, text_mask)
        text = self.ln_sa_text(
            text
            + self.self_text(text, text, key_mask=text_mask, query_mask=text_mask)
        )
        face = self.ln_sa_face(face + self.self_face(face, face))
        text = self.ln_ff_text(text + self.ff_text(text))
        face = self.ln_ff_face(face + self.ff_face(face))
        return text, face


class FusionModule(Module):
    def __init__(
        self,
        width: int,
        n_blocks: int,
        n_heads: int,
        ff_hidden: int,
        rng: np.random.Generator,
        sequential_dca: bool = False,
    ):
        if n_blocks < 1:
            raise ConfigError(f"need at least one fusion block, got {n_blocks}")
        self.width = width
        self.blocks = [
            FeatureFusionBlock(
                f"fusion.b{i}", width, n_heads, ff_hidden, rng, sequential_dca
            )
            for i in range(n_blocks)
        ]

    def named_parameters(self):
        out = []
        for block in self.blocks:
            out.extend(block.named_parameters())
        return out

    def __call__(
        self, text: Tensor, face: Tensor, text_mask: Array
    ) -> tuple[Tensor, Tensor]:
        for block in self.blocks:
            text, face = block(text, face, text_mask)
        return text, face


class ProjectionHeads(Module):
    """Mean-pool the non-pad positions of e, then apply the two linear
    heads. Head weights start at zero and biases at a fixed random draw, so
    step-0 projections are well-defined nonzero constants."""

    def __init__(self, width: int, d_t: int, d_r: int, rng: np.random.Generator):
        self.text_weight = Tensor(np.zeros((width, d_t)), requires_grad=True)
        self.text_bias = Tensor(
            rng.standard_normal(d_t) / math.sqrt(d_t), requires_grad=True
        )
        self.face_weight = Tensor(np.zeros((width, d_r)), requires_grad=True)
        self.face_bias = Tensor(
            rng.standard_normal(d_r) / math.sqrt(d_r), requires_grad=True
        )

    def named_parameters(self):
        return [
            ("heads.text.weight", self.text_weight),
            ("heads.text.bias", self.text_bias),
            ("heads.face.weight", self.face_weight),
            ("heads.face.bias", self.face_bias),
        ]

    @staticmethod
    def pool(e: Tensor, text_mask: Array) -> Tensor:
        counts = text_mask.sum(axis=1, keepdims=True)
        if np.any(counts == 0):
            raise ContractError("cannot pool a sequence with no content tokens")
        weighted = e * Tensor(text_mask[:, :, None])
        return ad.tsum(weighted, axis=1) * Tensor(1.0 / counts)

    def to_text(self, e: Tensor, text_mask: Array) -> Tensor:
        return ad.linear(self.pool(e, text_mask), self.text_weight, self.text_bias)

    def to_face(self, e: Tensor, text_mask: Array) -> Tensor:
        return ad.linear(self.pool(e, text_mask), self.face_weight, self.face_bias)


class FaceClipEncoder:
    """Frozen text/face encoders feeding the trainable fusion stack.

    ``encode`` returns the final text-stream sequence e; the projection
    heads map its pooled form into the text and face embedding spaces. Only
    fusion and head parameters are trainable.
    """

    def __init__(
        self,
        frozen: FrozenEncoders,
        fusion: FusionModule,
        heads: ProjectionHeads,
    ):
        self.frozen = frozen
        self.fusion = fusion
        self.heads = heads

    @classmethod
    def build(
        cls,
        frozen: FrozenEncoders,
        init_seed: int,
        n_blocks: int = 2,
        n_heads: int = 1,
        ff_hidden: int = 64,
        d_t: int | None = None,
        d_r: int | None = None,
        sequential_dca: bool = False,
    ) -> "FaceClipEncoder":
        width = frozen.text.d
        rng = np.random.default_rng(np.random.SeedSequence([init_seed, 0xF05]))
        fusion = FusionModule(
            width, n_blocks, n_heads, ff_hidden, rng, sequential_dca
        )
        heads = ProjectionHeads(
            width,
            d_t if d_t is not None else frozen.text.cls_bias.shape[0],
            d_r if d_r is not None else frozen.face.w2.shape[0],
            rng,
        )
        return cls(frozen, fusion, heads)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return self.fusion.named_parameters() + self.heads.named_parameters()

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def text_mask(self, tokens: Array) -> Array:
        return (np.asarray(tokens) != PAD_TOKEN).astype(np.float64)

    def encode(self, tokens: Array, references: Array) -> tuple[Tensor, Array]:
        """Joint embedding e of shape (batch, L, width) plus the text mask."""
        _, text_patches = self.frozen.text.encode(tokens)
        _, face_patches = self.frozen.face.encode(references)
        mask = self.text_mask(tokens)
        e, _ = self.fusion(Tensor(text_patches), Tensor(face_patches), mask)
        return e, mask

    def project_to_text(self, e: Tensor, text_mask: Array) -> Tensor:
        return self.heads.to_text(e, text_mask)

    def project_to_face(self, e: Tensor, text_mask: Array) -> Tensor:
        return self.heads.to_face(e, text_mask)

    def pooled_embedding(self, tokens: Array, references: Array) -> Array:
        """Convenience for evaluation: pooled e as a plain array."""
        e, mask = self.encode(tokens, references)
        return ProjectionHeads.pool(e, mask).data


def parameter_arrays(named: Sequence[tuple[str, Tensor]]) -> dict[str, Array]:
    return {name: tensor.data for name, tensor in named}
