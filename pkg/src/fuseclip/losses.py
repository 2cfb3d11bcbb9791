"""Contrastive alignment objective for encoder pre-training.

The core is a symmetric InfoNCE over cosine similarities: both batches are
row-normalized, the scaled similarity matrix is treated as logits with the
diagonal as targets, and row-wise and column-wise cross-entropies are
averaged. The full alignment loss sums up to three such terms, matching
the joint embedding's text projection against image and caption targets
and its face projection against face class targets; rows encoded through
the null-face (guided) path carry no identity and are left out of the face
term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError

Array = np.ndarray

L1_MASK = (True, False, False)
L2_MASK = (True, True, False)
L3_MASK = (True, True, True)

MASK_NAMES = {"L1": L1_MASK, "L2": L2_MASK, "L3": L3_MASK}


@dataclass(frozen=True)
class AlignmentLossConfig:
    """Temperature, term selection, and guided-mixing probability."""

    tau: float = 0.07
    learnable_tau: bool = False
    use_image_term: bool = True
    use_id_term: bool = True
    use_text_term: bool = True
    guided_probability: float = 0.0

    def __post_init__(self):
        if self.tau <= 0.0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")
        if not 0.0 <= self.guided_probability <= 1.0:
            raise ConfigError(
                f"guided probability must lie in [0, 1], got {self.guided_probability}"
            )

    @property
    def term_mask(self) -> tuple[bool, bool, bool]:
        return (self.use_image_term, self.use_id_term, self.use_text_term)

    @classmethod
    def with_mask(cls, name: str, **kwargs) -> "AlignmentLossConfig":
        try:
            image, ident, text = MASK_NAMES[name.upper()]
        except KeyError:
            raise ConfigError(
                f"unknown loss mask {name!r}; expected one of {sorted(MASK_NAMES)}"
            ) from None
        return cls(
            use_image_term=image, use_id_term=ident, use_text_term=text, **kwargs
        )

    def mask_name(self) -> str:
        for name, mask in MASK_NAMES.items():
            if mask == self.term_mask:
                return name
        return "custom"


def _normalize_rows(x: Tensor, what: str) -> Tensor:
    norms = np.linalg.norm(x.data, axis=-1)
    if np.any(norms == 0.0):
        raise ContractError(f"{what} contains a zero row; cosine undefined")
    return ad.l2_normalize_rows(x)


def contrastive_loss(a: Tensor | Array, b: Tensor | Array, tau: float | Tensor) -> Tensor:
    """Symmetric InfoNCE between batch-aligned embedding sets.

    Rows are L2-normalized here, so callers pass raw embeddings. ``tau``
    may be a scalar tensor to make the temperature trainable.
    """
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape != b.shape:
        raise ContractError(
            f"expected matching (batch, dim) inputs, got {a.shape} and {b.shape}"
        )
    if a.shape[0] < 2:
        raise ContractError(f"contrastive batch needs >= 2 rows, got {a.shape[0]}")
    if isinstance(tau, Tensor):
        inv_tau = ad.power(tau, -1.0)
    else:
        if tau <= 0.0:
            raise ContractError(f"temperature must be positive, got {tau}")
        inv_tau = Tensor(1.0 / tau)
    logits = ad.matmul(
        _normalize_rows(a, "first batch"),
        ad.swap_last(_normalize_rows(b, "second batch")),
    ) * inv_tau
    row_ce = ad.tmean(ad.logsumexp(logits, axis=1) - ad.diagonal(logits))
    col_ce = ad.tmean(ad.logsumexp(ad.swap_last(logits), axis=1) - ad.diagonal(logits))
    return (row_ce + col_ce) * 0.5


def alignment_loss(
    cfg: AlignmentLossConfig,
    e_to_text: Tensor,
    e_to_face: Tensor,
    image_cls: Array,
    face_cls: Array,
    text_cls: Array,
    guided_rows: Array | None = None,
    tau: Tensor | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Masked sum of the three contrastive terms plus a breakdown.

    ``guided_rows`` marks rows whose reference was zeroed; they still
    anchor the image and text terms but are dropped from the face term.
    With fewer than two non-guided rows the face term has nothing to
    contrast and contributes zero. ``tau`` overrides the configured
    temperature when it is a live (learnable) tensor.
    """
    b = e_to_text.shape[0]
    if guided_rows is None:
        guided_rows = np.zeros(b, dtype=bool)
    guided_rows = np.asarray(guided_rows, dtype=bool)
    if guided_rows.shape != (b,):
        raise ContractError(
            f"guided mask shape {guided_rows.shape} does not match batch {b}"
        )
    temperature: float | Tensor = tau if tau is not None else cfg.tau

    total: Tensor | None = None
    breakdown: dict[str, float] = {}

    def accumulate(name: str, term: Tensor | None):
        nonlocal total
        breakdown[name] = float(term.data) if term is not None else 0.0
        if term is not None:
            total = term if total is None else total + term

    if cfg.use_image_term:
        accumulate(
            "image", contrastive_loss(e_to_text, Tensor(image_cls), temperature)
        )
    if cfg.use_id_term:
        keep = np.nonzero(~guided_rows)[0]
        if keep.size >= 2:
            accumulate(
                "id",
                contrastive_loss(
                    ad.take_rows(e_to_face, keep),
                    Tensor(face_cls[keep]),
                    temperature,
                ),
            )
        else:
            accumulate("id", None)
    if cfg.use_text_term:
        accumulate(
            "text", contrastive_loss(e_to_text, Tensor(text_cls), temperature)
        )
    if total is None:
        raise ContractError("alignment loss with every term masked out")
    breakdown["total"] = float(total.data)
    return total, breakdown
