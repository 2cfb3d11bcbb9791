"""Quantitative checks of what the trained encoder and sampler learned.

Three experiment families: zero-shot attribute classification from class
captions encoded with a null reference, identity cluster structure of the
pooled embeddings, and generation metrics (identity similarity, caption
alignment, and a kernel two-sample distance against real renders). The
ablation runner trains one encoder per loss mask on identical data and
seeds and reports the generation metrics side by side.

Evaluation may read ground-truth world matrices (unlike training): the
identity view of a generated image is extracted with the known render and
face maps before it is compared to the reference through the frozen face
encoder.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from sklearn.metrics import silhouette_score

from .autodiff import Tensor
from .diffusion import Denoiser, NoiseSchedule, cosine_schedule, ddpm_sample
from .encoders import FrozenEncoders, build_encoders
from .errors import ConfigError, ContractError
from .fusion import FaceClipEncoder
from .losses import MASK_NAMES
from .training import (
    DiffusionTrainConfig,
    PretrainConfig,
    pretrain,
    train_diffusion,
)
from .world import Dataset, WorldSpec, caption_of, render_image, render_reference

Array = np.ndarray

_GENERATION_STREAM = 0x5A


def _unit_rows(x: Array, what: str) -> Array:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ContractError(f"{what} contains a zero vector; cosine undefined")
    return x / norms


def _row_cosine(a: Array, b: Array, what_a: str, what_b: str) -> Array:
    if a.shape[0] != b.shape[0]:
        raise ContractError(f"batch mismatch: {a.shape[0]} vs {b.shape[0]}")
    return np.sum(_unit_rows(a, what_a) * _unit_rows(b, what_b), axis=1)


def _zero_shot_ranked(
    encoder: FaceClipEncoder,
    world: WorldSpec,
    n_eval: int,
    seed: int,
    class_slot: int,
) -> tuple[Array, Array]:
    """Per-query class ranking and true labels for one attribute slot."""
    n_classes = world.vocab_sizes[class_slot]
    if n_classes < 5:
        raise ConfigError(f"top-5 needs >= 5 classes, slot has {n_classes}")
    base = [0] * world.n_slots

    def slots_for(c: int) -> tuple[int, ...]:
        slots = list(base)
        slots[class_slot] = c
        return tuple(slots)

    captions = np.vstack([caption_of(world, slots_for(c)) for c in range(n_classes)])
    e, mask = encoder.encode(captions, np.zeros((n_classes, world.d_face)))
    anchors = _unit_rows(encoder.project_to_text(e, mask).data, "class anchors")

    rng = np.random.default_rng(seed)
    labels = rng.integers(0, n_classes, size=n_eval)
    ids = rng.integers(0, world.n_identities, size=n_eval)
    images = np.vstack(
        [render_image(world, i, slots_for(c), rng) for i, c in zip(ids, labels)]
    )
    queries = _unit_rows(encoder.frozen.image.encode(images), "image embeddings")
    ranked = np.argsort(-(queries @ anchors.T), axis=1, kind="stable")
    return ranked, labels


def zero_shot_accuracy(
    encoder: FaceClipEncoder,
    world: WorldSpec,
    n_eval: int,
    seed: int = 0,
    class_slot: int = 0,
) -> tuple[float, float]:
    """Top-1/top-5 over every value of one attribute slot.

    Class anchors are the normalized text projections of per-class captions
    encoded with the zero reference; queries are frozen image-encoder
    embeddings of freshly rendered images.
    """
    metrics, _ = zero_shot_report(encoder, world, n_eval, seed, class_slot)
    return metrics["zero_shot_top1"], metrics["zero_shot_top5"]


def zero_shot_report(
    encoder: FaceClipEncoder,
    world: WorldSpec,
    n_eval: int,
    seed: int = 0,
    class_slot: int = 0,
) -> tuple[dict[str, float], dict[str, float]]:
    """Zero-shot metrics plus the per-class top-1 breakdown."""
    ranked, labels = _zero_shot_ranked(encoder, world, n_eval, seed, class_slot)
    top1_hits = ranked[:, 0] == labels
    metrics = {
        "zero_shot_top1": float(np.mean(top1_hits)),
        "zero_shot_top5": float(
            np.mean(np.any(ranked[:, :5] == labels[:, None], axis=1))
        ),
    }
    per_class = {
        str(c): float(np.mean(top1_hits[labels == c]))
        for c in range(world.vocab_sizes[class_slot])
        if np.any(labels == c)
    }
    return metrics, per_class


def identity_cluster_metrics(
    encoder: FaceClipEncoder,
    world: WorldSpec,
    n_ids: int,
    n_per_id: int,
    seed: int = 0,
) -> tuple[float, float]:
    """Silhouette (cosine) and leave-one-out 1-NN recall over identities.

    Embeddings are the pooled encoder outputs for fresh reference draws
    under one fixed caption. An encoder whose output ignores the reference
    maps every draw to the same point; that degenerate zero-distance case
    scores silhouette 0 (no separation) by convention.
    """
    metrics, _, _, _ = cluster_report(encoder, world, n_ids, n_per_id, seed)
    return metrics["silhouette"], metrics["knn_recall_at_1"]


def cluster_report(
    encoder: FaceClipEncoder,
    world: WorldSpec,
    n_ids: int,
    n_per_id: int,
    seed: int = 0,
) -> tuple[dict[str, float], dict[str, float], Array, Array]:
    """Cluster metrics, per-identity recall, and the raw embeddings.

    The embeddings and integer labels come back so callers can project
    them for plotting without re-drawing the references.
    """
    silhouette, recall, per_identity, embeddings, labels = (
        _identity_cluster_details(encoder, world, n_ids, n_per_id, seed)
    )
    metrics = {"silhouette": silhouette, "knn_recall_at_1": recall}
    return metrics, per_identity, embeddings, labels


def _identity_cluster_details(
    encoder: FaceClipEncoder,
    world: WorldSpec,
    n_ids: int,
    n_per_id: int,
    seed: int = 0,
) -> tuple[float, float, dict[str, float], Array, Array]:
    if n_ids < 2:
        raise ConfigError(f"need >= 2 identities, got {n_ids}")
    if n_ids > world.n_identities:
        raise ConfigError(f"world has {world.n_identities} identities, asked {n_ids}")
    if n_per_id < 2:
        raise ConfigError(f"silhouette needs >= 2 samples per identity, got {n_per_id}")

    rng = np.random.default_rng(seed)
    caption = caption_of(world, (0,) * world.n_slots)
    captions = np.tile(caption, (n_ids * n_per_id, 1))
    references = np.vstack(
        [render_reference(world, i, rng) for i in range(n_ids) for _ in range(n_per_id)]
    )
    labels = np.repeat(np.arange(n_ids), n_per_id)
    embeddings = encoder.pooled_embedding(captions, references)

    if np.all(embeddings == embeddings[0]):
        silhouette = 0.0
    else:
        silhouette = float(silhouette_score(embeddings, labels, metric="cosine"))

    unit = _unit_rows(embeddings, "pooled embeddings")
    similarity = unit @ unit.T
    np.fill_diagonal(similarity, -2.0)
    hits = labels[np.argmax(similarity, axis=1)] == labels
    recall = float(np.mean(hits))
    per_identity = {
        str(i): float(np.mean(hits[labels == i])) for i in range(n_ids)
    }
    return silhouette, recall, per_identity, embeddings, labels


def plane_projection(embeddings: Array) -> Array:
    """Two leading principal-component coordinates, for external plotting."""
    centered = embeddings - embeddings.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    axes = vt[:2]
    # Fix the sign convention so repeated runs emit identical coordinates.
    for axis in axes:
        if axis[np.argmax(np.abs(axis))] < 0:
            axis *= -1.0
    return centered @ axes.T


def face_similarity(
    world: WorldSpec,
    generated: Array,
    reference: Array,
    frozen: FrozenEncoders | None = None,
) -> Array:
    """Identity cosine between a generated image and its reference.

    The image's identity view is the render-map projection pushed through
    the face map, compared to the reference in frozen face-encoder space.
    """
    frozen = frozen if frozen is not None else build_encoders(world)
    generated = np.atleast_2d(np.asarray(generated, dtype=np.float64))
    reference = np.atleast_2d(np.asarray(reference, dtype=np.float64))
    if generated.shape[1] != world.d_x or reference.shape[1] != world.d_face:
        raise ContractError(
            f"expected widths {world.d_x}/{world.d_face}, "
            f"got {generated.shape[1]}/{reference.shape[1]}"
        )
    face_view = generated @ world.render_id @ world.face_map.T
    gen_cls, _ = frozen.face.encode(face_view)
    ref_cls, _ = frozen.face.encode(reference)
    return _row_cosine(gen_cls, ref_cls, "generated identity view", "reference")


def text_alignment_score(
    world: WorldSpec,
    generated: Array,
    captions: Array,
    frozen: FrozenEncoders | None = None,
) -> Array:
    """Cosine between image and caption embeddings under the frozen stubs."""
    frozen = frozen if frozen is not None else build_encoders(world)
    generated = np.atleast_2d(np.asarray(generated, dtype=np.float64))
    captions = np.atleast_2d(np.asarray(captions))
    image_cls = frozen.image.encode(generated)
    text_cls, _ = frozen.text.encode(captions)
    return _row_cosine(image_cls, text_cls, "image embeddings", "caption embeddings")


def mmd_score(
    world: WorldSpec,
    set_a: Array,
    set_b: Array,
    frozen: FrozenEncoders | None = None,
) -> float:
    """Unbiased squared maximum mean discrepancy on frozen image features.

    Gaussian kernel with the median-pairwise-distance bandwidth over the
    pooled feature set. The unbiased estimator may dip slightly below zero
    for matching distributions.
    """
    frozen = frozen if frozen is not None else build_encoders(world)
    set_a = np.asarray(set_a, dtype=np.float64)
    set_b = np.asarray(set_b, dtype=np.float64)
    if set_a.shape[0] < 10 or set_b.shape[0] < 10:
        raise ContractError(
            f"need >= 10 samples per set, got {set_a.shape[0]}/{set_b.shape[0]}"
        )
    fa = frozen.image.encode(set_a)
    fb = frozen.image.encode(set_b)
    pooled = np.vstack([fa, fb])
    sq = np.sum(pooled**2, axis=1)
    sq_dists = sq[:, None] + sq[None, :] - 2.0 * pooled @ pooled.T
    np.maximum(sq_dists, 0.0, out=sq_dists)
    off_diag = sq_dists[~np.eye(len(pooled), dtype=bool)]
    bandwidth = float(np.median(np.sqrt(off_diag)))
    if bandwidth == 0.0:
        raise ContractError("all features identical; kernel bandwidth undefined")
    gamma = 1.0 / (2.0 * bandwidth**2)

    m, n = fa.shape[0], fb.shape[0]
    k = np.exp(-gamma * sq_dists)
    k_aa = k[:m, :m]
    k_bb = k[m:, m:]
    k_ab = k[:m, m:]
    term_a = (k_aa.sum() - np.trace(k_aa)) / (m * (m - 1))
    term_b = (k_bb.sum() - np.trace(k_bb)) / (n * (n - 1))
    return float(term_a + term_b - 2.0 * k_ab.mean())


def random_pair_face_baseline(
    world: WorldSpec,
    frozen: FrozenEncoders | None = None,
    n_pairs: int = 1000,
    seed: int = 0,
) -> float:
    """Mean identity similarity between images and references of distinct
    identities; the floor that identity-free generation should sit at."""
    frozen = frozen if frozen is not None else build_encoders(world)
    rng = np.random.default_rng(seed)
    ids_a = rng.integers(0, world.n_identities, size=n_pairs)
    shift = rng.integers(1, world.n_identities, size=n_pairs)
    ids_b = (ids_a + shift) % world.n_identities
    images = np.vstack(
        [render_image(world, i, (0,) * world.n_slots, rng) for i in ids_a]
    )
    references = np.vstack([render_reference(world, i, rng) for i in ids_b])
    return float(np.mean(face_similarity(world, images, references, frozen)))


def generate_images(
    denoiser: Denoiser,
    encoder: FaceClipEncoder,
    schedule: NoiseSchedule,
    captions: Array,
    references: Array,
    seed: int = 0,
    clip_x0: float | None = 2.0,
) -> Array:
    """Sample one image per (caption, reference) conditioning pair."""
    e, mask = encoder.encode(captions, references)
    condition = Tensor(e.data)
    named = denoiser.named_parameters()
    flags = [p.requires_grad for _, p in named]
    for _, p in named:
        p.requires_grad = False
    try:
        rng = np.random.default_rng(np.random.SeedSequence([seed, _GENERATION_STREAM]))
        return ddpm_sample(denoiser, condition, mask, schedule, rng, clip_x0=clip_x0)
    finally:
        for flag, (_, p) in zip(flags, named):
            p.requires_grad = flag


def bootstrap_mean_diff_ci(
    a: Array,
    b: Array,
    n_boot: int = 2000,
    seed: int = 0,
    level: float = 0.95,
) -> tuple[float, float]:
    """Percentile bootstrap interval for mean(a - b) over paired samples."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError(f"paired vectors required, got {a.shape} and {b.shape}")
    diff = a - b
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, diff.size, size=(n_boot, diff.size))
    means = diff[idx].mean(axis=1)
    tail = (1.0 - level) / 2.0
    return (
        float(np.quantile(means, tail)),
        float(np.quantile(means, 1.0 - tail)),
    )


@dataclass(frozen=True)
class AblationRow:
    """Generation metrics for one pre-training loss mask."""

    variant: str
    face_sim: float
    text_align: float
    mmd: float


def run_ablation(
    world: WorldSpec,
    frozen: FrozenEncoders,
    main: Dataset,
    guided: Dataset,
    pretrain_cfg: PretrainConfig,
    diffusion_cfg: DiffusionTrainConfig,
    n_gen: int = 256,
    eval_seed: int = 0,
    variants: Sequence[str] = ("L1", "L2", "L3"),
    clip_x0: float | None = 2.0,
) -> tuple[list[AblationRow], dict]:
    """Train and evaluate one pipeline per loss mask on shared data/seeds.

    Returns the table rows plus per-sample metric arrays and the
    random-pair baseline, for interval estimates downstream.
    """
    if not variants:
        raise ConfigError("no ablation variants requested")
    for name in variants:
        if name.upper() not in MASK_NAMES:
            raise ConfigError(f"unknown variant {name!r}")

    configs = {}
    for name in variants:
        image, ident, text = MASK_NAMES[name.upper()]
        configs[name] = replace(
            pretrain_cfg,
            loss=replace(
                pretrain_cfg.loss,
                use_image_term=image,
                use_id_term=ident,
                use_text_term=text,
            ),
        )
    # Everything except the mask must be shared, or the comparison is void.
    stripped = {
        name: {
            **{k: v for k, v in cfg.loss.__dict__.items() if not k.startswith("use_")},
            **{k: v for k, v in cfg.__dict__.items() if k != "loss"},
        }
        for name, cfg in configs.items()
    }
    if len({tuple(sorted(s.items())) for s in stripped.values()}) != 1:
        raise ContractError("ablation variants differ beyond the loss mask")

    rng = np.random.default_rng(eval_seed)
    pool_ids = rng.integers(0, world.n_identities, size=n_gen)
    seen = world.seen_vocab_sizes
    pool_slots = np.column_stack(
        [rng.integers(0, seen[k], size=n_gen) for k in range(world.n_slots)]
    )
    pool_captions = np.vstack(
        [caption_of(world, tuple(s)) for s in pool_slots]
    )
    pool_refs = np.vstack([render_reference(world, i, rng) for i in pool_ids])
    real_images = np.vstack(
        [
            render_image(world, i, tuple(s), rng)
            for i, s in zip(pool_ids, pool_slots)
        ]
    )

    schedule = cosine_schedule(
        diffusion_cfg.timesteps, diffusion_cfg.schedule_s, diffusion_cfg.max_beta
    )
    rows: list[AblationRow] = []
    details: dict = {
        "baseline": random_pair_face_baseline(world, frozen, seed=eval_seed),
        "face_sim_samples": {},
        "text_align_samples": {},
    }
    for name in variants:
        encoder, _ = pretrain(world, frozen, main, guided, configs[name])
        denoiser, _, _ = train_diffusion(
            world, frozen, main, diffusion_cfg, encoder=encoder
        )
        generated = generate_images(
            denoiser,
            encoder,
            schedule,
            pool_captions,
            pool_refs,
            seed=eval_seed,
            clip_x0=clip_x0,
        )
        fs = face_similarity(world, generated, pool_refs, frozen)
        ts = text_alignment_score(world, generated, pool_captions, frozen)
        mmd = mmd_score(world, generated, real_images, frozen)
        rows.append(
            AblationRow(
                variant=name.upper(),
                face_sim=float(fs.mean()),
                text_align=float(ts.mean()),
                mmd=mmd,
            )
        )
        details["face_sim_samples"][name.upper()] = fs
        details["text_align_samples"][name.upper()] = ts
    return rows, details


@dataclass(frozen=True)
class EvalReport:
    """One evaluation pass over a trained encoder, ready to serialize."""

    metrics: dict[str, float]
    per_class_top1: dict[str, float]
    per_identity_recall: dict[str, float]
    config: dict = field(default_factory=dict)
    seed: int = 0

    def to_json(self) -> str:
        for name, value in self.metrics.items():
            if not math.isfinite(value):
                raise ContractError(f"metric {name!r} is not finite: {value}")
        payload = {
            "metrics": self.metrics,
            "per_class_top1": self.per_class_top1,
            "per_identity_recall": self.per_identity_recall,
            "config": self.config,
            "seed": self.seed,
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def build_eval_report(
    encoder: FaceClipEncoder,
    world: WorldSpec,
    n_eval: int = 2000,
    n_ids: int = 20,
    n_per_id: int = 25,
    seed: int = 0,
    class_slot: int = 0,
    config: dict | None = None,
) -> EvalReport:
    """Zero-shot and cluster metrics with per-class/per-identity detail."""
    zs_metrics, per_class = zero_shot_report(encoder, world, n_eval, seed, class_slot)
    cl_metrics, per_identity, _, _ = cluster_report(
        encoder, world, n_ids, n_per_id, seed
    )
    return EvalReport(
        metrics={**zs_metrics, **cl_metrics},
        per_class_top1=per_class,
        per_identity_recall=per_identity,
        config=dict(config or {}),
        seed=seed,
    )


def ablation_table_text(rows: Sequence[AblationRow], baseline: float) -> str:
    """Aligned-column rendering of the ablation table."""
    header = f"{'variant':<8} {'face_sim':>9} {'text_align':>11} {'mmd':>10}"
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(
            f"{row.variant:<8} {row.face_sim:>9.4f} "
            f"{row.text_align:>11.4f} {row.mmd:>10.6f}"
        )
    lines.append(f"random-pair face_sim baseline: {baseline:.4f}")
    return "\n".join(lines)
