"""Synthetic generative world: identities, categorical attributes, and the
linear render process that turns them into image, reference, and caption.

A world is fully determined by its seed. Images are rendered as
``x0 = W_id @ id + W_attr @ attr + noise`` where the columns of W_id and
W_attr are jointly orthonormal, so both factors can be read back out of a
clean image exactly; that exactness is what the evaluation oracles and the
frozen encoder stubs rely on.

Captions are fixed templates naming each attribute value. The main dataset
draws the first slot only from a "seen" prefix of its vocabulary; the
guided dataset cycles the full attribute grid with a zeroed reference, so
its caption coverage strictly contains the main set's.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError

Array = np.ndarray

PAD_TOKEN = 0
NO_IDENTITY = 0xFFFF  # id_index sentinel for guided records


@dataclass(frozen=True)
class WorldSpec:
    """All fixed randomness of one synthetic world."""

    seed: int
    d_x: int
    d_id: int
    d_face: int
    caption_len: int
    vocab_sizes: tuple[int, ...]
    seen_vocab_sizes: tuple[int, ...]
    code_dims: tuple[int, ...]
    sigma_x: float
    sigma_r: float
    identity_latents: Array  # (n_identities, d_id), unit rows
    slot_codes: tuple[Array, ...]  # per slot: (vocab, code_dim)
    render_id: Array  # (d_x, d_id)
    render_attr: Array  # (d_x, d_attr)
    face_map: Array  # (d_face, d_id)
    semantic_map: Array  # (d_attr, d_attr), orthogonal

    @property
    def n_identities(self) -> int:
        return self.identity_latents.shape[0]

    @property
    def n_slots(self) -> int:
        return len(self.vocab_sizes)

    @property
    def d_attr(self) -> int:
        return self.render_attr.shape[1]

    @property
    def glue_tokens(self) -> tuple[int, ...]:
        return tuple(range(1, 1 + self.n_slots))

    @property
    def slot_token_base(self) -> tuple[int, ...]:
        bases = []
        base = 1 + self.n_slots
        for v in self.vocab_sizes:
            bases.append(base)
            base += v
        return tuple(bases)

    @property
    def n_tokens(self) -> int:
        return 1 + self.n_slots + sum(self.vocab_sizes)


@dataclass(frozen=True)
class Dataset:
    """In-memory sample table; a bitwise-stable image of one DatasetFile.

    The factor columns (``id_index``, ``slots``) are ground truth for
    evaluation only; training reads samples through ``training_views``,
    which does not expose them.
    """

    x0: Array  # (n, d_x) float64
    reference: Array  # (n, d_face) float64
    captions: Array  # (n, L) uint16
    id_index: Array  # (n,) uint16, NO_IDENTITY on guided records
    slots: Array  # (n, K) uint16
    guided: bool
    world_seed: int
    sample_seed: int

    def __len__(self) -> int:
        return self.x0.shape[0]

    def training_views(self) -> tuple[Array, Array, Array]:
        return self.x0, self.captions, self.reference

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.guided == other.guided
            and self.world_seed == other.world_seed
            and self.sample_seed == other.sample_seed
            and all(
                np.array_equal(getattr(self, name), getattr(other, name))
                for name in ("x0", "reference", "captions", "id_index", "slots")
            )
        )


def make_world(
    seed: int,
    n_identities: int = 20,
    vocab_sizes: Sequence[int] = (16, 4, 4),
    seen_vocab_sizes: Sequence[int] = (8, 4, 4),
    code_dims: Sequence[int] = (16, 4, 4),
    d_x: int = 64,
    d_id: int = 16,
    d_face: int = 32,
    caption_len: int = 8,
    sigma_x: float = 0.05,
    sigma_r: float = 0.05,
    min_angle_deg: float = 10.0,
) -> WorldSpec:
    """Build a deterministic world from a seed.

    Identity latents are rejection-sampled unit vectors with all pairwise
    angles above ``min_angle_deg``. Render matrices come from one QR
    factorization, so identity and attribute columns are exactly
    orthonormal as a set.
    """
    if n_identities < 2:
        raise ConfigError(f"need at least 2 identities, got {n_identities}")
    if len(vocab_sizes) != len(code_dims) or len(vocab_sizes) != len(seen_vocab_sizes):
        raise ConfigError("vocab_sizes, seen_vocab_sizes, code_dims must align")
    for v, s in zip(vocab_sizes, seen_vocab_sizes):
        if v < 1 or s < 1 or s > v:
            raise ConfigError(f"invalid slot vocabulary sizes: {v} seen {s}")
    if any(c < 1 for c in code_dims):
        raise ConfigError(f"code dimensions must be positive: {tuple(code_dims)}")
    d_attr = sum(code_dims)
    if d_x < d_id + d_attr:
        raise ConfigError(
            f"image dimension {d_x} cannot hold {d_id} identity plus "
            f"{d_attr} attribute directions"
        )
    if d_face < d_id:
        raise ConfigError(f"face dimension {d_face} below identity dimension {d_id}")
    if caption_len < 2 * len(vocab_sizes):
        raise ConfigError(
            f"caption length {caption_len} too short for {len(vocab_sizes)} slots"
        )
    if not 0.0 <= sigma_x or not 0.0 <= sigma_r:
        raise ConfigError("noise scales must be nonnegative")

    ss = np.random.SeedSequence(seed)
    rng_ids, rng_render, rng_codes, rng_face, rng_sem = (
        np.random.default_rng(s) for s in ss.spawn(5)
    )

    latents = _sample_separated_units(rng_ids, n_identities, d_id, min_angle_deg)

    basis = _orthonormal_columns(rng_render, d_x, d_id + d_attr)
    render_id = basis[:, :d_id].copy()
    render_attr = basis[:, d_id:].copy()

    codes = []
    for v, c in zip(vocab_sizes, code_dims):
        if v <= c:
            # Orthonormal codes: distinct values are maximally separated.
            q = _orthonormal_columns(rng_codes, c, v)
            codes.append(q.T.copy())
        else:
            raw = rng_codes.standard_normal((v, c))
            codes.append(raw / np.linalg.norm(raw, axis=1, keepdims=True))

    # Unnormalized Gaussian face map: ||face_map @ u|| concentrates near
    # sqrt(d_face), which keeps same-identity reference views tightly
    # aligned (cosine ~ 1) under the default noise scale.
    face_map = rng_face.standard_normal((d_face, d_id))
    semantic_map = _orthonormal_columns(rng_sem, d_attr, d_attr)

    return WorldSpec(
        seed=int(seed),
        d_x=d_x,
        d_id=d_id,
        d_face=d_face,
        caption_len=caption_len,
        vocab_sizes=tuple(int(v) for v in vocab_sizes),
        seen_vocab_sizes=tuple(int(v) for v in seen_vocab_sizes),
        code_dims=tuple(int(c) for c in code_dims),
        sigma_x=float(sigma_x),
        sigma_r=float(sigma_r),
        identity_latents=latents,
        slot_codes=tuple(codes),
        render_id=render_id,
        render_attr=render_attr,
        face_map=face_map,
        semantic_map=semantic_map,
    )


def _orthonormal_columns(rng: np.random.Generator, rows: int, cols: int) -> Array:
    if cols > rows:
        raise ConfigError(f"cannot draw {cols} orthonormal columns in R^{rows}")
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    # Fix the sign convention so the result is unique given the draw.
    return q * np.sign(np.diagonal(r))


def _sample_separated_units(
    rng: np.random.Generator, count: int, dim: int, min_angle_deg: float
) -> Array:
    cos_cap = math.cos(math.radians(min_angle_deg))
    out = np.zeros((count, dim))
    for i in range(count):
        for _ in range(1000):
            v = rng.standard_normal(dim)
            v /= np.linalg.norm(v)
            if i == 0 or np.max(np.abs(out[:i] @ v)) < cos_cap:
                out[i] = v
                break
        else:
            raise ConfigError(
                f"could not place {count} identities {min_angle_deg} deg apart in R^{dim}"
            )
    return out


def attr_embedding(world: WorldSpec, slots: Sequence[int]) -> Array:
    """Concatenated per-slot code vectors for one attribute combination."""
    _check_slots(world, slots)
    return np.concatenate(
        [world.slot_codes[k][s] for k, s in enumerate(slots)]
    )


def _check_slots(world: WorldSpec, slots: Sequence[int]) -> None:
    if len(slots) != world.n_slots:
        raise ContractError(f"expected {world.n_slots} slots, got {len(slots)}")
    for k, s in enumerate(slots):
        if not 0 <= s < world.vocab_sizes[k]:
            raise ContractError(f"slot {k} value {s} outside vocabulary")


def render_image(
    world: WorldSpec,
    id_index: int,
    slots: Sequence[int],
    rng: np.random.Generator | None = None,
) -> Array:
    """One image vector; rendering noise comes from ``rng`` when sigma_x > 0."""
    if not 0 <= id_index < world.n_identities:
        raise ContractError(f"identity index {id_index} outside world")
    x0 = world.render_id @ world.identity_latents[id_index]
    x0 = x0 + world.render_attr @ attr_embedding(world, slots)
    if world.sigma_x > 0.0:
        if rng is None:
            raise ContractError("rendering noise requires an rng")
        x0 = x0 + world.sigma_x * rng.standard_normal(world.d_x)
    return x0


def render_reference(
    world: WorldSpec, id_index: int, rng: np.random.Generator | None = None
) -> Array:
    """A noisy face view of one identity; carries no attribute information."""
    if not 0 <= id_index < world.n_identities:
        raise ContractError(f"identity index {id_index} outside world")
    ref = world.face_map @ world.identity_latents[id_index]
    if world.sigma_r > 0.0:
        if rng is None:
            raise ContractError("reference noise requires an rng")
        ref = ref + world.sigma_r * rng.standard_normal(world.d_face)
    return ref


def caption_of(world: WorldSpec, slots: Sequence[int]) -> Array:
    """Template caption: glue word then attribute word per slot, padded."""
    _check_slots(world, slots)
    tokens = np.full(world.caption_len, PAD_TOKEN, dtype=np.uint16)
    bases = world.slot_token_base
    glue = world.glue_tokens
    for k, s in enumerate(slots):
        tokens[2 * k] = glue[k]
        tokens[2 * k + 1] = bases[k] + s
    return tokens


def full_attr_grid(world: WorldSpec) -> Array:
    """Every attribute combination, lexicographic, shape (grid, K)."""
    grids = np.meshgrid(
        *[np.arange(v, dtype=np.uint16) for v in world.vocab_sizes], indexing="ij"
    )
    return np.stack([g.reshape(-1) for g in grids], axis=1)


def generate_main_dataset(world: WorldSpec, n_samples: int, seed: int) -> Dataset:
    """Uniform draws of identity and seen-prefix attributes, with noise."""
    if n_samples < 1:
        raise ContractError(f"need at least one sample, got {n_samples}")
    rng = np.random.default_rng(np.random.SeedSequence([world.seed, seed, 0]))
    ids = rng.integers(0, world.n_identities, size=n_samples)
    slots = np.stack(
        [rng.integers(0, v, size=n_samples) for v in world.seen_vocab_sizes],
        axis=1,
    )
    return _assemble(world, ids, slots, rng, guided=False, sample_seed=seed)


def generate_guided_dataset(world: WorldSpec, n_samples: int, seed: int) -> Dataset:
    """Image-text pairs over the full attribute grid with zeroed references.

    Combinations cycle through a shuffled enumeration of the whole grid, so
    any guided set at least as large as the grid covers every combination,
    including all pairs the main set can never produce.
    """
    if n_samples < 1:
        raise ContractError(f"need at least one sample, got {n_samples}")
    rng = np.random.default_rng(np.random.SeedSequence([world.seed, seed, 1]))
    grid = full_attr_grid(world)
    order = rng.permutation(grid.shape[0])
    slots = grid[order[np.arange(n_samples) % grid.shape[0]]]
    ids = rng.integers(0, world.n_identities, size=n_samples)
    return _assemble(world, ids, slots, rng, guided=True, sample_seed=seed)


def _assemble(
    world: WorldSpec,
    ids: Array,
    slots: Array,
    rng: np.random.Generator,
    guided: bool,
    sample_seed: int,
) -> Dataset:
    n = ids.shape[0]
    attrs = np.stack([attr_embedding(world, s) for s in slots])
    x0 = (
        world.identity_latents[ids] @ world.render_id.T + attrs @ world.render_attr.T
    )
    if world.sigma_x > 0.0:
        x0 = x0 + world.sigma_x * rng.standard_normal((n, world.d_x))
    if guided:
        reference = np.zeros((n, world.d_face))
        id_out = np.full(n, NO_IDENTITY, dtype=np.uint16)
    else:
        reference = world.identity_latents[ids] @ world.face_map.T
        if world.sigma_r > 0.0:
            reference = reference + world.sigma_r * rng.standard_normal(
                (n, world.d_face)
            )
        id_out = ids.astype(np.uint16)
    captions = np.stack([caption_of(world, s) for s in slots])
    return Dataset(
        x0=x0,
        reference=reference,
        captions=captions,
        id_index=id_out,
        slots=slots.astype(np.uint16),
        guided=guided,
        world_seed=world.seed,
        sample_seed=int(sample_seed),
    )


def caption_coverage(dataset: Dataset) -> set[tuple[int, ...]]:
    """Distinct attribute combinations present in a dataset."""
    return {tuple(int(v) for v in row) for row in dataset.slots}
