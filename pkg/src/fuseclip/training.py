"""Training loops: contrastive encoder pre-training and conditional diffusion.

Pre-training optimizes the fusion stack and projection heads against the
alignment loss while every stub encoder stays frozen; guided samples are
mixed in per batch slot by independent Bernoulli draws. Diffusion training
fits the noise predictor on top of a (usually frozen) encoder; making the
encoder trainable alongside it reproduces the no-pretraining ablation.

Both loops stream one JSON metrics record per line and checkpoint on a
fixed cadence. All randomness flows through one generator per run whose
state is checkpointed, so a resumed run replays the exact remaining steps.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .diffusion import Denoiser, NoiseSchedule, cosine_schedule, diffusion_loss
from .encoders import FrozenEncoders, hash_arrays
from .errors import CompatibilityError, ConfigError, ContractError, NumericsError
from .fusion import FaceClipEncoder, parameter_arrays
from .losses import AlignmentLossConfig, alignment_loss
from .optim import AdamW, clip_global_norm
from .world import Dataset, WorldSpec

Array = np.ndarray

CHECKPOINT_NAME = "checkpoint.bin"
METRICS_NAME = "metrics.jsonl"
TIMING_NAME = "timing.jsonl"
DIAGNOSTIC_NAME = "diagnostic.json"

_PRETRAIN_STREAM = 0x7261
_DENOISER_INIT_STREAM = 0xD0
_DIFFUSION_STREAM = 0xD1F

UNTRAINED = "untrained"


@dataclass(frozen=True)
class PretrainConfig:
    """Alignment-stage settings; the loss config carries mask and lambda."""

    loss: AlignmentLossConfig = AlignmentLossConfig()
    batch_size: int = 64
    steps: int = 2000
    learning_rate: float = 3e-3
    seed: int = 0
    n_blocks: int = 2
    n_heads: int = 1
    ff_hidden: int = 64
    sequential_dca: bool = False
    grad_clip: float = 1.0
    checkpoint_every: int = 500
    metrics_every: int = 1

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError(f"batch size must be >= 2, got {self.batch_size}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.learning_rate <= 0.0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if self.checkpoint_every < 1 or self.metrics_every < 1:
            raise ConfigError("cadences must be >= 1")


@dataclass(frozen=True)
class DiffusionTrainConfig:
    """Diffusion-stage settings, including which encoder conditions it."""

    encoder_checkpoint: str = UNTRAINED
    encoder_trainable: bool = False
    force_encoder_trainable: bool = False
    guided_probability: float = 0.0
    timesteps: int = 100
    schedule_s: float = 0.008
    max_beta: float = 0.999
    hidden: int = 128
    batch_size: int = 64
    steps: int = 2000
    learning_rate: float = 1e-3
    seed: int = 0
    n_blocks: int = 2
    n_heads: int = 1
    ff_hidden: int = 64
    sequential_dca: bool = False
    grad_clip: float = 1.0
    checkpoint_every: int = 500
    metrics_every: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.learning_rate <= 0.0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if self.checkpoint_every < 1 or self.metrics_every < 1:
            raise ConfigError("cadences must be >= 1")
        if not 0.0 <= self.guided_probability <= 1.0:
            raise ConfigError(
                f"guided probability must lie in [0, 1], got {self.guided_probability}"
            )
        if (
            self.encoder_trainable
            and self.encoder_checkpoint != UNTRAINED
            and not self.force_encoder_trainable
        ):
            raise ConfigError(
                "training a pretrained encoder with the diffusion loss overwrites "
                "the alignment; pass force_encoder_trainable to do it anyway"
            )


def _check_dataset(world: WorldSpec, dataset: Dataset, guided: bool, what: str) -> None:
    if dataset.world_seed != world.seed:
        raise CompatibilityError(
            f"{what} dataset was generated for world seed {dataset.world_seed}, "
            f"not {world.seed}"
        )
    if dataset.x0.shape[1] != world.d_x or dataset.reference.shape[1] != world.d_face:
        raise CompatibilityError(
            f"{what} dataset dims {dataset.x0.shape[1]}/{dataset.reference.shape[1]} "
            f"do not match world {world.d_x}/{world.d_face}"
        )
    if dataset.guided != guided:
        kind = "guided" if guided else "main"
        raise CompatibilityError(f"{what} dataset is not a {kind} dataset")


def _json_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n"


class _MetricsWriter:
    """Append-only JSONL sink that can drop post-checkpoint lines on resume."""

    def __init__(self, run_dir: Path | None, start_step: int):
        self.records: list[dict] = []
        self._fh = None
        self._timing = None
        if run_dir is None:
            return
        run_dir.mkdir(parents=True, exist_ok=True)
        path = run_dir / METRICS_NAME
        if start_step > 0 and path.exists():
            kept = [
                line
                for line in path.read_text().splitlines()
                if json.loads(line)["step"] <= start_step
            ]
            path.write_text("".join(line + "\n" for line in kept))
        else:
            path.write_text("")
        (run_dir / TIMING_NAME).write_text("")
        self._fh = open(path, "a")
        self._timing = open(run_dir / TIMING_NAME, "a")

    def emit(self, record: dict, seconds: float) -> None:
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(_json_line(record))
            self._fh.flush()
            self._timing.write(
                _json_line({"step": record["step"], "seconds": round(seconds, 6)})
            )
            self._timing.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._timing.close()


def _dump_diagnostic(run_dir: Path | None, payload: dict) -> str:
    if run_dir is None:
        return ""
    path = run_dir / DIAGNOSTIC_NAME
    path.write_text(json.dumps(payload, sort_keys=True, indent=2))
    return f"; diagnostic written to {path}"


def _fill_missing_grads(params: list[Tensor]) -> None:
    # Masked loss terms and the last block's face-side sublayers can leave
    # parameters off the tape; the optimizer contract wants explicit zeros.
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def _load_params_strict(
    named: list[tuple[str, Tensor]], arrays: dict[str, Array], path
) -> None:
    for name, tensor in named:
        key = f"param/{name}"
        if key not in arrays:
            raise CompatibilityError(f"{path}: checkpoint lacks parameter {name!r}")
        if arrays[key].shape != tensor.data.shape:
            raise CompatibilityError(
                f"{path}: parameter {name!r} has shape {arrays[key].shape}, "
                f"expected {tensor.data.shape}"
            )
        tensor.data = arrays[key].astype(np.float64, copy=True)


def _build_encoder(frozen: FrozenEncoders, cfg) -> FaceClipEncoder:
    return FaceClipEncoder.build(
        frozen,
        init_seed=cfg.seed,
        n_blocks=cfg.n_blocks,
        n_heads=cfg.n_heads,
        ff_hidden=cfg.ff_hidden,
        sequential_dca=cfg.sequential_dca,
    )


def pretrain(
    world: WorldSpec,
    frozen: FrozenEncoders,
    main: Dataset,
    guided: Dataset,
    cfg: PretrainConfig,
    run_dir: str | Path | None = None,
    resume: bool = False,
) -> tuple[FaceClipEncoder, list[dict]]:
    """Run the alignment stage; returns the encoder and its metrics records.

    With ``run_dir`` set, streams metrics.jsonl, checkpoints on the cadence,
    and (with ``resume``) picks up from the checkpoint found there.
    """
    _check_dataset(world, main, guided=False, what="main")
    _check_dataset(world, guided, guided=True, what="guided")

    encoder = _build_encoder(frozen, cfg)
    named = encoder.named_parameters()
    log_tau: Tensor | None = None
    if cfg.loss.learnable_tau:
        log_tau = Tensor(math.log(cfg.loss.tau), requires_grad=True)
        named = named + [("loss.log_tau", log_tau)]
    params = [p for _, p in named]
    opt = AdamW(params, lr=cfg.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _PRETRAIN_STREAM]))

    run_dir = Path(run_dir) if run_dir is not None else None
    start_step = 0
    if resume:
        if run_dir is None:
            raise ConfigError("resume requested without a run directory")
        meta, arrays = load_checkpoint(run_dir / CHECKPOINT_NAME)
        _check_meta(meta, "pretrain", world, asdict(cfg), run_dir)
        _load_params_strict(named, arrays, run_dir / CHECKPOINT_NAME)
        opt.load_state_arrays(
            {k[len("opt/") :]: v for k, v in arrays.items() if k.startswith("opt/")},
            meta["opt_step"],
        )
        rng.bit_generator.state = meta["rng_state"]
        start_step = int(meta["step"])

    frozen_hash = frozen.weight_hash()
    writer = _MetricsWriter(run_dir, start_step)
    lam = cfg.loss.guided_probability
    b = cfg.batch_size

    def checkpoint_now(step: int) -> None:
        if run_dir is None:
            return
        meta = {
            "kind": "pretrain",
            "world_seed": world.seed,
            "step": step,
            "config": asdict(cfg),
            "rng_state": rng.bit_generator.state,
            "frozen_hash": frozen_hash,
            "opt_step": opt.step_count,
        }
        arrays = {f"param/{n}": t.data for n, t in named}
        arrays.update({f"opt/{k}": v for k, v in opt.state_arrays().items()})
        save_checkpoint(run_dir / CHECKPOINT_NAME, meta, arrays)

    try:
        for step in range(start_step + 1, cfg.steps + 1):
            tick = time.perf_counter()
            idx = rng.integers(0, len(main), size=b)
            guided_rows = rng.random(b) < lam
            gidx = rng.integers(0, len(guided), size=b)

            x0 = main.x0[idx].copy()
            captions = main.captions[idx].copy()
            refs = main.reference[idx].copy()
            if guided_rows.any():
                sub = gidx[guided_rows]
                x0[guided_rows] = guided.x0[sub]
                captions[guided_rows] = guided.captions[sub]
                refs[guided_rows] = 0.0

            e, mask = encoder.encode(captions, refs)
            e_to_text = encoder.project_to_text(e, mask)
            e_to_face = encoder.project_to_face(e, mask)
            image_cls = frozen.image.encode(x0)
            face_cls, _ = frozen.face.encode(refs)
            text_cls, _ = frozen.text.encode(captions)
            tau = ad.exp(log_tau) if log_tau is not None else None
            loss, breakdown = alignment_loss(
                cfg.loss,
                e_to_text,
                e_to_face,
                image_cls,
                face_cls,
                text_cls,
                guided_rows=guided_rows,
                tau=tau,
            )
            if not np.isfinite(loss.data):
                hint = _dump_diagnostic(
                    run_dir,
                    {"stage": "pretrain", "step": step, "breakdown": breakdown},
                )
                raise NumericsError(f"non-finite loss at step {step}{hint}")
            loss.backward()
            _fill_missing_grads(params)
            clip_global_norm(params, cfg.grad_clip)
            opt.step()

            if step % cfg.metrics_every == 0 or step == cfg.steps:
                record = {
                    "step": step,
                    "loss": float(loss.data),
                    "guided": int(guided_rows.sum()),
                    "terms": {k: v for k, v in breakdown.items() if k != "total"},
                }
                writer.emit(record, time.perf_counter() - tick)
            if step % cfg.checkpoint_every == 0 or step == cfg.steps:
                checkpoint_now(step)
    finally:
        writer.close()

    if frozen.weight_hash() != frozen_hash:
        raise ContractError("frozen encoder weights drifted during pre-training")
    return encoder, writer.records


def _check_meta(
    meta: dict, kind: str, world: WorldSpec, cfg_dict: dict, run_dir
) -> None:
    if meta.get("kind") != kind:
        raise CompatibilityError(
            f"{run_dir}: checkpoint kind {meta.get('kind')!r}, expected {kind!r}"
        )
    if meta.get("world_seed") != world.seed:
        raise CompatibilityError(
            f"{run_dir}: checkpoint world seed {meta.get('world_seed')} "
            f"does not match {world.seed}"
        )
    # Extending a finished run is allowed, so run length and cadences may
    # differ; everything that shapes the replayed trajectory must match.
    skip = {"steps", "checkpoint_every", "metrics_every"}
    saved = {k: v for k, v in meta.get("config", {}).items() if k not in skip}
    wanted = {k: v for k, v in cfg_dict.items() if k not in skip}
    if saved != wanted:
        raise CompatibilityError(f"{run_dir}: checkpoint config differs from this run")


def encoder_from_checkpoint(
    path: str | Path, world: WorldSpec, frozen: FrozenEncoders
) -> FaceClipEncoder:
    """Rebuild the encoder saved by either training stage."""
    meta, arrays = load_checkpoint(path)
    if meta.get("kind") not in ("pretrain", "diffusion"):
        raise CompatibilityError(f"{path}: unknown checkpoint kind {meta.get('kind')!r}")
    if meta.get("world_seed") != world.seed:
        raise CompatibilityError(
            f"{path}: checkpoint world seed {meta.get('world_seed')} "
            f"does not match {world.seed}"
        )
    cfg = meta["config"]
    encoder = FaceClipEncoder.build(
        frozen,
        init_seed=cfg["seed"],
        n_blocks=cfg["n_blocks"],
        n_heads=cfg["n_heads"],
        ff_hidden=cfg["ff_hidden"],
        sequential_dca=cfg["sequential_dca"],
    )
    _load_params_strict(encoder.named_parameters(), arrays, path)
    return encoder


def denoiser_from_checkpoint(
    path: str | Path, world: WorldSpec, frozen: FrozenEncoders
) -> tuple[Denoiser, FaceClipEncoder, NoiseSchedule]:
    """Rebuild the sampling stack from a diffusion checkpoint."""
    meta, arrays = load_checkpoint(path)
    if meta.get("kind") != "diffusion":
        raise CompatibilityError(
            f"{path}: checkpoint kind {meta.get('kind')!r}, expected 'diffusion'"
        )
    if meta.get("world_seed") != world.seed:
        raise CompatibilityError(
            f"{path}: checkpoint world seed {meta.get('world_seed')} "
            f"does not match {world.seed}"
        )
    cfg = meta["config"]
    denoiser = Denoiser(
        world.d_x,
        frozen.text.d,
        cfg["hidden"],
        cfg["timesteps"],
        np.random.default_rng(np.random.SeedSequence([cfg["seed"], _DENOISER_INIT_STREAM])),
    )
    _load_params_strict(denoiser.named_parameters(), arrays, path)
    encoder = encoder_from_checkpoint(path, world, frozen)
    schedule = cosine_schedule(cfg["timesteps"], cfg["schedule_s"], cfg["max_beta"])
    return denoiser, encoder, schedule


def train_diffusion(
    world: WorldSpec,
    frozen: FrozenEncoders,
    main: Dataset,
    cfg: DiffusionTrainConfig,
    run_dir: str | Path | None = None,
    resume: bool = False,
    encoder: FaceClipEncoder | None = None,
    guided: Dataset | None = None,
) -> tuple[Denoiser, FaceClipEncoder, list[dict]]:
    """Fit the noise predictor, optionally training the encoder jointly.

    ``encoder`` overrides the checkpoint path in the config, which keeps
    in-process pipelines (pretrain, then diffusion) free of filesystem
    round trips. Guided rows (null reference) are off by default here and
    enter the batch mix only when the config asks for them.
    """
    _check_dataset(world, main, guided=False, what="main")
    if cfg.guided_probability > 0.0 and guided is None:
        raise ConfigError("guided mixing requested but no guided dataset given")
    if guided is not None:
        _check_dataset(world, guided, guided=True, what="guided")
    if encoder is None:
        if cfg.encoder_checkpoint == UNTRAINED:
            encoder = _build_encoder(frozen, cfg)
        else:
            encoder = encoder_from_checkpoint(cfg.encoder_checkpoint, world, frozen)

    denoiser = Denoiser(
        world.d_x,
        frozen.text.d,
        cfg.hidden,
        cfg.timesteps,
        np.random.default_rng(np.random.SeedSequence([cfg.seed, _DENOISER_INIT_STREAM])),
    )
    schedule = cosine_schedule(cfg.timesteps, cfg.schedule_s, cfg.max_beta)

    named = denoiser.named_parameters()
    if cfg.encoder_trainable:
        # The projection heads sit outside the conditioning path, so joint
        # training touches only the fusion stack.
        named = named + encoder.fusion.named_parameters()
    else:
        for p in encoder.parameters():
            p.requires_grad = False
    params = [p for _, p in named]
    opt = AdamW(params, lr=cfg.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _DIFFUSION_STREAM]))

    run_dir = Path(run_dir) if run_dir is not None else None
    start_step = 0
    if resume:
        if run_dir is None:
            raise ConfigError("resume requested without a run directory")
        meta, arrays = load_checkpoint(run_dir / CHECKPOINT_NAME)
        _check_meta(meta, "diffusion", world, asdict(cfg), run_dir)
        _load_params_strict(
            named + encoder.named_parameters(), arrays, run_dir / CHECKPOINT_NAME
        )
        opt.load_state_arrays(
            {k[len("opt/") :]: v for k, v in arrays.items() if k.startswith("opt/")},
            meta["opt_step"],
        )
        rng.bit_generator.state = meta["rng_state"]
        start_step = int(meta["step"])

    frozen_hash = frozen.weight_hash()
    encoder_hash = hash_arrays(parameter_arrays(encoder.named_parameters()))
    writer = _MetricsWriter(run_dir, start_step)
    x0_all, captions_all, refs_all = main.training_views()
    b = cfg.batch_size

    def checkpoint_now(step: int) -> None:
        if run_dir is None:
            return
        meta = {
            "kind": "diffusion",
            "world_seed": world.seed,
            "step": step,
            "config": asdict(cfg),
            "rng_state": rng.bit_generator.state,
            "frozen_hash": frozen_hash,
            "opt_step": opt.step_count,
        }
        arrays = {f"param/{n}": t.data for n, t in named}
        arrays.update(
            {f"param/{n}": t.data for n, t in encoder.named_parameters()}
        )
        arrays.update({f"opt/{k}": v for k, v in opt.state_arrays().items()})
        save_checkpoint(run_dir / CHECKPOINT_NAME, meta, arrays)

    try:
        for step in range(start_step + 1, cfg.steps + 1):
            tick = time.perf_counter()
            # Drawn every step regardless of the mixing probability, so
            # runs differing only in lambda see identical main batches.
            idx = rng.integers(0, len(main), size=b)
            guided_rows = rng.random(b) < cfg.guided_probability
            gidx = rng.integers(0, len(guided) if guided is not None else 1, size=b)
            x0 = x0_all[idx]
            captions = captions_all[idx]
            refs = refs_all[idx]
            if guided is not None and guided_rows.any():
                sub = gidx[guided_rows]
                x0[guided_rows] = guided.x0[sub]
                captions[guided_rows] = guided.captions[sub]
                refs[guided_rows] = 0.0
            e, mask = encoder.encode(captions, refs)
            loss, _ = diffusion_loss(denoiser, x0, e, mask, schedule, rng)
            if not np.isfinite(loss.data):
                hint = _dump_diagnostic(
                    run_dir, {"stage": "diffusion", "step": step}
                )
                raise NumericsError(f"non-finite loss at step {step}{hint}")
            loss.backward()
            _fill_missing_grads(params)
            clip_global_norm(params, cfg.grad_clip)
            opt.step()

            if step % cfg.metrics_every == 0 or step == cfg.steps:
                writer.emit(
                    {
                        "step": step,
                        "loss": float(loss.data),
                        "guided": int(guided_rows.sum()),
                    },
                    time.perf_counter() - tick,
                )
            if step % cfg.checkpoint_every == 0 or step == cfg.steps:
                checkpoint_now(step)
    finally:
        writer.close()
        if not cfg.encoder_trainable:
            for p in encoder.parameters():
                p.requires_grad = True

    if frozen.weight_hash() != frozen_hash:
        raise ContractError("frozen encoder weights drifted during diffusion training")
    if not cfg.encoder_trainable:
        now = hash_arrays(parameter_arrays(encoder.named_parameters()))
        if now != encoder_hash:
            raise ContractError("frozen joint encoder drifted during diffusion training")
    return denoiser, encoder, writer.records
