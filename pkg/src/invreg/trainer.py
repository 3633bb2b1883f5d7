"""Adversarial training loop over patch pairs drawn from volume pairs.

Every step draws its patch batch from a random stream derived solely
from (seed, step index), so a run can be stopped at any checkpoint and
resumed bit-exactly without serializing generator state for the random
streams. Volumes are visited as ordered pairs; each pair is revisited
every patches_per_pair // batch_size steps.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import CheckpointError, ConfigError, TrainingDivergedError
from .losses import LossConfig, discriminator_loss, generator_loss
from .model import Discriminator, Generator, ModelConfig, build_models
from .sampler import SamplerConfig, extract_patch, read_patch_archive, sample_patches
from .volio import Volume
from .warp import warp_batch

CHECKPOINT_VERSION = "invreg-checkpoint-1"


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    iterations: int = 10000
    batch_size: int = 4
    lr_generator: float = 1e-4
    lr_discriminator: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float = 10.0
    patches_per_pair: int = 2500
    adversarial_enabled: bool = True
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_generator <= 0 or self.lr_discriminator <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be > 0, got {self.grad_clip}")
        if self.patches_per_pair < self.batch_size:
            raise ConfigError(
                f"patches_per_pair ({self.patches_per_pair}) must cover at "
                f"least one batch ({self.batch_size})"
            )
        if self.sampler.patch_size != self.model.patch_size:
            raise ConfigError(
                f"sampler patch_size {self.sampler.patch_size} differs from "
                f"model patch_size {self.model.patch_size}"
            )

    @property
    def steps_per_pair(self) -> int:
        return max(1, self.patches_per_pair // self.batch_size)


@dataclass
class TrainState:
    config: TrainConfig
    generator: Generator
    disc_s: Discriminator
    disc_t: Discriminator
    opt_g: torch.optim.Adam
    opt_ds: torch.optim.Adam
    opt_dt: torch.optim.Adam
    step: int = 0


def init_state(config: TrainConfig) -> TrainState:
    gen, disc_s, disc_t = build_models(config.model)
    return TrainState(
        config=config,
        generator=gen,
        disc_s=disc_s,
        disc_t=disc_t,
        opt_g=torch.optim.Adam(gen.parameters(), lr=config.lr_generator, betas=config.betas),
        opt_ds=torch.optim.Adam(disc_s.parameters(), lr=config.lr_discriminator, betas=config.betas),
        opt_dt=torch.optim.Adam(disc_t.parameters(), lr=config.lr_discriminator, betas=config.betas),
    )


def ordered_pairs(n: int) -> list[tuple[int, int]]:
    """All ordered (source, target) index pairs over n volumes."""
    return [(a, b) for a in range(n) for b in range(n) if a != b]


def _batch_tensors(source: Volume, target: Volume, specs) -> tuple[torch.Tensor, torch.Tensor]:
    src = np.stack([extract_patch(source, s) for s in specs])[:, None]
    tgt = np.stack([extract_patch(target, s) for s in specs])[:, None]
    return torch.from_numpy(src), torch.from_numpy(tgt)


def draw_batch(
    source: Volume, target: Volume, config: TrainConfig, step: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample the patch batch for one step from its own seeded stream."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, step]))
    specs = sample_patches(source, target, config.batch_size, config.sampler, rng=rng)
    return _batch_tensors(source, target, specs)


def _update_disc(disc, opt, cond, real, fake, clip):
    opt.zero_grad(set_to_none=True)
    loss = discriminator_loss(disc(cond, real), disc(cond, fake))
    loss.backward()
    torch.nn.utils.clip_grad_norm_(disc.parameters(), clip)
    opt.step()
    return float(loss.detach())


def train_step(state: TrainState, src: torch.Tensor, tgt: torch.Tensor) -> dict[str, float]:
    """One discriminator update per side followed by one generator update.

    Returns the scalar loss components of the step. Raises
    TrainingDivergedError when the generator objective stops being finite.
    """
    cfg = state.config
    adversarial = cfg.adversarial_enabled and cfg.loss.adv_weight != 0

    flow_st, flow_ts = state.generator(src, tgt)
    if not (torch.isfinite(flow_st).all() and torch.isfinite(flow_ts).all()):
        raise TrainingDivergedError(
            f"non-finite flows at step {state.step}",
            components={
                "src_finite": float(torch.isfinite(src).all()),
                "tgt_finite": float(torch.isfinite(tgt).all()),
                "flow_st_finite": float(torch.isfinite(flow_st).all()),
                "flow_ts_finite": float(torch.isfinite(flow_ts).all()),
            },
        )
    scalars: dict[str, float] = {}

    warped_st = warp_batch(src, flow_st)
    warped_ts = warp_batch(tgt, flow_ts)
    if adversarial:
        scalars["d_t"] = _update_disc(
            state.disc_t, state.opt_dt, src, tgt, warped_st.detach(), cfg.grad_clip
        )
        scalars["d_s"] = _update_disc(
            state.disc_s, state.opt_ds, tgt, src, warped_ts.detach(), cfg.grad_clip
        )

    disc_params = list(state.disc_s.parameters()) + list(state.disc_t.parameters())
    for p in disc_params:
        p.requires_grad_(False)
    try:
        total, components = generator_loss(
            src,
            tgt,
            flow_st,
            flow_ts,
            cfg.loss,
            d_t_fake_logits=state.disc_t(src, warped_st) if adversarial else None,
            d_s_fake_logits=state.disc_s(tgt, warped_ts) if adversarial else None,
            warped_st=warped_st,
            warped_ts=warped_ts,
        )
        for name, value in components.items():
            scalars[name] = float(value.detach())
        scalars["total"] = float(total.detach())
        if not torch.isfinite(total):
            raise TrainingDivergedError(
                f"non-finite generator loss at step {state.step}", components=scalars
            )
        state.opt_g.zero_grad(set_to_none=True)
        total.backward()
        torch.nn.utils.clip_grad_norm_(state.generator.parameters(), cfg.grad_clip)
        state.opt_g.step()
    finally:
        for p in disc_params:
            p.requires_grad_(True)
    return scalars


def train(
    volumes: list[Volume],
    config: TrainConfig,
    state: TrainState | None = None,
    log_path=None,
    step_hook=None,
    checkpoint_path=None,
    patch_archive=None,
) -> TrainState:
    """Run (or continue) training until config.iterations steps are done.

    volumes supplies the registration corpus; every ordered pair of
    distinct volumes is visited in a fixed rotation. Passing a
    patch_archive path trains on pre-extracted patch pairs instead
    (volumes are then ignored), drawing batches uniformly from the
    archive with the same per-step streams. A resumed state continues
    exactly where it stopped. step_hook(step, scalars) fires after every
    step; log_path appends one JSON line per step; checkpoint_path is
    written every config.checkpoint_every steps (and is the caller's job
    at the end of the run).
    """
    p = config.model.patch_size
    archive = None
    if patch_archive is not None:
        specs, src_all, tgt_all = read_patch_archive(patch_archive)
        if src_all.shape[1] != p:
            raise ConfigError(f"archive holds {src_all.shape[1]}^3 patches, model wants {p}^3")
        archive = (torch.from_numpy(src_all[:, None]), torch.from_numpy(tgt_all[:, None]))
    else:
        if len(volumes) < 2:
            raise ConfigError(f"training needs at least two volumes, got {len(volumes)}")
        for i, vol in enumerate(volumes):
            if any(d < p for d in vol.dims):
                raise ConfigError(f"volume {i} dims {vol.dims} cannot hold a {p}^3 patch")
    if state is None:
        state = init_state(config)
    pairs = ordered_pairs(len(volumes)) if archive is None else []

    log_file = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        while state.step < config.iterations:
            step = state.step
            if archive is None:
                visit = step // config.steps_per_pair
                a, b = pairs[visit % len(pairs)]
                src, tgt = draw_batch(volumes[a], volumes[b], config, step)
            else:
                a = b = -1
                rng = np.random.default_rng(np.random.SeedSequence([config.seed, step]))
                idx = rng.integers(0, archive[0].shape[0], size=config.batch_size)
                src, tgt = archive[0][idx], archive[1][idx]
            started = time.perf_counter()
            scalars = train_step(state, src, tgt)
            state.step = step + 1
            if log_file is not None:
                record = {
                    "iteration": step,
                    "pair": [a, b],
                    **scalars,
                    "wall_time": time.perf_counter() - started,
                }
                log_file.write(json.dumps(record) + "\n")
            if step_hook is not None:
                step_hook(step, scalars)
            if (
                checkpoint_path is not None
                and config.checkpoint_every > 0
                and state.step % config.checkpoint_every == 0
            ):
                save_checkpoint(state, checkpoint_path)
    finally:
        if log_file is not None:
            log_file.close()
    return state


def parameter_hash(module: torch.nn.Module) -> str:
    """SHA-256 over all state tensors in key order; equal iff bit-identical."""
    digest = hashlib.sha256()
    for key, tensor in module.state_dict().items():
        digest.update(key.encode())
        digest.update(np.ascontiguousarray(tensor.detach().numpy()).tobytes())
    return digest.hexdigest()


def save_checkpoint(state: TrainState, path) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "step": state.step,
        "config": dataclasses.asdict(state.config),
        "generator": state.generator.state_dict(),
        "disc_s": state.disc_s.state_dict(),
        "disc_t": state.disc_t.state_dict(),
        "opt_g": state.opt_g.state_dict(),
        "opt_ds": state.opt_ds.state_dict(),
        "opt_dt": state.opt_dt.state_dict(),
    }
    torch.save(payload, path)


def _config_from_dict(raw: dict) -> TrainConfig:
    kwargs = dict(raw)
    kwargs["model"] = ModelConfig(**raw["model"])
    kwargs["sampler"] = SamplerConfig(**raw["sampler"])
    kwargs["loss"] = LossConfig(**raw["loss"])
    kwargs["betas"] = tuple(raw["betas"])
    return TrainConfig(**kwargs)


def load_checkpoint(path) -> TrainState:
    """Restore a training state saved by save_checkpoint, bit for bit."""
    try:
        payload = torch.load(path, weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path} is not a {CHECKPOINT_VERSION} checkpoint "
            f"(found {payload.get('version') if isinstance(payload, dict) else type(payload)})"
        )
    try:
        config = _config_from_dict(payload["config"])
        state = init_state(config)
        state.generator.load_state_dict(payload["generator"])
        state.disc_s.load_state_dict(payload["disc_s"])
        state.disc_t.load_state_dict(payload["disc_t"])
        state.opt_g.load_state_dict(payload["opt_g"])
        state.opt_ds.load_state_dict(payload["opt_ds"])
        state.opt_dt.load_state_dict(payload["opt_dt"])
        state.step = int(payload["step"])
    except CheckpointError:
        raise
    except Exception as exc:
        raise CheckpointError(f"checkpoint {path} is incomplete: {exc}") from exc
    return state
