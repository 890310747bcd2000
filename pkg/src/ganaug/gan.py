"""Adversarial losses, the alternating D/G training loop, synthesis and diagnostics."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial.distance import cdist

from ganaug.data import Label, Patch, PatchPool, Source, flip_batch
from ganaug.errors import DomainError, InvalidInputError, TrainingDivergedError
from ganaug.models import (
    Checkpoint,
    Discriminator,
    DiscriminatorSpec,
    Generator,
    GeneratorSpec,
    build_model,
    kernel_sizes_differ,
)
from ganaug.seeding import derive_seed
from ganaug.storage import tile_grid, write_pgm

log = logging.getLogger(__name__)

TRAIN_LOG_FIELDS = ("epoch", "loss_d", "loss_g", "d_real_mean", "d_fake_mean", "wall_seconds")


# ---------------------------------------------------------------- losses


def _as_probs(p) -> torch.Tensor:
    t = p if isinstance(p, torch.Tensor) else torch.as_tensor(np.asarray(p, dtype=np.float64))
    if not bool(torch.all((t > 0) & (t < 1))):
        raise DomainError("probabilities must lie strictly inside (0, 1); clamp logits instead")
    return t


def discriminator_loss(d_real, d_fake, real_label: float = 1.0) -> torch.Tensor:
    """Cross-entropy of D with a (possibly smoothed) real target and fake target 0.

    -mean[y log D(x) + (1-y) log(1-D(x))] - mean[log(1 - D(G(z)))]
    """
    if not 0.0 < real_label <= 1.0:
        raise DomainError(f"real_label must be in (0, 1], got {real_label}")
    d_real, d_fake = _as_probs(d_real), _as_probs(d_fake)
    real_term = real_label * torch.log(d_real) + (1.0 - real_label) * torch.log1p(-d_real)
    return -real_term.mean() - torch.log1p(-d_fake).mean()


def generator_loss(d_fake) -> torch.Tensor:
    """Non-saturating generator loss, -mean log D(G(z))."""
    return -torch.log(_as_probs(d_fake)).mean()


def discriminator_loss_from_logits(real_logits, fake_logits, real_label: float = 1.0) -> torch.Tensor:
    """Same value as ``discriminator_loss`` on sigmoid(logits), computed stably."""
    target = torch.full_like(real_logits, real_label)
    real = F.binary_cross_entropy_with_logits(real_logits, target)
    # -log(1 - sigmoid(l)) = softplus(l)
    return real + F.softplus(fake_logits).mean()


def generator_loss_from_logits(fake_logits) -> torch.Tensor:
    # -log sigmoid(l) = softplus(-l)
    return F.softplus(-fake_logits).mean()


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class LatentSpec:
    dim: int = 200
    normalize: bool = True  # min-max each latent vector onto [-1, 1] before G

    def __post_init__(self):
        if self.dim < 1:
            raise InvalidInputError("latent dim must be positive")


@dataclass(frozen=True)
class GanTrainConfig:
    batch_size: int = 64
    epochs: int = 300
    learning_rate_g: float = 2e-4
    learning_rate_d: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    label_smoothing: float = 0.9
    flip_augment_real: bool = True
    latent: LatentSpec = field(default_factory=LatentSpec)
    seed: int = 0
    sample_grid_every: int = 0  # 0 disables sample grids

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if isinstance(self.latent, dict):
            object.__setattr__(self, "latent", LatentSpec(**self.latent))
        if self.batch_size < 1 or self.epochs < 1:
            raise InvalidInputError("batch_size and epochs must be >= 1")
        if self.learning_rate_g < 0 or self.learning_rate_d < 0:
            raise InvalidInputError("learning rates must be non-negative")
        if not 0.5 <= self.label_smoothing <= 1.0:
            raise InvalidInputError("label_smoothing must lie in [0.5, 1]")


@dataclass
class TrainLogRow:
    epoch: int
    loss_d: float
    loss_g: float
    d_real_mean: float
    d_fake_mean: float
    wall_seconds: float


@dataclass
class StepStats:
    loss_d: float
    loss_g: float
    d_real_mean: float
    d_fake_mean: float


@dataclass
class GanState:
    generator: Generator
    discriminator: Discriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    latent_rng: torch.Generator
    config: GanTrainConfig
    epoch: int = 0
    step: int = 0


def new_gan_state(
    config: GanTrainConfig,
    g_spec: Optional[GeneratorSpec] = None,
    d_spec: Optional[DiscriminatorSpec] = None,
    image_size: int = 32,
) -> GanState:
    g_spec = g_spec or GeneratorSpec(image_size=image_size, latent_dim=config.latent.dim)
    d_spec = d_spec or DiscriminatorSpec(image_size=g_spec.image_size)
    if g_spec.latent_dim != config.latent.dim:
        raise InvalidInputError("generator latent_dim differs from config.latent.dim")
    if g_spec.image_size != d_spec.image_size:
        raise InvalidInputError("generator and discriminator image sizes differ")
    if not kernel_sizes_differ(g_spec, d_spec):
        log.warning("G and D share kernel size %d; checkerboard artifacts are more likely", g_spec.kernel_size)
    g = build_model(g_spec, derive_seed(config.seed, 1)).train()
    d = build_model(d_spec, derive_seed(config.seed, 2)).train()
    return GanState(
        generator=g,
        discriminator=d,
        opt_g=torch.optim.Adam(g.parameters(), lr=config.learning_rate_g, betas=config.betas),
        opt_d=torch.optim.Adam(d.parameters(), lr=config.learning_rate_d, betas=config.betas),
        latent_rng=torch.Generator().manual_seed(derive_seed(config.seed, 3)),
        config=config,
    )


def sample_latent(latent: LatentSpec, n: int, rng: torch.Generator) -> torch.Tensor:
    z = torch.randn(n, latent.dim, generator=rng)
    if latent.normalize and n:
        # row-wise normalize_to_range(row, -1, 1), vectorized
        lo = z.min(dim=1, keepdim=True).values
        span = z.max(dim=1, keepdim=True).values - lo
        safe = torch.where(span > 0, span, torch.ones_like(span))
        z = torch.where(span > 0, (z - lo) * (2.0 / safe) - 1.0, torch.zeros_like(z))
    return z


def to_unit_range(images: torch.Tensor) -> torch.Tensor:
    """Map generator output from [-1, 1] to [0, 1]."""
    return (images + 1.0) * 0.5


def train_step(
    state: GanState,
    real_batch: torch.Tensor,
    trace: Optional[Callable[[str, GanState], None]] = None,
) -> StepStats:
    """One D update followed by one G update on a batch of reals in [0, 1].

    ``trace`` is called with ``"d_update:before"``, ``"d_update:after"``,
    ``"g_update:before"`` and ``"g_update:after"`` around the two updates.
    """
    cfg = state.config
    g, d = state.generator, state.discriminator
    b = real_batch.shape[0]

    z = sample_latent(cfg.latent, b, state.latent_rng)  # step 1
    fake = to_unit_range(g(z))  # step 2
    real_logits = d(real_batch)  # step 3
    fake_logits = d(fake.detach())
    loss_d = discriminator_loss_from_logits(real_logits, fake_logits, cfg.label_smoothing)  # step 4

    if trace:
        trace("d_update:before", state)
    state.opt_d.zero_grad(set_to_none=True)
    loss_d.backward()
    state.opt_d.step()  # step 5
    if trace:
        trace("d_update:after", state)

    loss_g = generator_loss_from_logits(d(fake))  # step 6, through the updated D
    if trace:
        trace("g_update:before", state)
    state.opt_g.zero_grad(set_to_none=True)
    loss_g.backward()
    state.opt_g.step()  # step 7
    # the G backward pass leaves gradients on D; drop them so nothing stale survives
    state.opt_d.zero_grad(set_to_none=True)
    if trace:
        trace("g_update:after", state)

    stats = StepStats(
        loss_d=loss_d.item(),
        loss_g=loss_g.item(),
        d_real_mean=torch.sigmoid(real_logits.detach()).mean().item(),
        d_fake_mean=torch.sigmoid(fake_logits.detach()).mean().item(),
    )
    if not all(math.isfinite(v) for v in (stats.loss_d, stats.loss_g)):
        raise TrainingDivergedError(
            f"non-finite loss at epoch {state.epoch}, step {state.step}: "
            f"loss_d={stats.loss_d}, loss_g={stats.loss_g}"
        )
    state.step += 1
    return stats


def steps_per_epoch(n_reals: int, batch_size: int) -> int:
    return math.ceil(n_reals / batch_size)


@dataclass
class GanResult:
    generator: Checkpoint
    discriminator: Checkpoint
    log: list[TrainLogRow]


def _mass_array(reals: PatchPool) -> np.ndarray:
    if any(p.label != Label.MASS for p in reals):
        raise InvalidInputError("GAN training pool must contain only Mass patches")
    return reals.pixels()[:, None, :, :]


def train_gan(
    config: GanTrainConfig,
    reals: PatchPool,
    g_spec: Optional[GeneratorSpec] = None,
    d_spec: Optional[DiscriminatorSpec] = None,
    out_dir=None,
) -> GanResult:
    """Train G and D for ``config.epochs`` passes over the real masses.

    Each epoch reshuffles the reals with a seed derived from (seed, epoch)
    and runs ceil(N / batch_size) train steps. With ``out_dir`` set, writes
    ``train_log.csv`` and ``samples_epoch{N}.pgm`` grids.
    """
    if len(reals) < config.batch_size:
        raise InvalidInputError(f"need at least one batch ({config.batch_size}) of reals, got {len(reals)}")
    data = _mass_array(reals)
    state = new_gan_state(config, g_spec, d_spec, image_size=reals.image_size)
    n = data.shape[0]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    grid_latent = sample_latent(config.latent, 64, torch.Generator().manual_seed(derive_seed(config.seed, 4)))

    rows: list[TrainLogRow] = []
    for epoch in range(1, config.epochs + 1):
        state.epoch = epoch
        t0 = time.perf_counter()
        rng = np.random.default_rng(derive_seed(config.seed, epoch))
        order = rng.permutation(n)
        acc = np.zeros(4)
        weight = 0
        for start in range(0, n, config.batch_size):
            batch = data[order[start : start + config.batch_size]]
            if config.flip_augment_real:
                batch = flip_batch(batch, rng)
            s = train_step(state, torch.from_numpy(np.ascontiguousarray(batch)))
            acc += len(batch) * np.array([s.loss_d, s.loss_g, s.d_real_mean, s.d_fake_mean])
            weight += len(batch)
        acc /= weight
        rows.append(TrainLogRow(epoch, *map(float, acc), wall_seconds=time.perf_counter() - t0))
        if out is not None and config.sample_grid_every and epoch % config.sample_grid_every == 0:
            write_pgm(out / f"samples_epoch{epoch}.pgm", tile_grid(_render(state.generator, grid_latent)))
        if epoch == 1 or epoch % 25 == 0 or epoch == config.epochs:
            r = rows[-1]
            log.info("epoch %d loss_d=%.4f loss_g=%.4f D(x)=%.3f D(G(z))=%.3f",
                     epoch, r.loss_d, r.loss_g, r.d_real_mean, r.d_fake_mean)

    meta = dict(
        epoch=config.epochs,
        seed=config.seed,
        final_loss_d=rows[-1].loss_d,
        final_loss_g=rows[-1].loss_g,
    )
    result = GanResult(
        generator=Checkpoint.from_model(state.generator, **meta),
        discriminator=Checkpoint.from_model(state.discriminator, **meta),
        log=rows,
    )
    if out is not None:
        write_train_log(out / "train_log.csv", rows)
    return result


def write_train_log(path, rows: list[TrainLogRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAIN_LOG_FIELDS)
        for r in rows:
            w.writerow([r.epoch, repr(r.loss_d), repr(r.loss_g), repr(r.d_real_mean), repr(r.d_fake_mean), f"{r.wall_seconds:.3f}"])


@torch.no_grad()
def _render(generator: Generator, latent: torch.Tensor) -> np.ndarray:
    was_training = generator.training
    generator.eval()
    try:
        imgs = to_unit_range(generator(latent)).clamp(0.0, 1.0)
    finally:
        generator.train(was_training)
    return imgs[:, 0].numpy()


def synthesize(
    generator: Checkpoint | Generator,
    n: int,
    seed: int,
    latent: Optional[LatentSpec] = None,
    batch_size: int = 256,
) -> PatchPool:
    """Draw ``n`` synthetic Mass patches from a trained generator.

    Latents are sampled per ``latent`` (default: matching the generator's
    latent dim, normalized) and outputs are mapped from [-1, 1] to [0, 1].
    """
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    model = generator.build() if isinstance(generator, Checkpoint) else generator
    latent = latent or LatentSpec(dim=model.spec.latent_dim)
    rng = torch.Generator().manual_seed(int(seed))
    z = sample_latent(latent, n, rng)
    images = np.concatenate([_render(model, z[i : i + batch_size]) for i in range(0, n, batch_size)])
    return PatchPool(
        Patch(images[i], Label.MASS, Source.SYNTHETIC, f"synth-{seed}-{i:05d}") for i in range(n)
    )


# ---------------------------------------------------------------- diagnostics


def checkerboard_score(patch) -> float:
    """Share of non-DC spectral energy in the (S/2, S/2) bin.

    1.0 for a pure alternating grid, 0.0 for constant images.
    """
    x = np.asarray(patch.pixels if isinstance(patch, Patch) else patch, dtype=np.float64)
    s = x.shape[0]
    if x.ndim != 2 or s != x.shape[1] or s % 2:
        raise InvalidInputError("checkerboard_score needs a square image with even side")
    power = np.abs(np.fft.fft2(x)) ** 2
    total = power.sum() - power[0, 0]
    # spectral leakage from rounding can leave ~1e-30 of energy in a constant image
    if total <= 1e-20 * max(power[0, 0], 1.0):
        return 0.0
    return float(min(1.0, power[s // 2, s // 2] / total))


@dataclass
class MemorizationStats:
    mean: float
    min: float
    distances: np.ndarray


def memorization_distance(synthetic: PatchPool, reals: PatchPool) -> MemorizationStats:
    """Euclidean distance from each synthetic patch to its nearest real patch."""
    if len(synthetic) == 0 or len(reals) == 0:
        raise InvalidInputError("both pools must be non-empty")
    a = synthetic.pixels().reshape(len(synthetic), -1).astype(np.float64)
    b = reals.pixels().reshape(len(reals), -1).astype(np.float64)
    nearest = np.concatenate([cdist(a[i : i + 256], b).min(axis=1) for i in range(0, len(a), 256)])
    return MemorizationStats(mean=float(nearest.mean()), min=float(nearest.min()), distances=nearest)
