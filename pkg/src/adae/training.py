"""Adversarial training of the two autoencoders.

Per batch, the discriminator takes one step down its loss (reconstruct real
inputs well, reconstruct generated inputs badly) with the generated batch
frozen, then the generator takes one step down its loss (reconstruct inputs
well AND make the discriminator reconstruct its output well), with gradients
flowing through the discriminator but only generator weights moving. A shared
base learning rate is split between the two networks by a sigmoid of a
smoothed performance gap so whichever side is losing gets the larger share.
"""

from __future__ import annotations

import json
import math
import pathlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import Autoencoder, save_checkpoint
from .optim import Adam

__all__ = [
    "TrainingDivergenceError",
    "ConfigurationError",
    "BalancerConfig",
    "BalancerState",
    "TrainConfig",
    "LossReport",
    "EpochRecord",
    "compute_losses",
    "balance_lr",
    "current_rates",
    "train_step",
    "train",
]


class TrainingDivergenceError(FloatingPointError):
    """A loss or gradient became non-finite during training."""

    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class ConfigurationError(ValueError):
    """Invalid run setup (empty dataset, bad sizes, ...)."""


@dataclass
class BalancerConfig:
    slope: float = 1.0
    ema_decay: float = 0.99
    enabled: bool = True


@dataclass
class BalancerState:
    ema_delta: float = 0.0


@dataclass
class TrainConfig:
    """Defaults are the reference full-scale settings (batch 64, Adam 1e-5 with
    beta1 0.5, 100 epochs, adversarial from the first step).

    ``adv_start_epoch`` > 0 delays the adversarial coupling: earlier epochs
    train both networks on pure reconstruction at ``warmup_lr``. Short desk
    runs need this, since the adversarial pressure only stabilizes over far
    more steps than a desk run has; the full profile keeps it at 0.
    """
    batch_size: int = 64
    base_lr: float = 1e-5
    beta1: float = 0.5
    epochs: int = 100
    seed: int = 0
    balancer: BalancerConfig = field(default_factory=BalancerConfig)
    checkpoint_every: int = 10
    adv_start_epoch: int = 0
    warmup_lr: float | None = None  # None: use base_lr during warmup too


@dataclass(frozen=True)
class LossReport:
    rec_real_d: float   # mean |x - D(x)|
    rec_real_g: float   # mean |x - G(x)|
    adv: float          # mean |G(x) - D(G(x))|
    loss_d: float       # rec_real_d - adv
    loss_g: float       # rec_real_g + adv

    def finite(self) -> bool:
        return all(math.isfinite(v) for v in
                   (self.rec_real_d, self.rec_real_g, self.adv, self.loss_d, self.loss_g))


def _report_from_terms(rec_real_d: float, rec_real_g: float, adv: float) -> LossReport:
    return LossReport(rec_real_d=rec_real_d, rec_real_g=rec_real_g, adv=adv,
                      loss_d=rec_real_d - adv, loss_g=rec_real_g + adv)


def compute_losses(x: Tensor, generator: Autoencoder, discriminator: Autoencoder,
                   mode: str = "eval") -> LossReport:
    """Diagnostic loss evaluation: one generator pass, its output fed onward."""
    with ad.no_grad():
        gx = generator.forward(x, mode)
        dx = discriminator.forward(x, mode)
        dgx = discriminator.forward(gx, mode)
        rec_real_d = ad.l1_mean(x, dx).item()
        rec_real_g = ad.l1_mean(x, gx).item()
        adv = ad.l1_mean(gx, dgx).item()
    report = _report_from_terms(rec_real_d, rec_real_g, adv)
    if not report.finite():
        raise TrainingDivergenceError(f"non-finite loss: {report}")
    return report


def _sigmoid(v: float) -> float:
    # |v| capped so the result never rounds to exactly 0 or 1: both learning
    # rates must stay strictly positive even deep in saturation
    v = max(-27.0, min(27.0, v))
    if v >= 0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


def current_rates(state: BalancerState, base_lr: float,
                  config: BalancerConfig) -> tuple[float, float]:
    """(lr_G, lr_D) implied by the current smoothed gap; sums to 2*base_lr."""
    if not config.enabled:
        return base_lr, base_lr
    s = _sigmoid(config.slope * state.ema_delta)
    return 2.0 * base_lr * s, 2.0 * base_lr * (1.0 - s)


def balance_lr(state: BalancerState, report: LossReport, base_lr: float,
               config: BalancerConfig) -> tuple[float, float]:
    """Split 2*base_lr between G and D by a sigmoid of the smoothed gap.

    The gap is adv - rec_real_d: how much worse the discriminator treats
    generated images than real ones, i.e. how cleanly it separates the two.
    Positive gap means the discriminator is ahead, so the generator receives
    the larger rate. The two rates always sum to exactly 2*base_lr.
    """
    if not config.enabled:
        return base_lr, base_lr
    if base_lr <= 0:
        raise ConfigurationError(f"base_lr must be positive, got {base_lr}")
    delta = report.adv - report.rec_real_d
    state.ema_delta = config.ema_decay * state.ema_delta + (1.0 - config.ema_decay) * delta
    return current_rates(state, base_lr, config)


def train_step(x: Tensor, generator: Autoencoder, discriminator: Autoencoder,
               opt_g: Adam, opt_d: Adam, cfg: TrainConfig, state: BalancerState,
               *, epoch: int | None = None, batch: int | None = None,
               adversarial: bool = True) -> LossReport:
    """One adversarial step: D-update on a frozen generated batch, then G-update.

    Returns the losses evaluated before either update, so the reported
    discriminator and generator losses share the same adversarial term. With
    ``adversarial=False`` (warmup) both networks descend only their
    reconstruction terms at ``cfg.warmup_lr`` and the balancer is left alone.
    """
    # one generator pass is reused by both sub-updates; freezing it for the
    # D-step keeps the two objectives separate
    gx = generator.forward(x, "train")
    gx_frozen = gx.detach()
    dx = discriminator.forward(x, "train")
    dgx = discriminator.forward(gx_frozen, "train")

    rec_real_d_node = ad.l1_mean(x, dx)
    adv_node = ad.l1_mean(gx_frozen, dgx)
    rec_real_g_node = ad.l1_mean(x, gx)

    report = _report_from_terms(rec_real_d_node.item(), rec_real_g_node.item(),
                                adv_node.item())
    if not report.finite():
        raise TrainingDivergenceError(f"non-finite loss: {report}", epoch, batch)

    if adversarial:
        lr_g, lr_d = balance_lr(state, report, cfg.base_lr, cfg.balancer)
    else:
        lr_g = lr_d = cfg.base_lr if cfg.warmup_lr is None else cfg.warmup_lr

    try:
        opt_d.zero_grad()
        loss_d = ad.sub(rec_real_d_node, adv_node) if adversarial else rec_real_d_node
        loss_d.backward()
        opt_d.step(lr_d)

        opt_g.zero_grad()
        opt_d.zero_grad()  # the G backward also reaches D's weights; discard
        if adversarial:
            dgx2 = discriminator.forward(gx, "train")
            loss_g = ad.add(rec_real_g_node, ad.l1_mean(gx, dgx2))
        else:
            loss_g = rec_real_g_node
        loss_g.backward()
        opt_g.step(lr_g)
        opt_d.zero_grad()
    except FloatingPointError as err:
        raise TrainingDivergenceError(str(err), epoch, batch) from err
    return report


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss_d: float
    loss_g: float
    rec_real_d: float
    rec_real_g: float
    adv: float
    lr_g: float
    lr_d: float

    def to_json(self) -> str:
        return json.dumps({
            "epoch": self.epoch, "loss_d": self.loss_d, "loss_g": self.loss_g,
            "rec_real_d": self.rec_real_d, "rec_real_g": self.rec_real_g,
            "adv": self.adv, "lr_g": self.lr_g, "lr_d": self.lr_d,
        }, sort_keys=True)


def _batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    if n <= batch_size:
        return [perm]
    batches = [perm[i:i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]
    return batches


def train(split, arch, cfg: TrainConfig, out_dir=None, *,
          step_hook=None) -> tuple[Autoencoder, Autoencoder, list[EpochRecord]]:
    """Full training run over a dataset split; returns both nets and history.

    The run is deterministic for a fixed config: network init and per-epoch
    shuffles are all derived from ``cfg.seed``. When ``out_dir`` is given,
    ``history.jsonl`` grows one record per epoch and ``checkpoint.adae`` is
    rewritten every ``cfg.checkpoint_every`` epochs and at the end, so a crash
    or divergence leaves the last completed save behind.
    """
    images = split.train.images
    n = images.shape[0]
    if n == 0:
        raise ConfigurationError("training set is empty")
    if n < 2:
        raise ConfigurationError("training needs at least 2 images for batch statistics")
    if not split.train.normalized:
        raise ConfigurationError("training images must be normalized to [-1, 1] first")
    if cfg.epochs < 1:
        raise ConfigurationError(f"epochs must be >= 1, got {cfg.epochs}")

    root = np.random.SeedSequence(cfg.seed)
    g_seed, d_seed = (int(s.generate_state(1)[0]) for s in root.spawn(2))
    generator = Autoencoder(arch, "generator", seed=g_seed)
    discriminator = Autoencoder(arch, "discriminator", seed=d_seed)
    opt_g = Adam(generator.parameters(), beta1=cfg.beta1)
    opt_d = Adam(discriminator.parameters(), beta1=cfg.beta1)
    state = BalancerState()

    history: list[EpochRecord] = []
    history_path = None
    if out_dir is not None:
        out = pathlib.Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        history_path = out / "history.jsonl"
        history_path.write_text("")

    def checkpoint(epoch: int) -> None:
        if out_dir is None:
            return
        extra = {}
        extra.update(opt_g.state_arrays("adam.generator"))
        extra.update(opt_d.state_arrays("adam.discriminator"))
        save_checkpoint(out / "checkpoint.adae", generator, discriminator,
                        seed=cfg.seed, epoch=epoch, balancer_ema=state.ema_delta,
                        extra_arrays=extra)

    warmup_lr = cfg.base_lr if cfg.warmup_lr is None else cfg.warmup_lr
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        sums = np.zeros(5, dtype=np.float64)
        lr_sums = np.zeros(2, dtype=np.float64)
        batches = _batch_indices(n, cfg.batch_size, rng)
        adversarial = epoch >= cfg.adv_start_epoch
        for b, idx in enumerate(batches):
            x = Tensor(images[idx])
            report = train_step(x, generator, discriminator, opt_g, opt_d, cfg,
                                state, epoch=epoch, batch=b, adversarial=adversarial)
            sums += (report.loss_d, report.loss_g, report.rec_real_d,
                     report.rec_real_g, report.adv)
            if adversarial:
                lr_sums += current_rates(state, cfg.base_lr, cfg.balancer)
            else:
                lr_sums += (warmup_lr, warmup_lr)
            if step_hook is not None:
                step_hook(epoch, b, report)
        k = len(batches)
        record = EpochRecord(epoch, sums[0] / k, sums[1] / k, sums[2] / k,
                             sums[3] / k, sums[4] / k, lr_sums[0] / k, lr_sums[1] / k)
        history.append(record)
        if history_path is not None:
            with open(history_path, "a") as fh:
                fh.write(record.to_json() + "\n")
        if (epoch + 1) % cfg.checkpoint_every == 0:
            checkpoint(epoch + 1)
    checkpoint(cfg.epochs)
    return generator, discriminator, history
