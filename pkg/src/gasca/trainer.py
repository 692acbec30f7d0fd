"""Gradual greedy layer-wise adversarial training and its baselines.

``ganglw_train`` runs the stacking loop:

    train (G1, D1) on raw pairs; G <- [G1]; D <- [D1]
    for k = 2..m:
        encode train/validation pairs through G's encoders
        train a fresh (Gk, Dk) on the codes; stack both
        fine-tune all of G on raw pairs (D frozen)
        reconstruct the training inputs through G
        fine-tune all of D on {reconstructions, targets}

Each phase (stage training, G fine-tune, D fine-tune) starts from fresh
Adam moments, as a separately constructed optimizer would; resuming a phase
mid-way keeps the restored moments.

``glw_baseline`` is the same loop without the two fine-tuning steps, and
``joint_train_baseline`` trains the final architecture end to end from
scratch with the same number of generator updates.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import NonFiniteError, SeededRng, Tensor, mse_loss
from .data import PairedDataset, batches_per_epoch, iterate_batches
from .model import (DiscriminatorStack, GeneratorStack, ShallowAutoencoder, ShallowDiscriminator,
                    StageFactory, stack_discriminator, stack_generator)
from .objectives import LossWeights, combined_generator_loss, discriminator_loss, generator_adversarial_loss
from .optim import AdamConfig, reset_adam_state, zero_grads

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, stage: int, epoch: int, reason: str):
        super().__init__(f"training aborted at stage {stage}, epoch {epoch}: {reason}")
        self.stage = stage
        self.epoch = epoch


@dataclass(frozen=True)
class StageConfig:
    epochs_stage: int = 10
    epochs_finetune_g: int = 10
    epochs_finetune_d: int = 5
    batch_size: int = 32
    weights: LossWeights = LossWeights()
    adam: AdamConfig = AdamConfig()
    d_steps_per_g_step: int = 1
    non_saturating: bool = False
    # "combined" keeps the adversarial term while fine-tuning G, "reconstruction" drops it
    finetune_g_mode: str = "combined"
    train_discriminator: bool = True

    def __post_init__(self):
        for name in ("epochs_stage", "epochs_finetune_g", "epochs_finetune_d"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size < 1 or self.d_steps_per_g_step < 1:
            raise ValueError("batch_size and d_steps_per_g_step must be >= 1")
        if self.finetune_g_mode not in ("combined", "reconstruction"):
            raise ValueError(f"unknown finetune_g_mode {self.finetune_g_mode!r}")


@dataclass
class EpochRecord:
    stage: int
    phase: str
    epoch: int
    loss_d: float
    loss_g: float
    train_mse: float
    val_mse: float
    wall_ms: float = field(default=0.0, compare=False)


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    g_updates: int = 0
    d_updates: int = 0
    final_val_mse: float = math.nan
    accuracy: float = math.nan
    stage_wall_ms: dict = field(default_factory=dict, compare=False)
    sink: Optional[Callable[[EpochRecord], None]] = field(default=None, compare=False, repr=False)

    def add(self, rec: EpochRecord) -> None:
        values = (rec.loss_d, rec.loss_g, rec.train_mse, rec.val_mse)
        if not all(math.isfinite(v) for v in values):
            raise TrainingAborted(rec.stage, rec.epoch, f"non-finite metrics {values}")
        self.records.append(rec)
        if self.sink is not None:
            self.sink(rec)

    def add_wall(self, stage: int, ms: float) -> None:
        self.stage_wall_ms[stage] = self.stage_wall_ms.get(stage, 0.0) + ms


def evaluate(G, ds: PairedDataset) -> float:
    """MSE between G's output on the inputs and the targets."""
    return mse_loss(G.forward(ds.inputs), ds.targets)[0]


def _require_finite(arr: Tensor, what: str) -> Tensor:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")
    return arr


def _discriminator_update(D, real: Tensor, fake: Tensor, cfg: StageConfig) -> tuple:
    m = real.shape[0]
    p = _require_finite(D.forward(np.concatenate([real, fake])), "discriminator output")
    bundle = discriminator_loss(p[:m], p[m:])
    D.backward(np.concatenate([bundle.grads["d_real"], bundle.grads["d_fake"]]))
    cfg.adam.step(D.parameters())
    return bundle.value, p


def _adversarial_epochs(G, D, X: PairedDataset, X_val: PairedDataset, cfg: StageConfig, rng: SeededRng,
                        report: TrainReport, stage: int, phase: str, epochs: int, *,
                        start_epoch: int = 0, train_d: bool = True, adversarial: bool = True) -> None:
    """Shared mini-batch loop: ``d_steps_per_g_step`` D updates, then one G update."""
    w = cfg.weights if adversarial else LossWeights(1.0, 0.0)
    for epoch in range(start_epoch, epochs):
        t0 = time.perf_counter()
        sum_d = sum_g = sum_mse = 0.0
        n_d = n_g = 0
        try:
            for idx in iterate_batches(len(X), cfg.batch_size, rng):
                x_phi, x_mu = X.inputs[idx], X.targets[idx]
                m = x_mu.shape[0]
                y = _require_finite(G.forward(x_phi), "generator output")
                if train_d:
                    for _ in range(cfg.d_steps_per_g_step):
                        loss_d, _ = _discriminator_update(D, x_mu, y, cfg)
                        sum_d += loss_d
                        n_d += 1
                        report.d_updates += 1
                p = _require_finite(D.forward(np.concatenate([x_mu, y])), "discriminator output")
                if not train_d:
                    sum_d += discriminator_loss(p[:m], p[m:]).value
                    n_d += 1
                if w.lambda_adv > 0:
                    bundle = combined_generator_loss(y, x_mu, p[m:], w, cfg.non_saturating)
                    grad_p = np.concatenate([np.zeros_like(p[:m]), bundle.grads["d_fake"]])
                    grad_y = bundle.grads["y"] + D.backward(grad_p)[m:]
                    zero_grads(D.parameters())
                    loss_g, rec = bundle.value, bundle.parts["mse"]
                else:
                    rec, grad_rec = mse_loss(y, x_mu)
                    loss_g, grad_y = w.lambda_rec * rec, w.lambda_rec * grad_rec
                if not math.isfinite(loss_g):
                    raise TrainingAborted(stage, epoch, f"non-finite generator loss in phase {phase}")
                G.backward(grad_y)
                cfg.adam.step(G.parameters())
                report.g_updates += 1
                sum_g += loss_g
                sum_mse += rec
                n_g += 1
        except NonFiniteError as exc:
            raise TrainingAborted(stage, epoch, str(exc)) from exc
        val = evaluate(G, X_val)
        ms = (time.perf_counter() - t0) * 1e3
        report.add(EpochRecord(stage, phase, epoch, sum_d / max(n_d, 1), sum_g / max(n_g, 1),
                               sum_mse / max(n_g, 1), val, ms))
        report.add_wall(stage, ms)
        log.debug("stage %d %s epoch %d: val_mse=%.6g", stage, phase, epoch, val)


def train_shallow_pair(G_k: ShallowAutoencoder, D_k: ShallowDiscriminator, X: PairedDataset,
                       X_val: PairedDataset, cfg: StageConfig, rng: SeededRng, stage: Optional[int] = None,
                       report: Optional[TrainReport] = None, start_epoch: int = 0):
    """Jointly train one shallow autoencoder and its discriminator in place."""
    if len(X) == 0 or len(X_val) == 0:
        raise ValueError("empty dataset")
    stage = G_k.k if stage is None else stage
    report = report if report is not None else TrainReport()
    if start_epoch == 0:
        reset_adam_state(G_k.parameters() + D_k.parameters())
    _adversarial_epochs(G_k, D_k, X, X_val, cfg, rng, report, stage, "stage", cfg.epochs_stage,
                        start_epoch=start_epoch, train_d=cfg.train_discriminator)
    if report.records:
        report.final_val_mse = report.records[-1].val_mse
    return G_k, D_k, report


def encode_dataset(G: GeneratorStack, X: PairedDataset) -> PairedDataset:
    """Both sides of every pair through G's encoders; order preserved."""
    return PairedDataset(G.encode(X.inputs), G.encode(X.targets), X.split, check_range=False)


def fine_tune_generator(G: GeneratorStack, D: DiscriminatorStack, X: PairedDataset, X_val: PairedDataset,
                        cfg: StageConfig, rng: SeededRng, stage: Optional[int] = None,
                        report: Optional[TrainReport] = None):
    """End-to-end update of every stage of G on raw pairs, D frozen."""
    if len(X) == 0:
        raise ValueError("empty dataset")
    stage = G.depth if stage is None else stage
    report = report if report is not None else TrainReport()
    reset_adam_state(G.parameters())
    _adversarial_epochs(G, D, X, X_val, cfg, rng, report, stage, "finetune_g", cfg.epochs_finetune_g,
                        train_d=False, adversarial=cfg.finetune_g_mode == "combined")
    return G, report


def discriminator_accuracy(D, real: Tensor, fake: Tensor) -> float:
    """Fraction classified correctly at threshold 0.5 (real iff p >= 0.5)."""
    p = D.forward(np.concatenate([real, fake]))[:, 0]
    m = real.shape[0]
    return float((np.sum(p[:m] >= 0.5) + np.sum(p[m:] < 0.5)) / p.size)


def fine_tune_discriminator(D: DiscriminatorStack, reconstructions: Tensor, x_mu: Tensor, cfg: StageConfig,
                            rng: SeededRng, stage: Optional[int] = None, report: Optional[TrainReport] = None,
                            val_mse: Optional[float] = None):
    """Binary classification: targets are class 1, reconstructions class 0."""
    if reconstructions.shape[0] == 0 or x_mu.shape[0] == 0:
        raise ValueError("empty inputs")
    if reconstructions.shape != x_mu.shape:
        raise ValueError(f"reconstructions {reconstructions.shape} and targets {x_mu.shape} differ")
    stage = D.depth if stage is None else stage
    report = report if report is not None else TrainReport()
    train_mse = mse_loss(reconstructions, x_mu)[0]
    reset_adam_state(D.parameters())
    for epoch in range(cfg.epochs_finetune_d):
        t0 = time.perf_counter()
        sum_d = sum_g = 0.0
        n = 0
        try:
            for idx in iterate_batches(x_mu.shape[0], cfg.batch_size, rng):
                m = len(idx)
                loss_d, p = _discriminator_update(D, x_mu[idx], reconstructions[idx], cfg)
                report.d_updates += 1
                sum_d += loss_d
                sum_g += generator_adversarial_loss(p[m:], cfg.non_saturating).value
                n += 1
        except NonFiniteError as exc:
            raise TrainingAborted(stage, epoch, str(exc)) from exc
        ms = (time.perf_counter() - t0) * 1e3
        report.add(EpochRecord(stage, "finetune_d", epoch, sum_d / n, sum_g / n, train_mse,
                               train_mse if val_mse is None else val_mse, ms))
        report.add_wall(stage, ms)
    report.accuracy = discriminator_accuracy(D, x_mu, reconstructions)
    return D, report


def ganglw_train(m_stages: int, factory: StageFactory, X: PairedDataset, X_val: PairedDataset,
                 cfg: StageConfig, rng: SeededRng, *, finetune: bool = True,
                 sink: Optional[Callable[[EpochRecord], None]] = None, resume_from=None,
                 on_stage_end: Optional[Callable] = None):
    """Run the layer-wise stacking loop; returns (G, D, report, trace).

    ``resume_from`` (a checkpoint whose ``stage`` counts completed stages)
    restores G, D and the RNG state and continues with the next stage.
    ``on_stage_end(k, G, D, rng)`` fires after each completed stage.
    """
    if m_stages < 1:
        raise ValueError("m_stages must be >= 1")
    if len(X) == 0 or len(X_val) == 0:
        raise ValueError("empty dataset")
    report = TrainReport(sink=sink)
    trace: list[str] = []

    if resume_from is not None:
        G, D, first = resume_from.generator, resume_from.discriminator, resume_from.stage + 1
        if resume_from.rng_state is not None:
            rng.set_state(resume_from.rng_state)
    else:
        G_1 = factory.generator(1, X.sample_shape, rng)
        D_1 = factory.discriminator(1, X.sample_shape, rng)
        train_shallow_pair(G_1, D_1, X, X_val, cfg, rng, stage=1, report=report)
        trace.append("stage_train 1")
        G = stack_generator(GeneratorStack(), G_1)
        trace.append("stack_g 1")
        D = stack_discriminator(DiscriminatorStack(), D_1)
        trace.append("stack_d 1")
        first = 2
        if on_stage_end is not None:
            on_stage_end(1, G, D, rng)

    for k in range(first, m_stages + 1):
        X_g, X_val_g = encode_dataset(G, X), encode_dataset(G, X_val)
        trace.append(f"encode_dataset {k}")
        G_k = factory.generator(k, G.code_shape, rng)
        D_k = factory.discriminator(k, G.code_shape, rng)
        train_shallow_pair(G_k, D_k, X_g, X_val_g, cfg, rng, stage=k, report=report)
        trace.append(f"stage_train {k}")
        G = stack_generator(G, G_k)
        trace.append(f"stack_g {k}")
        D = stack_discriminator(D, D_k)
        trace.append(f"stack_d {k}")
        if finetune:
            fine_tune_generator(G, D, X, X_val, cfg, rng, stage=k, report=report)
            trace.append("finetune_g")
            recon = G.reconstruct(X.inputs)
            trace.append("reconstruct_trainset")
            fine_tune_discriminator(D, recon, X.targets, cfg, rng, stage=k, report=report,
                                    val_mse=evaluate(G, X_val))
            trace.append("finetune_d")
        if on_stage_end is not None:
            on_stage_end(k, G, D, rng)

    report.final_val_mse = evaluate(G, X_val)
    return G, D, report, trace


def glw_baseline(m_stages: int, factory: StageFactory, X: PairedDataset, X_val: PairedDataset,
                 cfg: StageConfig, rng: SeededRng, **kwargs):
    """Plain greedy layer-wise stacking: no per-stage fine-tuning."""
    return ganglw_train(m_stages, factory, X, X_val, cfg, rng, finetune=False, **kwargs)


def ganglw_generator_updates(m_stages: int, cfg: StageConfig, n_train: int) -> int:
    """Generator updates spent by a matching ``ganglw_train`` run."""
    epochs = m_stages * cfg.epochs_stage + (m_stages - 1) * cfg.epochs_finetune_g
    return epochs * batches_per_epoch(n_train, cfg.batch_size)


def build_stacks(m_stages: int, factory: StageFactory, sample_shape: tuple, rng: SeededRng):
    """Fresh, untrained G and D stacks with the architecture ganglw_train ends with."""
    G, D = GeneratorStack(), DiscriminatorStack()
    shape = tuple(sample_shape)
    for k in range(1, m_stages + 1):
        G_k = factory.generator(k, shape, rng)
        D_k = factory.discriminator(k, shape, rng)
        G, D = stack_generator(G, G_k), stack_discriminator(D, D_k)
        shape = G_k.code_shape
    return G, D


def joint_train_baseline(m_stages: int, factory: StageFactory, X: PairedDataset, X_val: PairedDataset,
                         cfg: StageConfig, rng: SeededRng, *,
                         sink: Optional[Callable[[EpochRecord], None]] = None):
    """The full architecture trained end to end from scratch.

    Runs exactly as many epochs as a matching ``ganglw_train`` spends on
    generator updates, so the generator update counts agree exactly.
    """
    if len(X) == 0 or len(X_val) == 0:
        raise ValueError("empty dataset")
    G, D = build_stacks(m_stages, factory, X.sample_shape, rng)
    report = TrainReport(sink=sink)
    epochs = m_stages * cfg.epochs_stage + (m_stages - 1) * cfg.epochs_finetune_g
    _adversarial_epochs(G, D, X, X_val, cfg, rng, report, m_stages, "joint", epochs,
                        train_d=cfg.train_discriminator)
    report.final_val_mse = evaluate(G, X_val)
    return G, D, report
