"""
End-to-end training of an unfolded network on cropped, augmented scenes.

Every step draws its crops, transforms and drop-path masks from a generator
seeded with (seed, global step), so a run resumed from an epoch checkpoint
replays exactly the steps an uninterrupted run would have taken.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import yaml

from .cassi_model import CodedMask, HsiCube, SensingOperator, apply_phi_t, forward, unshift_cube
from .config import (
    RunConfig,
    TrainConfig,
    config_echo_path,
    config_from_dict,
    drop_path_rates,
    dump_config,
)
from .data_io import DatasetManifest, read_container, write_container
from .errors import ConfigError, DimensionError, NonFiniteError
from .metrics import evaluate, psnr
from .nn_core import Parameter, Tape, Tensor, abs_, backward, mean, sub
from .unfolding import UnfoldingNetwork, build_network, unshift_batch

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "step", "lr", "train_l1", "val_psnr", "val_ssim")

__all__ = [
    "TrainConfig",
    "AdamState",
    "TrainingData",
    "TrainResult",
    "l1_loss",
    "adam_step",
    "cosine_lr",
    "dihedral",
    "augment",
    "build_model",
    "train_loop",
    "save_checkpoint",
    "load_checkpoint",
]


# ----------------------------------------------------------------------------
# Loss, optimizer, schedule
# ----------------------------------------------------------------------------

def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error over all elements."""
    if pred.shape != target.shape:
        raise DimensionError(f"l1_loss: prediction {pred.shape} vs target {target.shape}", axis="shape")
    return mean(abs_(sub(pred, target)))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: Sequence[Parameter], grads: Sequence[np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        key = p.name or f"#{i}"
        m = state.m.get(key)
        v = state.v.get(key)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[key] = m.astype(p.dtype, copy=False)
        state.v[key] = v.astype(p.dtype, copy=False)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)
    return state


def cosine_lr(epoch: int, total: int, lr0: float) -> float:
    """lr0 (1 + cos(pi epoch / total)) / 2, floored at 0."""
    if not 0 <= epoch <= max(total, 0):
        raise ConfigError(f"epoch {epoch} outside [0, {total}]")
    if total == 0:
        return lr0
    return max(0.0, lr0 * (1.0 + math.cos(math.pi * epoch / total)) / 2.0)


# ----------------------------------------------------------------------------
# Augmentation and batches
# ----------------------------------------------------------------------------

def dihedral(data: np.ndarray, index: int) -> np.ndarray:
    """Transform ``index`` in 0..7: rotate by 90 * (index % 4) degrees, then flip if index >= 4.

    The same permutation of (row, col) is applied to every band.
    """
    if not 0 <= index < 8:
        raise ConfigError(f"dihedral index must be in 0..7, got {index}")
    turns = index % 4
    if turns % 2 and data.shape[0] != data.shape[1]:
        raise ConfigError(f"rotation needs a square crop, got {data.shape[0]}x{data.shape[1]}")
    out = np.rot90(data, k=turns, axes=(0, 1))
    if index >= 4:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def augment(cube: HsiCube, rng: np.random.Generator) -> HsiCube:
    """One of the 8 flips/rotations, drawn uniformly."""
    if cube.height != cube.width:
        raise ConfigError(f"rotation augmentation needs a square crop, got {cube.height}x{cube.width}")
    return HsiCube(dihedral(cube.data, int(rng.integers(8))), cube.wavelengths)


@dataclass
class TrainingData:
    train: list
    val: list
    train_mask: CodedMask
    val_mask: CodedMask

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> "TrainingData":
        train = [cube for _, cube in manifest.iter_cubes("train")]
        if not train:
            raise ConfigError("manifest has no train cubes")
        val = [cube for _, cube in manifest.iter_cubes("val")]
        return cls(
            train=train,
            val=val,
            train_mask=manifest.mask_for("train"),
            val_mask=manifest.mask_for("val") if val else manifest.mask_for("train"),
        )

    @property
    def bands(self) -> int:
        return self.train[0].bands

    @property
    def shift_step(self) -> int:
        return self.train_mask.shift_step


def random_crop(cube: HsiCube, mask: CodedMask, size: int,
                rng: np.random.Generator) -> tuple[HsiCube, CodedMask]:
    """Crop cube and mask at the same randomly drawn region."""
    if cube.height < size or cube.width < size:
        raise ConfigError(f"crop {size} exceeds scene {cube.height}x{cube.width}")
    if mask.base.shape != (cube.height, cube.width):
        raise DimensionError(f"mask {mask.base.shape} does not cover scene {cube.data.shape[:2]}",
                             axis="height")
    top = int(rng.integers(cube.height - size + 1))
    left = int(rng.integers(cube.width - size + 1))
    crop = HsiCube(cube.data[top:top + size, left:left + size], cube.wavelengths)
    return crop, mask.crop(top, left, size, size)


def simulate_batch(cubes: Sequence[HsiCube], masks: Sequence[CodedMask],
                   dtype) -> tuple[Tensor, Tensor, Tensor]:
    """(y N x H x W' x 1, shifted masks N x H x W' x bands, targets N x H x W x bands)."""
    ys, shifted, targets = [], [], []
    for cube, mask in zip(cubes, masks):
        op = SensingOperator.from_mask(mask, cube.bands)
        ys.append(forward(cube, mask).data[:, :, None])
        shifted.append(op.shifted_mask)
        targets.append(cube.data)
    return (Tensor(np.stack(ys).astype(dtype)), Tensor(np.stack(shifted).astype(dtype)),
            Tensor(np.stack(targets).astype(dtype)))


def sample_batch(data: TrainingData, config: TrainConfig, rng: np.random.Generator, dtype):
    cubes, masks = [], []
    for _ in range(config.batch_size):
        cube = data.train[int(rng.integers(len(data.train)))]
        crop, mask = random_crop(cube, data.train_mask, config.crop, rng)
        if config.augment:
            crop = augment(crop, rng)
        cubes.append(crop)
        masks.append(mask)
    return simulate_batch(cubes, masks, dtype)


# ----------------------------------------------------------------------------
# Model construction and checkpoints
# ----------------------------------------------------------------------------

def build_model(config: RunConfig, bands: int) -> UnfoldingNetwork:
    """Network for ``config``; drop-path rates default to the stage-count table."""
    cdpr, bdpr = config.train.drop_path or drop_path_rates(config.solver.stages)
    model_cfg = dataclasses.replace(config.model, cdpr=cdpr, bdpr=bdpr)
    dtype = np.dtype(config.train.precision)
    return build_network(config.solver, model_cfg, bands, np.random.default_rng(config.seed), dtype)


@dataclass
class Checkpoint:
    params: dict
    adam: AdamState
    epoch: int
    best_psnr: float
    config: Optional[RunConfig]


def save_checkpoint(path: Union[str, Path], model: UnfoldingNetwork, config: RunConfig,
                    state: Optional[AdamState] = None, epoch: int = 0,
                    best_psnr: float = -math.inf) -> Path:
    """Write parameters, optimizer state and counters, plus the ``<path>.yaml`` config echo."""
    state = state or AdamState()
    records = {f"param/{name}": p.data for name, p in model.named_parameters()}
    for name in state.m:
        records[f"adam/m/{name}"] = state.m[name]
        records[f"adam/v/{name}"] = state.v[name]
    records["meta/step"] = np.asarray(state.step, dtype=np.float64)
    records["meta/epoch"] = np.asarray(epoch, dtype=np.float64)
    records["meta/best_psnr"] = np.asarray(best_psnr, dtype=np.float64)
    path = write_container(path, records)
    dump_config(config, config_echo_path(path))
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    records = read_container(path)
    params, adam = {}, AdamState()
    for key, value in records.items():
        if key.startswith("param/"):
            params[key[len("param/"):]] = value
        elif key.startswith("adam/m/"):
            adam.m[key[len("adam/m/"):]] = value
        elif key.startswith("adam/v/"):
            adam.v[key[len("adam/v/"):]] = value
    adam.step = int(records.get("meta/step", 0))
    echo = config_echo_path(path)
    config = None
    if echo.exists():
        config = config_from_dict(yaml.safe_load(echo.read_text()))
    return Checkpoint(
        params=params,
        adam=adam,
        epoch=int(records.get("meta/epoch", 0)),
        best_psnr=float(records.get("meta/best_psnr", -math.inf)),
        config=config,
    )


# ----------------------------------------------------------------------------
# Evaluation and the loop
# ----------------------------------------------------------------------------

def reconstruct_cubes(model: UnfoldingNetwork, cubes: Sequence[HsiCube], mask: CodedMask) -> list:
    out = []
    for cube in cubes:
        op = SensingOperator.from_mask(mask, cube.bands)
        out.append(unshift_cube(model.reconstruct(forward(cube, mask), op), cube.wavelengths))
    return out


def validate(model: UnfoldingNetwork, cubes: Sequence[HsiCube], mask: CodedMask) -> tuple[float, float]:
    """Mean PSNR and SSIM of reconstructions of ``cubes`` under ``mask``."""
    scores = [evaluate(ref, est) for ref, est in zip(cubes, reconstruct_cubes(model, cubes, mask))]
    return (float(np.mean([s["psnr"] for s in scores])), float(np.mean([s["ssim"] for s in scores])))


def baseline_psnr(cubes: Sequence[HsiCube], mask: CodedMask) -> float:
    """Mean PSNR of the unsheared Phi^T y initialization."""
    values = []
    for cube in cubes:
        op = SensingOperator.from_mask(mask, cube.bands)
        values.append(psnr(cube, unshift_cube(apply_phi_t(forward(cube, mask), op))))
    return float(np.mean(values))


@dataclass
class TrainResult:
    best_path: Path
    last_path: Path
    log_path: Path
    losses: list
    epochs: list


def train_loop(model: UnfoldingNetwork, data: TrainingData, config: RunConfig,
               out_dir: Union[str, Path], resume: Optional[Union[str, Path]] = None,
               on_step: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Train ``model`` per ``config.train``; write best/last checkpoints and the epoch CSV.

    Raises:
        NonFiniteError: the loss became NaN/Inf; carries the global step index.
    """
    tc = config.train
    tc.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dtype = np.dtype(tc.precision)
    val_cubes = data.val or data.train
    if not data.val:
        log.warning("no validation split; validating on the training scenes")

    params = model.parameters()
    state, start_epoch, best = AdamState(), 0, -math.inf
    if resume is not None:
        ckpt = load_checkpoint(resume)
        model.load_state_dict(ckpt.params)
        state, start_epoch, best = ckpt.adam, ckpt.epoch, ckpt.best_psnr
        log.info("resumed from %s at epoch %d (step %d)", resume, start_epoch, state.step)

    best_path, last_path = out_dir / "best.hsc", out_dir / "last.hsc"
    log_path = out_dir / "train_log.csv"
    mode = "a" if resume is not None and log_path.exists() else "w"
    losses, epochs = [], []
    with open(log_path, mode, newline="") as f:
        writer = csv.writer(f)
        if mode == "w":
            writer.writerow(LOG_COLUMNS)
        for epoch in range(start_epoch, tc.epochs):
            lr = cosine_lr(epoch, tc.epochs, tc.lr)
            epoch_losses = []
            for _ in range(tc.steps_per_epoch):
                step = state.step
                rng = np.random.default_rng((config.seed, step))
                y, mask, target = sample_batch(data, tc, rng, dtype)
                model.train()
                model.zero_grad()
                with Tape():
                    loss = l1_loss(unshift_batch(model(y, mask, rng), data.shift_step), target)
                value = loss.item()
                if not math.isfinite(value):
                    raise NonFiniteError("training loss is not finite", step=step)
                backward(loss)
                adam_step(params, [p.grad for p in params], state, lr, tc.beta1, tc.beta2, tc.eps)
                losses.append(value)
                epoch_losses.append(value)
                if on_step is not None:
                    on_step(step, value)
            val_psnr, val_ssim = validate(model, val_cubes, data.val_mask)
            row = {"epoch": epoch, "step": state.step, "lr": lr,
                   "train_l1": float(np.mean(epoch_losses)), "val_psnr": val_psnr, "val_ssim": val_ssim}
            writer.writerow([row[c] for c in LOG_COLUMNS])
            f.flush()
            epochs.append(row)
            log.info("epoch %d: l1 %.5f, val PSNR %.2f dB", epoch, row["train_l1"], val_psnr)
            if val_psnr > best:
                best = val_psnr
                save_checkpoint(best_path, model, config, state, epoch + 1, best)
            save_checkpoint(last_path, model, config, state, epoch + 1, best)

    if not last_path.exists() or tc.epochs == start_epoch:
        save_checkpoint(last_path, model, config, state, start_epoch, best)
    if not best_path.exists():
        save_checkpoint(best_path, model, config, state, start_epoch, best)
    return TrainResult(best_path, last_path, log_path, losses, epochs)
