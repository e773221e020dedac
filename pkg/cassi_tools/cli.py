#!/usr/bin/env python3
"""
cassi: simulate, reconstruct, train and verify snapshot spectral imaging solvers.

Usage:
    cassi synth --out data/
    cassi simulate --manifest data/manifest.yaml --out meas/ --noise-bits 11
    cassi reconstruct --manifest data/manifest.yaml --framework admm --denoiser tv --stages 50
    cassi train --manifest data/manifest.yaml --out runs/tiny --epochs 10
    cassi verify adjoint
    cassi info --stages 1

Every command takes --config FILE.yaml; flags given on the command line win
over file values. See docs/config-schema.md.
"""

import csv
import functools
import logging
import sys
import time
from pathlib import Path
from typing import Optional

import click
import numpy as np
from rich import box
from rich.console import Console
from rich.logging import RichHandler
from rich.progress import BarColumn, Progress, TextColumn, TimeRemainingColumn
from rich.table import Table

from . import __version__
from .cassi_model import NoiseSpec, SensingOperator, ShearedCube, apply_phi_t, forward, unshift_cube
from .config import DENOISERS, FFN_VARIANTS, FrameworkKind, RunConfig, apply_overrides, load_config
from .data_io import (
    DatasetManifest,
    default_band_triplet,
    export_false_color,
    load_measurement,
    save_cube,
    save_measurement,
    synth_dataset,
)
from .denoisers import SoftThreshold, TVDenoiser
from .errors import CassiError, ConfigError, StageError, UsageError
from .metrics import evaluate
from .unfolding import StageParams, count_parameters, run_unfold
from .verify import SUITES, run_suite

log = logging.getLogger(__name__)

console = Console()

FRAMEWORKS = [k.value for k in FrameworkKind]
ROLES = ("train", "val", "test", "all")


def _exit_code(error: Exception) -> int:
    if isinstance(error, StageError):
        return _exit_code(error.cause)
    return 2 if isinstance(error, (ConfigError, UsageError)) else 1


def handle_errors(fn):
    """Print CassiErrors as one ❌ line and exit 2 for config and usage errors, 1 otherwise."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except CassiError as e:
            click.echo(f"❌ {e}", err=True)
            log.debug("traceback", exc_info=True)
            sys.exit(_exit_code(e))

    return wrapper


def _load(config_path: Optional[str], seed: Optional[int], data_dir: Optional[str]) -> RunConfig:
    return apply_overrides(load_config(config_path), seed=seed, data_dir=data_dir)


def _manifest(manifest: Optional[str], config: RunConfig) -> DatasetManifest:
    if manifest is None:
        if config.data_dir is None:
            raise ConfigError("no --manifest given and CASSI_DATA_DIR is not set")
        manifest = str(Path(config.data_dir) / "manifest.yaml")
    return DatasetManifest.load(manifest)


def _scenes(manifest: DatasetManifest, role: str):
    roles = manifest.roles() if role == "all" else [role]
    for r in roles:
        mask = manifest.mask_for(r)
        for name, cube in manifest.iter_cubes(r):
            yield r, name, cube, mask


config_option = click.option("--config", "config_path", type=click.Path(dir_okay=False),
                             help="YAML run config (flags override it)")
seed_option = click.option("--seed", type=int, default=None, help="Random seed (default 42)")
manifest_option = click.option("--manifest", type=click.Path(dir_okay=False),
                               help="Dataset manifest (default $CASSI_DATA_DIR/manifest.yaml)")


@click.group()
@click.version_option(__version__, prog_name="cassi")
@click.option("-v", "--verbose", is_flag=True, help="Debug logging")
@click.option("--data-dir", envvar="CASSI_DATA_DIR", type=click.Path(file_okay=False),
              help="Default data directory [env: CASSI_DATA_DIR]")
@click.pass_context
def cli(ctx, verbose, data_dir):
    """Snapshot compressive spectral imaging: simulation, unfolded solvers, training."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )
    ctx.obj = {"data_dir": data_dir}


@cli.command()
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Output directory")
@click.option("--scenes", default=8, show_default=True, help="Number of scenes (last one is val)")
@click.option("--height", default=32, show_default=True)
@click.option("--width", default=32, show_default=True)
@click.option("--bands", default=4, show_default=True)
@click.option("--shift-step", default=1, show_default=True, help="Dispersion step d in pixels")
@click.option("--seed", default=42, show_default=True)
@handle_errors
def synth(out, scenes, height, width, bands, shift_step, seed):
    """Generate a deterministic synthetic dataset with a binary mask."""
    path = synth_dataset(out, seed=seed, scenes=scenes, height=height, width=width,
                         bands=bands, shift_step=shift_step)
    click.echo(f"💾 {scenes} scenes → {path}")


@cli.command()
@manifest_option
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Output directory")
@click.option("--noise-bits", type=int, default=None, help="Inject shot noise at this bit depth")
@click.option("--gaussian-sigma", type=float, default=None, help="Additive Gaussian read noise")
@click.option("--role", type=click.Choice(ROLES), default="all", show_default=True)
@config_option
@seed_option
@click.pass_context
@handle_errors
def simulate(ctx, manifest, out, noise_bits, gaussian_sigma, role, config_path, seed):
    """Write one measurement per scene: y = Phi x (+ noise)."""
    config = _load(config_path, seed, ctx.obj["data_dir"])
    config = apply_overrides(config, "simulate", noise_bits=noise_bits, gaussian_sigma=gaussian_sigma)
    dataset = _manifest(manifest, config)
    noise = NoiseSpec(config.simulate.noise_bits, config.simulate.gaussian_sigma)
    rng = np.random.default_rng(config.seed)
    out = Path(out)
    count = 0
    for _, name, cube, mask in _scenes(dataset, role):
        y = forward(cube, mask, noise, rng)
        save_measurement(out / f"{name}.meas.hsc", y)
        count += 1
    click.echo(f"💾 {count} measurements ({noise.describe()} noise) → {out}")


def _stage_rows(scene: str, trace: list, cube, shift_step: int) -> list[dict]:
    rows = []
    for rec in trace:
        row = {"scene": scene, "stage": rec.stage, "alpha": rec.alpha, "beta": rec.beta,
               "gamma": rec.gamma, "primal_residual": rec.primal_residual}
        if cube is not None:
            for key, data in (("x", rec.x), ("z", rec.z)):
                scores = evaluate(cube, unshift_cube(ShearedCube(data, shift_step)))
                row[f"{key}_psnr"], row[f"{key}_ssim"] = scores["psnr"], scores["ssim"]
        rows.append(row)
    return rows


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    columns = list(dict.fromkeys(k for row in rows for k in row))
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)


def _load_trained(checkpoint: str, config: RunConfig, requested: dict, bands: int):
    """Rebuild a trained network; flags given explicitly must agree with its config echo."""
    from .training import build_model, load_checkpoint

    ckpt = load_checkpoint(checkpoint)
    trained = ckpt.params.get("initial.conv.weight")
    if trained is not None and trained.shape[-1] != bands:
        raise ConfigError(f"checkpoint has bands={trained.shape[-1]}, dataset has bands={bands}")
    if ckpt.config is not None:
        for name, want in requested.items():
            have = getattr(ckpt.config.solver, name)
            if want is not None and str(want) != str(getattr(have, "value", have)):
                raise ConfigError(f"checkpoint has {name}={have}, requested {name}={want}")
        config = ckpt.config
    model = build_model(config, bands)
    model.load_state_dict(ckpt.params)
    return model


@cli.command()
@manifest_option
@click.option("--measurements", type=click.Path(file_okay=False),
              help="Directory of <scene>.meas.hsc from `cassi simulate` (default: simulate noiselessly)")
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Output directory")
@click.option("--checkpoint", type=click.Path(dir_okay=False), help="Trained network (.hsc)")
@click.option("--framework", type=click.Choice(FRAMEWORKS), default=None)
@click.option("--stages", type=int, default=None, help="Stage/iteration count")
@click.option("--denoiser", type=click.Choice(DENOISERS), default=None, help="Prior for classical solves")
@click.option("--tau", type=float, default=None, help="Penalty tau (classical)")
@click.option("--lam", type=float, default=None, help="Regularization weight lambda (classical)")
@click.option("--alpha", type=float, default=None, help="Fixed alpha for every stage")
@click.option("--beta", type=float, default=None, help="Fixed beta for every stage")
@click.option("--gamma", type=float, default=None, help="Fixed gamma for every stage (R2ADMM)")
@click.option("--role", type=click.Choice(ROLES), default="all", show_default=True)
@click.option("--png/--no-png", default=False, help="Also export false-colour previews")
@config_option
@seed_option
@click.pass_context
@handle_errors
def reconstruct(ctx, manifest, measurements, out, checkpoint, framework, stages, denoiser, tau, lam,
                alpha, beta, gamma, role, png, config_path, seed):
    """Reconstruct every scene; report PSNR/SSIM and per-stage diagnostics."""
    config = _load(config_path, seed, ctx.obj["data_dir"])
    config = apply_overrides(config, "solver", framework=framework, stages=stages, denoiser=denoiser,
                             tau=tau, lam=lam, alpha=alpha, beta=beta, gamma=gamma, checkpoint=checkpoint)
    sc = config.solver
    dataset = _manifest(manifest, config)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    kind = FrameworkKind.parse(sc.framework)

    model = None
    if sc.checkpoint:
        bands = next(iter(dataset.iter_cubes()))[1].bands
        model = _load_trained(sc.checkpoint, config, {"stages": stages, "framework": framework}, bands)
    elif sc.denoiser == "cmformer":
        raise ConfigError("the cmformer denoiser needs --checkpoint; use --denoiser soft|tv for classical solves")

    table = Table(title="Reconstruction", box=box.ROUNDED, show_header=True, header_style="bold cyan")
    for column in ("Scene", "Role", "PSNR (dB)", "SSIM", "Phi^T y PSNR", "Seconds"):
        table.add_column(column, justify="left" if column in ("Scene", "Role") else "right")
    metric_rows, stage_rows = [], []
    for split, name, cube, mask in _scenes(dataset, role):
        op = SensingOperator.from_mask(mask, cube.bands)
        if measurements:
            y = load_measurement(Path(measurements) / f"{name}.meas.hsc")
        else:
            y = forward(cube, mask)
        trace: list = []
        start = time.perf_counter()
        if model is not None:
            sheared = model.reconstruct(y, op, trace=trace)
        else:
            prox = SoftThreshold() if sc.denoiser == "soft" else TVDenoiser(sc.tv_iters)
            a = sc.alpha if sc.alpha is not None else sc.tau
            b = sc.beta if sc.beta is not None else (sc.tau / sc.lam if sc.lam > 0 else np.inf)
            g = sc.gamma if sc.gamma is not None else 1.0
            params = StageParams.constant(sc.stages, a, b, g, dtype=y.data.dtype)
            sheared = run_unfold(kind, sc.stages, prox, y, op, params, trace=trace)
        seconds = time.perf_counter() - start
        estimate = unshift_cube(sheared, cube.wavelengths)
        save_cube(out / f"{name}.recon.hsc", estimate)
        if png:
            export_false_color(estimate, default_band_triplet(estimate.bands), out / f"{name}.png")
        scores = evaluate(cube, estimate)
        baseline = evaluate(cube, unshift_cube(apply_phi_t(y, op)))["psnr"]
        metric_rows.append({"scene": name, "psnr": scores["psnr"], "ssim": scores["ssim"],
                            "seconds": seconds})
        stage_rows.extend(_stage_rows(name, trace, cube, op.shift_step))
        table.add_row(name, split, f"{scores['psnr']:.2f}", f"{scores['ssim']:.4f}",
                      f"{baseline:.2f}", f"{seconds:.2f}")

    _write_csv(out / "metrics.csv", metric_rows)
    _write_csv(out / "stages.csv", stage_rows)
    console.print(table)
    click.echo(f"✅ {len(metric_rows)} scenes reconstructed → {out}")


@cli.command()
@manifest_option
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Run directory")
@click.option("--epochs", type=int, default=None)
@click.option("--steps-per-epoch", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--crop", type=int, default=None)
@click.option("--lr", type=float, default=None, help="Initial learning rate (default 4e-4)")
@click.option("--stages", type=int, default=None)
@click.option("--framework", type=click.Choice(FRAMEWORKS), default=None)
@click.option("--channels", type=int, default=None, help="CMFormer base width C")
@click.option("--blocks", type=int, nargs=3, default=None, help="CABs per level, e.g. 1 1 3")
@click.option("--kernel-size", type=int, default=None, help="CMB depthwise kernel k")
@click.option("--ffn", "ffn_variant", type=click.Choice(FFN_VARIANTS), default=None)
@click.option("--no-cmb", "no_cmb", is_flag=True, default=False, help="Remove the CMB branch")
@click.option("--no-cab", "no_cab", is_flag=True, default=False, help="Build CMFormer without any CAB")
@click.option("--drop-path", type=float, nargs=2, default=None, help="CDPR BDPR")
@click.option("--fix-alpha", is_flag=True, help="Do not learn alpha (fixed at 1)")
@click.option("--fix-beta", is_flag=True, help="Do not learn beta (fixed at 1)")
@click.option("--fix-gamma", is_flag=True, help="Do not learn gamma (fixed at 0)")
@click.option("--precision", type=click.Choice(["float32", "float64"]), default=None)
@click.option("--resume", type=click.Path(dir_okay=False), help="Continue from a checkpoint")
@config_option
@seed_option
@click.pass_context
@handle_errors
def train(ctx, manifest, out, epochs, steps_per_epoch, batch_size, crop, lr, stages, framework,
          channels, blocks, kernel_size, ffn_variant, no_cmb, no_cab, drop_path, fix_alpha, fix_beta,
          fix_gamma, precision, resume, config_path, seed):
    """Train an unfolded network end to end (l1 loss, Adam, cosine schedule)."""
    from .training import TrainingData, build_model, train_loop

    config = _load(config_path, seed, ctx.obj["data_dir"])
    config = apply_overrides(config, "train", epochs=epochs, steps_per_epoch=steps_per_epoch,
                             batch_size=batch_size, crop=crop, lr=lr, precision=precision,
                             drop_path=drop_path or None)
    config = apply_overrides(config, "solver", stages=stages, framework=framework, denoiser="cmformer",
                             learn_alpha=False if fix_alpha else None,
                             learn_beta=False if fix_beta else None,
                             learn_gamma=False if fix_gamma else None)
    config = apply_overrides(config, "model", channels=channels, blocks=blocks or None,
                             kernel_size=kernel_size, ffn_variant=ffn_variant,
                             use_cmb=False if no_cmb else None,
                             use_cab=False if no_cab else None)
    data = TrainingData.from_manifest(_manifest(manifest, config))
    model = build_model(config, data.bands)
    counts = count_parameters(model)
    click.echo(f"🧮 {config.solver.framework} x{config.solver.stages}: {counts['total']:,} parameters")

    total_steps = config.train.epochs * config.train.steps_per_epoch
    with Progress(TextColumn("[bold blue]training"), BarColumn(), TextColumn("{task.completed}/{task.total}"),
                  TextColumn("l1 {task.fields[loss]:.5f}"), TimeRemainingColumn(), console=console,
                  transient=True) as progress:
        task = progress.add_task("train", total=total_steps, loss=float("nan"))
        result = train_loop(model, data, config, out, resume=resume,
                            on_step=lambda step, loss: progress.update(task, completed=step + 1, loss=loss))
    if result.epochs:
        last = result.epochs[-1]
        click.echo(f"✅ epoch {last['epoch']}: l1 {last['train_l1']:.5f}, val PSNR {last['val_psnr']:.2f} dB")
    click.echo(f"💾 best → {result.best_path}")
    click.echo(f"💾 last → {result.last_path}")
    click.echo(f"📋 log → {result.log_path}")


@cli.command()
@click.argument("suite", type=click.Choice(list(SUITES) + ["all"]))
@seed_option
@handle_errors
def verify(suite, seed):
    """Run a property suite at 64-bit and report every check."""
    names = list(SUITES) if suite == "all" else [suite]
    table = Table(title=f"verify {suite}", box=box.ROUNDED, show_header=True, header_style="bold cyan")
    table.add_column("Check")
    table.add_column("Max error", justify="right")
    table.add_column("Tolerance", justify="right")
    table.add_column("Seconds", justify="right")
    table.add_column("Status")
    failures = 0
    for name in names:
        for result in run_suite(name, 42 if seed is None else seed):
            failures += not result.passed
            table.add_row(result.name, f"{result.max_error:.3e}", f"{result.tolerance:.0e}",
                          f"{result.seconds:.2f}", "✅" if result.passed else "❌")
    console.print(table)
    if failures:
        click.echo(f"❌ {failures} check(s) failed", err=True)
        sys.exit(1)
    click.echo("✅ all checks passed")


@cli.command()
@click.option("--bands", default=28, show_default=True)
@click.option("--checkpoint", type=click.Path(dir_okay=False), help="Summarize a trained network")
@click.option("--framework", type=click.Choice(FRAMEWORKS), default=None)
@click.option("--stages", type=int, default=None)
@click.option("--channels", type=int, default=None)
@click.option("--kernel-size", type=int, default=None)
@click.option("--ffn-expansion", type=int, default=None)
@click.option("--no-cab", "no_cab", is_flag=True, default=False, help="Count CMFormer without any CAB")
@config_option
@handle_errors
def info(bands, checkpoint, framework, stages, channels, kernel_size, ffn_expansion, no_cab, config_path):
    """Parameter breakdown per component of an unfolded network."""
    from .training import build_model, load_checkpoint

    config = load_config(config_path)
    if checkpoint:
        ckpt = load_checkpoint(checkpoint)
        config = ckpt.config or config
    config = apply_overrides(config, "solver", framework=framework, stages=stages, denoiser="cmformer")
    config = apply_overrides(config, "model", channels=channels, kernel_size=kernel_size,
                             ffn_expansion=ffn_expansion, use_cab=False if no_cab else None)
    counts = count_parameters(build_model(config, bands))
    table = Table(title=f"{config.solver.framework} x{config.solver.stages}, C={config.model.channels}, "
                        f"k={config.model.kernel_size}, {bands} bands",
                  box=box.ROUNDED, show_header=True, header_style="bold cyan")
    table.add_column("Component")
    table.add_column("Parameters", justify="right")
    for name, count in counts.items():
        table.add_row(name, f"{count:,}")
    console.print(table)


def main():
    cli()


if __name__ == "__main__":
    main()
