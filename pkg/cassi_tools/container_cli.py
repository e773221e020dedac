#!/usr/bin/env python3
"""
hsc-tool: inspect and convert HSC1 tensor containers.

Usage:
    hsc-tool info scene_000.hsc
    hsc-tool stats scene_000.hsc --record cube
    hsc-tool export scene_000.hsc preview.png --bands 3,2,0
    hsc-tool params runs/tiny/best.hsc
"""

import sys
from pathlib import Path
from typing import Optional, Sequence

import click
import numpy as np
from rich import box
from rich.console import Console
from rich.table import Table

from .data_io import default_band_triplet, export_false_color, load_cube, read_container
from .errors import CassiError

console = Console()


def _bands(value) -> Optional[tuple]:
    if value is None:
        return None
    if isinstance(value, str):
        value = [v for v in value.split(",") if v.strip()]
    return tuple(int(v) for v in value)


class ContainerCLI:
    """Subcommands over .hsc files."""

    def _read(self, path: str) -> dict:
        try:
            return read_container(path)
        except CassiError as e:
            click.echo(f"❌ {e}", err=True)
            sys.exit(1)

    def info(self, path: str):
        """List every record: name, dtype and shape."""
        records = self._read(path)
        table = Table(title=Path(path).name, box=box.ROUNDED, show_header=True, header_style="bold cyan")
        table.add_column("Record", style="green")
        table.add_column("Dtype", style="yellow")
        table.add_column("Shape")
        table.add_column("Elements", justify="right")
        for name, array in records.items():
            table.add_row(name, str(array.dtype), " x ".join(map(str, array.shape)) or "scalar",
                          f"{array.size:,}")
        console.print(table)

    def stats(self, path: str, record: Optional[str] = None):
        """Min/max/mean/std per record (or just ``record``)."""
        records = self._read(path)
        if record is not None:
            if record not in records:
                click.echo(f"❌ no record {record!r}; found: {', '.join(records)}", err=True)
                sys.exit(1)
            records = {record: records[record]}
        table = Table(title=f"📊 {Path(path).name}", box=box.ROUNDED, show_header=True,
                      header_style="bold cyan")
        for column in ("Record", "Min", "Max", "Mean", "Std"):
            table.add_column(column, justify="left" if column == "Record" else "right")
        for name, array in records.items():
            if array.size == 0:
                table.add_row(name, "-", "-", "-", "-")
                continue
            table.add_row(name, f"{array.min():.4g}", f"{array.max():.4g}",
                          f"{array.mean():.4g}", f"{array.std():.4g}")
        console.print(table)

    def export(self, path: str, out: str, bands: Optional[Sequence[int]] = None):
        """Write a false-colour PNG of a cube; ``bands`` picks the R,G,B band indices."""
        try:
            cube = load_cube(path)
            triplet = _bands(bands) or default_band_triplet(cube.bands)
            written = export_false_color(cube, triplet, out)
        except CassiError as e:
            click.echo(f"❌ {e}", err=True)
            sys.exit(1)
        click.echo(f"💾 bands {triplet} → {written}")

    def params(self, path: str):
        """Parameter counts of a training checkpoint, grouped by component."""
        records = self._read(path)
        groups: dict[str, int] = {}
        for key, array in records.items():
            if not key.startswith("param/"):
                continue
            parts = key[len("param/"):].split(".")
            group = ".".join(parts[:2]) if parts[0] == "denoisers" else parts[0]
            groups[group] = groups.get(group, 0) + int(array.size)
        if not groups:
            click.echo(f"⚠️  {path} holds no param/ records", err=True)
            sys.exit(1)
        table = Table(title=f"📋 {Path(path).name}", box=box.ROUNDED, show_header=True,
                      header_style="bold cyan")
        table.add_column("Component")
        table.add_column("Parameters", justify="right")
        for name, count in groups.items():
            table.add_row(name, f"{count:,}")
        table.add_row("total", f"{sum(groups.values()):,}", style="bold")
        console.print(table)
        return int(np.sum(list(groups.values())))


def main():
    """Main entry point using fire."""
    import fire

    fire.Fire(ContainerCLI)


if __name__ == "__main__":
    main()
