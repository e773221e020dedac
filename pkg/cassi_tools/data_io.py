"""
HSC1 containers, dataset manifests, false-colour export and synthetic scenes.

An HSC1 file is a header followed by named records:

    magic "HSC1" | version u32 | record count u32
    per record: name length u16 | name utf-8 | rank u32 | dims rank x u64
                | dtype tag u8 (1 = f32, 2 = f64) | payload

All integers and payload values are little-endian; payloads are row-major
(last axis fastest). A single tensor is a container with one record named
``data``. See docs/hsc1-format.md.
"""

from __future__ import annotations

import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np
import yaml
from PIL import Image
from scipy import ndimage

from .cassi_model import CodedMask, HsiCube, Measurement, default_wavelengths
from .errors import DimensionError, FormatError, ManifestError

log = logging.getLogger(__name__)

MAGIC = b"HSC1"
VERSION = 1
MAX_RANK = 4
MAX_ELEMENTS = 1 << 40

_DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAG_OF = {np.dtype("float32"): 1, np.dtype("float64"): 2}

PathLike = Union[str, Path]


# ----------------------------------------------------------------------------
# Containers
# ----------------------------------------------------------------------------

def _encode_record(name: str, array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype not in _TAG_OF:
        array = array.astype(np.float64)
    if array.ndim > MAX_RANK:
        raise DimensionError(f"record {name!r} has rank {array.ndim} > {MAX_RANK}", axis="rank")
    raw_name = name.encode("utf-8")
    tag = _TAG_OF[array.dtype]
    head = struct.pack("<H", len(raw_name)) + raw_name
    head += struct.pack(f"<I{array.ndim}Q", array.ndim, *array.shape)
    head += struct.pack("<B", tag)
    return head + np.ascontiguousarray(array, dtype=_DTYPE_TAGS[tag]).tobytes()


def encode_container(records: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(records))]
    parts.extend(_encode_record(name, array) for name, array in records.items())
    return b"".join(parts)


def _unpack(fmt: str, buf: bytes, offset: int, what: str) -> tuple:
    size = struct.calcsize(fmt)
    if offset + size > len(buf):
        raise FormatError(f"truncated {what}", offset)
    return struct.unpack_from(fmt, buf, offset)


def decode_container(buf: bytes) -> dict[str, np.ndarray]:
    """Parse HSC1 bytes. Any defect raises FormatError with the byte offset."""
    if len(buf) < len(MAGIC):
        raise FormatError("file too short for HSC1 header", 0)
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", 0)
    version, count = _unpack("<II", buf, 4, "header")
    if version != VERSION:
        raise FormatError(f"unsupported HSC1 version {version}", 4)
    offset = 12
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = _unpack("<H", buf, offset, "record name length")
        offset += 2
        if offset + name_len > len(buf):
            raise FormatError("truncated record name", offset)
        try:
            name = buf[offset:offset + name_len].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("record name is not utf-8", offset) from None
        offset += name_len
        (rank,) = _unpack("<I", buf, offset, "rank")
        if rank > MAX_RANK:
            raise FormatError(f"record {name!r} has rank {rank} > {MAX_RANK}", offset)
        offset += 4
        dims = _unpack(f"<{rank}Q", buf, offset, "dims")
        count_elems = 1
        for d in dims:
            count_elems *= d
        if count_elems > MAX_ELEMENTS:
            raise FormatError(f"record {name!r} dims {dims} overflow", offset)
        offset += 8 * rank
        (tag,) = _unpack("<B", buf, offset, "dtype tag")
        if tag not in _DTYPE_TAGS:
            raise FormatError(f"unknown dtype tag {tag}", offset)
        offset += 1
        dtype = _DTYPE_TAGS[tag]
        nbytes = count_elems * dtype.itemsize
        if offset + nbytes > len(buf):
            raise FormatError(
                f"record {name!r} payload needs {nbytes} bytes, {len(buf) - offset} remain", offset
            )
        array = np.frombuffer(buf, dtype=dtype, count=count_elems, offset=offset).reshape(dims)
        records[name] = array.astype(dtype.newbyteorder("="), copy=True)
        offset += nbytes
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes after last record", offset)
    return records


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_container(path: PathLike, records: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    _atomic_write(path, encode_container(records))
    log.debug("wrote %s (%d records)", path, len(records))
    return path


def read_container(path: PathLike) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError:
        raise FormatError(f"{path}: no such file", 0) from None
    try:
        return decode_container(buf)
    except FormatError as e:
        raise FormatError(f"{path}: {e.args[0].rsplit(' (at byte', 1)[0]}", e.offset) from None


def save(path: PathLike, array: np.ndarray) -> Path:
    """Write one tensor as a single-record container."""
    return write_container(path, {"data": array})


def load(path: PathLike) -> np.ndarray:
    records = read_container(path)
    if "data" not in records:
        raise FormatError(f"{path}: no 'data' record (found {sorted(records)})", 0)
    return records["data"]


def save_cube(path: PathLike, cube: HsiCube) -> Path:
    return write_container(path, {
        "cube": cube.data,
        "wavelengths": np.asarray(cube.wavelengths, dtype=np.float64),
    })


def load_cube(path: PathLike) -> HsiCube:
    records = read_container(path)
    data = records.get("cube", records.get("data"))
    if data is None or data.ndim != 3:
        raise FormatError(f"{path}: no rank-3 cube record", 0)
    return HsiCube(data, tuple(records.get("wavelengths", ())))


def save_mask(path: PathLike, mask: CodedMask) -> Path:
    return write_container(path, {
        "mask": mask.base,
        "shift_step": np.asarray(mask.shift_step, dtype=np.float64),
    })


def load_mask(path: PathLike, shift_step: Optional[int] = None) -> CodedMask:
    records = read_container(path)
    base = records.get("mask", records.get("data"))
    if base is None or base.ndim != 2:
        raise FormatError(f"{path}: no rank-2 mask record", 0)
    if shift_step is None:
        shift_step = int(records["shift_step"]) if "shift_step" in records else 2
    return CodedMask(base, shift_step)


def save_measurement(path: PathLike, y: Measurement) -> Path:
    return write_container(path, {"measurement": y.data})


def load_measurement(path: PathLike) -> Measurement:
    records = read_container(path)
    data = records.get("measurement", records.get("data"))
    if data is None or data.ndim != 2:
        raise FormatError(f"{path}: no rank-2 measurement record", 0)
    return Measurement(data)


# ----------------------------------------------------------------------------
# Manifests
# ----------------------------------------------------------------------------

ROLES = ("train", "val", "test")
KINDS = ("cube", "mask")
GLOBAL = "all"


@dataclass
class ManifestEntry:
    path: str
    role: str
    kind: str

    @property
    def name(self) -> str:
        return Path(self.path).name.split(".")[0]


@dataclass
class DatasetManifest:
    """Ordered list of cube and mask files plus the dispersion step and band labels."""

    root: Path
    shift_step: int
    wavelengths: tuple
    entries: list = field(default_factory=list)

    @classmethod
    def load(cls, path: PathLike, check_files: bool = True) -> "DatasetManifest":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text())
        except FileNotFoundError:
            raise ManifestError(f"manifest not found: {path}") from None
        except yaml.YAMLError as e:
            raise ManifestError(f"{path}: invalid YAML: {e}") from None
        if not isinstance(raw, dict) or "entries" not in raw:
            raise ManifestError(f"{path}: expected a mapping with an 'entries' list")
        entries = []
        for i, item in enumerate(raw["entries"] or []):
            if not isinstance(item, dict) or "path" not in item or "kind" not in item:
                raise ManifestError(f"{path}: entry {i} needs 'path' and 'kind'")
            entries.append(ManifestEntry(str(item["path"]), str(item.get("role", GLOBAL)), str(item["kind"])))
        manifest = cls(
            root=path.parent,
            shift_step=int(raw.get("shift_step", 2)),
            wavelengths=tuple(float(w) for w in raw.get("wavelengths") or ()),
            entries=entries,
        )
        manifest.validate(check_files=check_files)
        return manifest

    def save(self, path: PathLike) -> Path:
        path = Path(path)
        doc = {
            "shift_step": self.shift_step,
            "wavelengths": list(self.wavelengths),
            "entries": [{"path": e.path, "role": e.role, "kind": e.kind} for e in self.entries],
        }
        path.write_text(yaml.safe_dump(doc, sort_keys=False))
        return path

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def validate(self, check_files: bool = True) -> None:
        if self.shift_step < 0:
            raise ManifestError(f"shift_step must be >= 0, got {self.shift_step}")
        for e in self.entries:
            if e.kind not in KINDS:
                raise ManifestError(f"{e.path}: kind must be one of {KINDS}, got {e.kind!r}")
            if e.role not in ROLES + (GLOBAL,):
                raise ManifestError(f"{e.path}: role must be one of {ROLES + (GLOBAL,)}, got {e.role!r}")
            if e.kind == "cube" and e.role == GLOBAL:
                raise ManifestError(f"{e.path}: cube entries need a split role")
        masks = [e for e in self.entries if e.kind == "mask"]
        global_masks = [e for e in masks if e.role == GLOBAL]
        if global_masks and len(masks) > 1:
            raise ManifestError("a global mask excludes any other mask entry")
        for role in self.roles():
            split_masks = [e for e in masks if e.role == role]
            if not global_masks and len(split_masks) != 1:
                raise ManifestError(
                    f"split {role!r} needs exactly one mask (found {len(split_masks)}) or one global mask"
                )
        if check_files:
            for e in self.entries:
                target = self.resolve(e)
                if not target.exists():
                    raise ManifestError(f"{e.kind} file missing: {target}")
                try:
                    read_container(target)
                except FormatError as err:
                    raise ManifestError(f"{e.kind} file unreadable: {err}") from None

    def roles(self) -> list[str]:
        seen = []
        for e in self.entries:
            if e.kind == "cube" and e.role not in seen:
                seen.append(e.role)
        return seen

    def cube_entries(self, role: Optional[str] = None) -> list[ManifestEntry]:
        return [e for e in self.entries if e.kind == "cube" and (role is None or e.role == role)]

    def iter_cubes(self, role: Optional[str] = None) -> Iterator[tuple[str, HsiCube]]:
        """(scene name, cube) in manifest order."""
        for e in self.cube_entries(role):
            cube = load_cube(self.resolve(e))
            if self.wavelengths and len(self.wavelengths) == cube.bands:
                cube = HsiCube(cube.data, self.wavelengths)
            yield e.name, cube

    def mask_for(self, role: str) -> CodedMask:
        masks = [e for e in self.entries if e.kind == "mask" and e.role in (role, GLOBAL)]
        if not masks:
            raise ManifestError(f"no mask for split {role!r}")
        return load_mask(self.resolve(masks[0]), self.shift_step)


# ----------------------------------------------------------------------------
# Export and synthesis
# ----------------------------------------------------------------------------

def false_color(cube: HsiCube, bands: Sequence[int]) -> np.ndarray:
    """H x W x 3 uint8 raster; [0, 1] maps linearly to [0, 255] with clamping."""
    if len(bands) != 3:
        raise DimensionError(f"need three band indices, got {len(bands)}", axis="bands")
    for b in bands:
        if not 0 <= b < cube.bands:
            raise DimensionError(f"band {b} out of range [0, {cube.bands})", axis="bands")
    rgb = np.clip(cube.data[:, :, list(bands)], 0.0, 1.0)
    return np.round(rgb * 255.0).astype(np.uint8)


def default_band_triplet(bands: int) -> tuple[int, int, int]:
    """Long, middle and short wavelength bands for an R/G/B preview."""
    return (bands - 1, bands // 2, 0)


def export_false_color(cube: HsiCube, bands: Sequence[int], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(false_color(cube, bands)).save(path, format="PNG")
    return path


def synth_cube(rng: np.random.Generator, height: int, width: int, bands: int,
               materials: int = 3) -> np.ndarray:
    """Smooth abundance fields mixed with smooth spectra, shaded by a common illumination."""
    positions = np.linspace(0.0, 1.0, bands)
    sigma = max(height, width) / 8.0
    spectra = []
    for _ in range(materials):
        centre = rng.uniform(0.0, 1.0)
        spread = rng.uniform(0.5, 1.0)
        spectra.append(0.2 + 0.8 * np.exp(-((positions - centre) ** 2) / (2.0 * spread ** 2)))
    fields = np.stack([
        ndimage.gaussian_filter(rng.random((height, width)), sigma=sigma, mode="wrap")
        for _ in range(materials)
    ], axis=-1)
    fields -= fields.min(axis=(0, 1), keepdims=True)
    fields /= np.maximum(fields.max(axis=(0, 1), keepdims=True), 1e-12)
    weights = np.exp(4.0 * fields)
    abundance = weights / weights.sum(axis=-1, keepdims=True)
    shading = ndimage.gaussian_filter(rng.random((height, width)), sigma=sigma, mode="wrap")
    shading = (shading - shading.min()) / max(np.ptp(shading), 1e-12) * 0.5 + 0.5
    cube = shading[:, :, None] * (abundance @ np.stack(spectra))
    return np.clip(cube, 0.0, 1.0)


def synth_dataset(out_dir: PathLike, seed: int = 42, scenes: int = 8, height: int = 32,
                  width: int = 32, bands: int = 4, shift_step: int = 1) -> Path:
    """Write deterministic synthetic cubes, one binary mask and ``manifest.yaml``.

    The last scene is the validation split when there is more than one.

    Returns:
        Path of the manifest.
    """
    if min(scenes, height, width, bands) < 1:
        raise DimensionError("scenes, height, width and bands must all be positive", axis="extent")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    wavelengths = default_wavelengths(bands)
    entries = []
    for i in range(scenes):
        cube = HsiCube(synth_cube(rng, height, width, bands), wavelengths)
        name = f"scene_{i:03d}.hsc"
        save_cube(out_dir / name, cube)
        role = "val" if scenes > 1 and i == scenes - 1 else "train"
        entries.append(ManifestEntry(name, role, "cube"))
    save_mask(out_dir / "mask.hsc", CodedMask.random_binary(height, width, shift_step, rng))
    entries.append(ManifestEntry("mask.hsc", GLOBAL, "mask"))
    manifest = DatasetManifest(out_dir, shift_step, wavelengths, entries)
    log.info("synthesized %d scenes of %dx%dx%d in %s", scenes, height, width, bands, out_dir)
    return manifest.save(out_dir / "manifest.yaml")
