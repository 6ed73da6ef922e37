"""Image files, dataset manifests, saliency/rank containers and renders.

PGM (P5) is the canonical grayscale format; PNG is read through Pillow and
used for renders. Saliency and rank grids share one container: a single JSON
header line followed by the raw little-endian grid.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .data import Dataset
from .errors import ShapeError

# ---------------------------------------------------------------------------
# grayscale images


def _pgm_tokens(raw: bytes, count: int):
    """Header tokens of a PGM file and the offset of the pixel data."""
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        tokens.append(raw[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    """Binary PGM (P5) as float64 in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens, offset = _pgm_tokens(raw, 4)
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: only binary PGM (P5) is supported")
    width, height, maxval = (int(t) for t in tokens[1:])
    if not 0 < maxval < 65536:
        raise ValueError(f"{path}: bad maxval {maxval}")
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    n = width * height
    data = np.frombuffer(raw, dtype=dtype, count=n, offset=offset)
    return data.reshape(height, width).astype(np.float64) / maxval


def quantize(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, values: np.ndarray) -> None:
    """8-bit P5 file; ``values`` in [0, 1] (uint8 arrays are written as-is)."""
    arr = np.asarray(values)
    data = arr if arr.dtype == np.uint8 else quantize(arr)
    if data.ndim != 2:
        raise ShapeError(f"PGM needs a 2-D grid, got {data.shape}")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data).tobytes())


def read_image(path) -> np.ndarray:
    suffix = Path(path).suffix.lower()
    if suffix in (".pgm", ".pnm"):
        return read_pgm(path)
    if suffix == ".png":
        with Image.open(path) as im:
            if im.mode not in ("L", "1"):
                raise ValueError(f"{path}: expected an 8-bit grayscale PNG, got mode {im.mode}")
            return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    raise ValueError(f"{path}: unsupported image format {suffix!r}")


def write_png(path, pixels: np.ndarray) -> None:
    """uint8 ``(H, W)`` grayscale or ``(H, W, 3)`` RGB."""
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        raise TypeError("write_png expects uint8 pixels")
    mode = "L" if arr.ndim == 2 else "RGB"
    # fixed encoder settings keep output byte-identical across runs
    Image.fromarray(arr, mode=mode).save(path, format="PNG", optimize=False, compress_level=6)


def resize_bilinear(image: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resampling with half-pixel centres and edge clamping."""
    src = np.asarray(image, dtype=np.float64)
    h_in, w_in = src.shape
    h_out, w_out = shape
    if (h_in, w_in) == (h_out, w_out):
        return src.copy()

    def coords(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = coords(h_in, h_out)
    c0, c1, fc = coords(w_in, w_out)
    # a + t * (b - a) keeps constant images exactly constant
    top = src[r0][:, c0] + fc * (src[r0][:, c1] - src[r0][:, c0])
    bot = src[r1][:, c0] + fc * (src[r1][:, c1] - src[r1][:, c0])
    return top + fr[:, None] * (bot - top)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestEntry:
    image: str
    label: int
    mask: str | None = None


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]
    class_names: list[str] = field(default_factory=list)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "entries": [
                {"image": e.image, "label": e.label, **({"mask": e.mask} if e.mask else {})}
                for e in self.entries
            ],
        }


def write_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=1) + "\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    names = [str(n) for n in doc.get("class_names", [])]
    entries = []
    for raw in doc.get("entries", []):
        label = raw["label"]
        if isinstance(label, str):
            if label not in names:
                raise ValueError(f"unknown label {label!r}")
            label = names.index(label)
        entries.append(ManifestEntry(raw["image"], int(label), raw.get("mask")))
    return DatasetManifest(path.parent, entries, names)


def load_dataset(manifest: DatasetManifest, input_shape: tuple[int, int] | None = None) -> Dataset:
    """Decode every entry to [0, 1]; resize to ``input_shape`` when given."""
    if not manifest.entries:
        raise ValueError("manifest has no entries")
    n_classes = len(manifest.class_names)
    images, labels, masks = [], [], []
    have_masks = all(e.mask for e in manifest.entries)
    for e in manifest.entries:
        if e.label < 0 or (n_classes and e.label >= n_classes):
            raise ValueError(f"{e.image}: label {e.label} outside the declared classes")
        img = read_image(manifest.resolve(e.image))
        mask = None
        if e.mask:
            mask = read_image(manifest.resolve(e.mask)) > 0.5
            if mask.shape != img.shape:
                raise ShapeError(f"{e.mask}: mask {mask.shape} does not match image {img.shape}")
        if input_shape is not None and img.shape != tuple(input_shape):
            img = resize_bilinear(img, input_shape)
            if mask is not None:
                mask = resize_bilinear(mask.astype(np.float64), input_shape) >= 0.5
        if images and img.shape != images[0].shape:
            raise ShapeError(f"{e.image}: size {img.shape} differs from {images[0].shape}")
        images.append(img)
        labels.append(e.label)
        masks.append(mask)
    names = manifest.class_names or [str(i) for i in range(max(labels) + 1)]
    return Dataset(np.stack(images), np.array(labels), np.stack(masks) if have_masks else None, names)


# ---------------------------------------------------------------------------
# saliency / rank containers


def _write_grid(path, header: dict, grid: np.ndarray, dtype: str) -> None:
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(grid, dtype=dtype).tobytes())


def _read_grid(path, dtype: str):
    raw = Path(path).read_bytes()
    newline = raw.index(b"\n")
    header = json.loads(raw[:newline].decode("utf-8"))
    shape = [header["height"], header["width"]]
    if header.get("channels"):
        shape.insert(0, header["channels"])
    grid = np.frombuffer(raw[newline + 1:], dtype=dtype).reshape(shape)
    return header, grid


def save_saliency(path, smap) -> None:
    """One JSON header line, then the map as little-endian float32."""
    values = np.asarray(smap.values)
    header = {
        "width": int(values.shape[-1]),
        "height": int(values.shape[-2]),
        "method": smap.method,
        "m": smap.steps,
        "seed": smap.seed,
        "target_class": smap.target_class,
        "completeness_gap": smap.completeness_gap,
        "baseline": smap.baseline,
        "dtype": "<f4",
    }
    if values.ndim == 3:
        header["channels"] = int(values.shape[0])
    _write_grid(path, header, values, "<f4")


def load_saliency(path):
    from .attribution import SaliencyMap

    header, grid = _read_grid(path, "<f4")
    return SaliencyMap(
        values=grid.astype(np.float64),
        method=header["method"],
        steps=header["m"],
        baseline=header.get("baseline"),
        target_class=header["target_class"],
        completeness_gap=header.get("completeness_gap"),
        seed=header.get("seed"),
    )


def save_rank_map(path, rank_map) -> Path:
    """int32 rank grid in the saliency container plus a sibling JSON gain table."""
    ranks = np.asarray(rank_map.ranks)
    header = {"width": int(ranks.shape[1]), "height": int(ranks.shape[0]), "method": "xrai", "dtype": "<i4"}
    _write_grid(path, header, ranks, "<i4")
    table = Path(path).with_suffix(".json")
    table.write_text(json.dumps({"regions": rank_map.table()}, indent=1) + "\n")
    return table


def load_rank_grid(path) -> np.ndarray:
    _, grid = _read_grid(path, "<i4")
    return grid.astype(np.int64)


# ---------------------------------------------------------------------------
# renders


def heatmap_pixels(values: np.ndarray) -> np.ndarray:
    """8-bit grayscale of |a| with linear min-max normalisation."""
    mag = np.abs(np.asarray(values, dtype=np.float64))
    if mag.ndim == 3:
        mag = mag.sum(axis=0)
    lo, hi = mag.min(), mag.max()
    if hi <= lo:
        return np.zeros(mag.shape, dtype=np.uint8)
    return np.round((mag - lo) / (hi - lo) * 255.0).astype(np.uint8)


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with a 4-neighbour outside the mask (off-grid counts as outside)."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    inner = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return m & ~inner


def overlay_pixels(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=0)
    if img.shape != np.shape(mask):
        raise ShapeError(f"image {img.shape} and mask {np.shape(mask)} differ")
    gray = quantize(img)
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    rgb[boundary_pixels(mask)] = (255, 0, 0)
    return rgb


def render_overlay(image: np.ndarray, mask: np.ndarray, path=None) -> np.ndarray:
    """Grayscale image with the mask's 1-px boundary drawn in red."""
    rgb = overlay_pixels(image, mask)
    if path is not None:
        write_png(path, rgb)
    return rgb


def render_heatmap(values: np.ndarray, path=None) -> np.ndarray:
    pixels = heatmap_pixels(values)
    if path is not None:
        write_png(path, pixels)
    return pixels


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
