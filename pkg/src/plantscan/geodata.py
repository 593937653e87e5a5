"""Dataset ingestion, georeferencing, masks, and synthetic data.

Images live in a directory per class: ``root/<class>/<image>.{png,ppm}``,
optionally with ``<image>.wld`` (6-line ESRI world file) and
``<image>.geojson`` (mask polygons) sidecars. Class index is the
lexicographic rank of the class directory name.

World-file convention: lines hold A, D, B, E, C, F where
x = A*col + B*row + C and y = D*col + E*row + F, and (C, F) is the map
coordinate of the CENTER of pixel (0, 0). Without a world file, mask
polygon coordinates are read as pixel-center coordinates (identity
georef). Rasterization marks a pixel iff its center lies inside a polygon
under the even-odd rule; holes subtract.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .seeding import make_rng

IMAGE_SUFFIXES = (".png", ".ppm")
AUGMENTATIONS = ("identity", "hflip", "vflip", "rot90", "rot180", "rot270")


# ------------------------------------------------------------- georeference

@dataclass
class AffineGeoref:
    """World-file affine: pixel (col, row) centers to map (x, y)."""

    a: float  # x per column
    d: float  # y per column
    b: float  # x per row
    e: float  # y per row
    c: float  # x of center of pixel (0, 0)
    f: float  # y of center of pixel (0, 0)

    def __post_init__(self):
        if self.determinant == 0.0:
            raise ValueError("degenerate georef: A*E - B*D must be nonzero")

    @property
    def determinant(self) -> float:
        return self.a * self.e - self.b * self.d

    @classmethod
    def identity(cls) -> "AffineGeoref":
        """Pixel-space georef: map coords equal (col, row)."""
        return cls(1.0, 0.0, 0.0, 1.0, 0.0, 0.0)

    def pixel_to_map(self, col, row):
        col = np.asarray(col, dtype=np.float64)
        row = np.asarray(row, dtype=np.float64)
        return self.a * col + self.b * row + self.c, self.d * col + self.e * row + self.f

    def map_to_pixel(self, x, y):
        x = np.asarray(x, dtype=np.float64) - self.c
        y = np.asarray(y, dtype=np.float64) - self.f
        det = self.determinant
        return (self.e * x - self.b * y) / det, (self.a * y - self.d * x) / det

    def coefficients(self) -> tuple[float, float, float, float, float, float]:
        """World-file line order."""
        return (self.a, self.d, self.b, self.e, self.c, self.f)


def read_world_file(path) -> AffineGeoref:
    values = []
    for line in Path(path).read_text(encoding="utf-8").split("\n"):
        line = line.strip()
        if line:
            values.append(float(line))
    if len(values) != 6:
        raise ValueError(f"world file {path} has {len(values)} values, expected 6")
    a, d, b, e, c, f = values
    return AffineGeoref(a, d, b, e, c, f)


def write_world_file(georef: AffineGeoref, path) -> None:
    text = "\n".join(repr(float(v)) for v in georef.coefficients()) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def scale_georef(georef: AffineGeoref, in_h: int, in_w: int,
                 out_h: int, out_w: int) -> AffineGeoref:
    """Georef of a corner-aligned bilinear resize of the referenced image.

    Output pixel (col', row') samples source pixel (col'*sx, row'*sy) with
    sx = (in_w-1)/(out_w-1); composing that with the affine is affine.
    """
    if out_h < 2 or out_w < 2 or in_h < 2 or in_w < 2:
        raise ValueError("scale_georef requires at least 2 pixels per axis")
    sx = (in_w - 1) / (out_w - 1)
    sy = (in_h - 1) / (out_h - 1)
    return AffineGeoref(georef.a * sx, georef.d * sx, georef.b * sy, georef.e * sy,
                        georef.c, georef.f)


# ------------------------------------------------------------------- images

def decode_image(path) -> np.ndarray:
    """Decode PNG or binary PPM to (H, W, 3) uint8."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def encode_png(pixels_u8: np.ndarray, path) -> None:
    Image.fromarray(pixels_u8, mode="RGB").save(path, format="PNG")


def resize_bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample, corner-aligned pixel-center convention.

    Output index i samples source coordinate i*(in-1)/(out-1), so the first
    and last pixel centers of each axis coincide with the source's. A
    1-pixel output axis samples the source midpoint.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    in_h, in_w = pixels.shape[:2]
    if (out_h, out_w) == (in_h, in_w):
        return pixels.copy()

    def coords(n_in, n_out):
        if n_out == 1:
            return np.full(1, (n_in - 1) / 2.0)
        return np.arange(n_out) * ((n_in - 1) / (n_out - 1))

    rows = coords(in_h, out_h)
    cols = coords(in_w, out_w)
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    r0 = np.minimum(r0, in_h - 1)
    c0 = np.minimum(c0, in_w - 1)
    r1 = np.minimum(r0 + 1, in_h - 1)
    c1 = np.minimum(c0 + 1, in_w - 1)
    fr = (rows - r0)[:, None, None]
    fc = (cols - c0)[None, :, None]

    src = pixels.astype(np.float64)
    out = (src[np.ix_(r0, c0)] * (1 - fr) * (1 - fc)
           + src[np.ix_(r0, c1)] * (1 - fr) * fc
           + src[np.ix_(r1, c0)] * fr * (1 - fc)
           + src[np.ix_(r1, c1)] * fr * fc)
    return out.astype(pixels.dtype) if np.issubdtype(pixels.dtype, np.floating) \
        else out.astype(np.float64)


# -------------------------------------------------------------------- tiles

@dataclass
class GeoTile:
    """One image tile: normalized pixels plus optional mask and georef."""

    pixels: np.ndarray                   # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray | None = None       # (H, W, 1) float32, values 0 or 1
    georef: AffineGeoref | None = None
    source: str = ""

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 3:
            raise ValueError(f"pixels must be (H, W, 3), got {p.shape}")
        if p.size and (float(p.min()) < 0.0 or float(p.max()) > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.mask is not None:
            m = self.mask
            if m.shape != (p.shape[0], p.shape[1], 1):
                raise ValueError(f"mask shape {m.shape} does not match pixels {p.shape}")
            if m.size and not np.all((m == 0.0) | (m == 1.0)):
                raise ValueError("mask values must be 0 or 1")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


# ------------------------------------------------------------- augmentation

def _augment_pixels(x: np.ndarray, op: str) -> np.ndarray:
    if op == "identity":
        return x.copy()
    if op == "hflip":
        return np.ascontiguousarray(np.flip(x, axis=1))
    if op == "vflip":
        return np.ascontiguousarray(np.flip(x, axis=0))
    if op.startswith("rot"):
        k = {"rot90": 1, "rot180": 2, "rot270": 3}[op]
        return np.ascontiguousarray(np.rot90(x, k, axes=(0, 1)))
    raise ValueError(f"unknown augmentation '{op}'")


def _source_index(op: str, h: int, w: int):
    """Map an output pixel (col', row') to its source pixel (col, row)."""
    if op == "identity":
        return lambda c, r: (c, r)
    if op == "hflip":
        return lambda c, r: (w - 1 - c, r)
    if op == "vflip":
        return lambda c, r: (c, h - 1 - r)
    if op == "rot90":      # out[i, j] = in[j, w-1-i]
        return lambda c, r: (w - 1 - r, c)
    if op == "rot180":
        return lambda c, r: (w - 1 - c, h - 1 - r)
    if op == "rot270":     # out[i, j] = in[h-1-j, i]
        return lambda c, r: (r, h - 1 - c)
    raise ValueError(f"unknown augmentation '{op}'")


def _augment_georef(georef: AffineGeoref, op: str, h: int, w: int) -> AffineGeoref:
    # the source-index map is affine in (col', row'); probing three points
    # recovers it, and composing with the old georef keeps every pixel's
    # map coordinate attached to the same image content.
    src = _source_index(op, h, w)
    c00, r00 = src(0, 0)
    c10, r10 = src(1, 0)
    c01, r01 = src(0, 1)
    m00, m10 = c10 - c00, r10 - r00   # d(col,row)/dcol'
    m01, m11 = c01 - c00, r01 - r00   # d(col,row)/drow'
    g = georef
    return AffineGeoref(
        a=g.a * m00 + g.b * m10,
        d=g.d * m00 + g.e * m10,
        b=g.a * m01 + g.b * m11,
        e=g.d * m01 + g.e * m11,
        c=g.a * c00 + g.b * r00 + g.c,
        f=g.d * c00 + g.e * r00 + g.f,
    )


def augment_array(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Seeded random choice among the six augmentations, array-only path.

    90/270-degree rotations swap height and width; callers batching
    augmented arrays should use square tiles.
    """
    return _augment_pixels(x, AUGMENTATIONS[int(rng.integers(len(AUGMENTATIONS)))])


def apply_augmentation(tile: GeoTile, op: str) -> GeoTile:
    """One named augmentation, transforming pixels, mask, and georef alike."""
    georef = None
    if tile.georef is not None:
        georef = _augment_georef(tile.georef, op, tile.height, tile.width)
    return GeoTile(
        pixels=_augment_pixels(tile.pixels, op),
        mask=None if tile.mask is None else _augment_pixels(tile.mask, op),
        georef=georef,
        source=tile.source,
    )


def augment(tile: GeoTile, seed: int) -> GeoTile:
    """Seeded random choice among {identity, flips, 90/180/270 rotations}."""
    rng = make_rng(seed)
    return apply_augmentation(tile, AUGMENTATIONS[int(rng.integers(len(AUGMENTATIONS)))])


# ---------------------------------------------------------------- rasterize

def geojson_polygons(doc) -> list[dict]:
    """Extract Polygon/MultiPolygon geometry dicts from any GeoJSON document."""
    kind = doc.get("type")
    if kind == "FeatureCollection":
        out = []
        for feat in doc.get("features", []):
            out.extend(geojson_polygons(feat))
        return out
    if kind == "Feature":
        geom = doc.get("geometry")
        return geojson_polygons(geom) if geom else []
    if kind == "GeometryCollection":
        out = []
        for geom in doc.get("geometries", []):
            out.extend(geojson_polygons(geom))
        return out
    if kind in ("Polygon", "MultiPolygon"):
        return [doc]
    raise ValueError(f"unsupported GeoJSON type: {kind!r}")


def _ring_vertices(ring) -> np.ndarray:
    pts = np.asarray(ring, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] < 2:
        raise ValueError("polygon ring must be a list of [x, y] points")
    pts = pts[:, :2]
    if len(pts) > 1 and np.array_equal(pts[0], pts[-1]):
        pts = pts[:-1]  # drop GeoJSON's closing duplicate
    if len(pts) < 3:
        raise ValueError(f"degenerate ring with {len(pts)} distinct points")
    return pts


def _polygon_coord_lists(geometries) -> list[list]:
    polys = []
    for geom in geometries:
        if geom.get("type") == "Polygon":
            polys.append(geom["coordinates"])
        elif geom.get("type") == "MultiPolygon":
            polys.extend(geom["coordinates"])
        else:
            raise ValueError(f"unsupported geometry type: {geom.get('type')!r}")
    return polys


def rasterize_mask(geometries, georef: AffineGeoref, height: int, width: int) -> np.ndarray:
    """(H, W, 1) float32 mask: 1 where the pixel center falls inside any polygon.

    Even-odd rule over all rings of a polygon, so holes subtract; separate
    polygons union.
    """
    cols, rows = np.meshgrid(np.arange(width, dtype=np.float64),
                             np.arange(height, dtype=np.float64))
    px, py = georef.pixel_to_map(cols.ravel(), rows.ravel())
    inside_any = np.zeros(px.shape, dtype=bool)
    for rings in _polygon_coord_lists(geometries):
        parity = np.zeros(px.shape, dtype=bool)
        for ring in rings:
            verts = _ring_vertices(ring)
            nxt = np.roll(verts, -1, axis=0)
            for (x1, y1), (x2, y2) in zip(verts, nxt):
                straddles = (y1 > py) != (y2 > py)
                if not straddles.any():
                    continue
                xi = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
                parity ^= straddles & (px < xi)
        inside_any |= parity
    return inside_any.reshape(height, width, 1).astype(np.float32)


def load_mask(geojson_path, georef: AffineGeoref, height: int, width: int) -> np.ndarray:
    with open(geojson_path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return rasterize_mask(geojson_polygons(doc), georef, height, width)


# ------------------------------------------------------------------ dataset

@dataclass
class LabeledDataset:
    samples: list[tuple[GeoTile, int]]
    class_names: list[str]
    split_of: list[str] = field(default_factory=list)  # aligned with samples
    skipped: int = 0

    def __post_init__(self):
        if len(self.split_of) != len(self.samples):
            raise ValueError("split assignment must cover every sample")
        for _, label in self.samples:
            if not 0 <= label < len(self.class_names):
                raise ValueError(f"class index {label} out of range")

    def split(self, name: str) -> list[tuple[GeoTile, int]]:
        return [s for s, where in zip(self.samples, self.split_of) if where == name]

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for where in self.split_of:
            out[where] = out.get(where, 0) + 1
        return out

    def arrays(self, split: str, mask_channel: bool = False):
        """(x, labels) for a split; mask_channel appends the mask as a 4th band."""
        chosen = self.split(split)
        if not chosen:
            h = w = 0
            c = 4 if mask_channel else 3
            return (np.zeros((0, h, w, c), dtype=np.float32),
                    np.zeros(0, dtype=np.int64))
        xs = []
        for tile, _ in chosen:
            if mask_channel:
                mask = tile.mask
                if mask is None:
                    mask = np.zeros((tile.height, tile.width, 1), dtype=np.float32)
                xs.append(np.concatenate([tile.pixels, mask], axis=2))
            else:
                xs.append(tile.pixels)
        labels = np.array([label for _, label in chosen], dtype=np.int64)
        return np.stack(xs).astype(np.float32), labels


def _split_assignment(n: int, fractions, seed: int) -> list[str]:
    if len(fractions) != 3:
        raise ValueError("split_fractions must be (train, val, test)")
    if min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-6:
        raise ValueError(f"split fractions must be non-negative and sum to 1: {fractions}")
    n_train = round(fractions[0] * n)
    n_val = round(fractions[1] * n)
    if n_train + n_val > n:
        n_val = n - n_train
    order = make_rng(seed).permutation(n)
    names = [""] * n
    for pos, sample_idx in enumerate(order):
        if pos < n_train:
            names[sample_idx] = "train"
        elif pos < n_train + n_val:
            names[sample_idx] = "val"
        else:
            names[sample_idx] = "test"
    return names


def load_dataset(root_dir, split_fractions=(0.7, 0.15, 0.15), seed: int = 42,
                 image_size: tuple[int, int] | None = None) -> LabeledDataset:
    """Read a directory-per-class image tree into a split LabeledDataset.

    Class index is the lexicographic rank of the class directory name.
    Undecodable files are skipped with a warning and counted in `skipped`.
    """
    root = Path(root_dir)
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise ValueError(f"no class directories under {root}")
    class_names = [d.name for d in class_dirs]

    samples: list[tuple[GeoTile, int]] = []
    skipped = 0
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir()
                       if p.suffix.lower() in IMAGE_SUFFIXES)
        for path in files:
            try:
                raw = decode_image(path)
            except Exception as exc:  # undecodable input file
                warnings.warn(f"skipping unreadable image {path}: {exc}", stacklevel=2)
                skipped += 1
                continue
            pixels = raw.astype(np.float32) / 255.0
            in_h, in_w = pixels.shape[:2]

            wld = path.with_suffix(".wld")
            georef = read_world_file(wld) if wld.exists() else None

            out_h, out_w = image_size if image_size is not None else (in_h, in_w)
            if (out_h, out_w) != (in_h, in_w):
                pixels = resize_bilinear(pixels, out_h, out_w).astype(np.float32)
            np.clip(pixels, 0.0, 1.0, out=pixels)

            # masks are rasterized at the final resolution so they stay binary
            mask_georef = georef if georef is not None else AffineGeoref.identity()
            if (out_h, out_w) != (in_h, in_w):
                mask_georef = scale_georef(mask_georef, in_h, in_w, out_h, out_w)
            gj = path.with_suffix(".geojson")
            mask = load_mask(gj, mask_georef, out_h, out_w) if gj.exists() else None

            final_georef = mask_georef if georef is not None else None
            samples.append((GeoTile(pixels, mask, final_georef, str(path)), label))

    if image_size is None:
        shapes = {s[0].pixels.shape for s in samples}
        if len(shapes) > 1:
            raise ValueError(f"images have mixed sizes {sorted(shapes)}; "
                             "pass image_size to resize")
    split_of = _split_assignment(len(samples), split_fractions, seed)
    return LabeledDataset(samples, class_names, split_of, skipped)


# ---------------------------------------------------------------- synthetic

SYNTHETIC_CLASSES = ("blobs", "gradients", "grids", "stripes")
_CLASS_COLOR = {
    "blobs": (0.85, 0.35, 0.30),
    "gradients": (0.30, 0.75, 0.40),
    "grids": (0.35, 0.45, 0.85),
    "stripes": (0.85, 0.80, 0.30),
}
_CLASS_MASK_FRACTION = {
    "blobs": 0.10,
    "gradients": 0.32,
    "grids": 0.55,
    "stripes": 0.78,
}


def _texture(class_name: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    if class_name == "blobs":
        base = np.zeros((size, size))
        for _ in range(6):
            cy, cx = rng.uniform(0.15, 0.85, size=2)
            s = rng.uniform(0.05, 0.11)
            base += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        base = np.clip(base / base.max(), 0.0, 1.0)
    elif class_name == "gradients":
        theta = rng.uniform(0.0, 2.0 * np.pi)
        base = np.cos(theta) * xx + np.sin(theta) * yy
        base = (base - base.min()) / (base.max() - base.min())
    elif class_name == "grids":
        period = int(rng.integers(6, 11))
        ph_r = int(rng.integers(period))
        ph_c = int(rng.integers(period))
        line_r = ((np.arange(size) + ph_r) % period) < 2
        line_c = ((np.arange(size) + ph_c) % period) < 2
        base = (line_r[:, None] | line_c[None, :]).astype(np.float64)
    elif class_name == "stripes":
        period = rng.uniform(6.0, 10.0)
        theta = rng.uniform(0.0, np.pi)
        t = (np.cos(theta) * xx + np.sin(theta) * yy) * (size - 1)
        base = 0.5 + 0.5 * np.sin(2.0 * np.pi * t / period)
    else:
        raise ValueError(f"no texture recipe for class '{class_name}'")
    color = np.asarray(_CLASS_COLOR[class_name])
    img = 0.15 + 0.75 * base[:, :, None] * color[None, None, :]
    img += rng.normal(0.0, 0.03, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _mask_rectangle(class_name: str, size: int, rng: np.random.Generator):
    """Centered square pixel bounds (r0, r1, c0, c1) with seeded jitter."""
    side = int(round(np.sqrt(_CLASS_MASK_FRACTION[class_name]) * size))
    side = max(2, min(side, size - 4))
    r0 = (size - side) // 2 + int(rng.integers(-2, 3))
    c0 = (size - side) // 2 + int(rng.integers(-2, 3))
    r0 = max(0, min(r0, size - side))
    c0 = max(0, min(c0, size - side))
    return r0, r0 + side, c0, c0 + side


def _rect_geojson(bounds, georef: AffineGeoref) -> dict:
    r0, r1, c0, c1 = bounds
    # pixel-corner coordinates: centers span [r0, r1), corners at +/- 0.5
    corners_pix = [(c0 - 0.5, r0 - 0.5), (c1 - 0.5, r0 - 0.5),
                   (c1 - 0.5, r1 - 0.5), (c0 - 0.5, r1 - 0.5)]
    ring = []
    for col, row in corners_pix:
        x, y = georef.pixel_to_map(col, row)
        ring.append([float(x), float(y)])
    ring.append(list(ring[0]))
    return {
        "type": "FeatureCollection",
        "features": [{
            "type": "Feature",
            "properties": {},
            "geometry": {"type": "Polygon", "coordinates": [ring]},
        }],
    }


def make_synthetic(out_dir, seed: int = 42, per_class: int = 40, size: int = 64,
                   class_names=SYNTHETIC_CLASSES) -> Path:
    """Write a 4-class procedural-texture dataset with georef + mask sidecars.

    Same seed, same bytes: textures, world files, and mask polygons are all
    derived from one seeded generator in a fixed order. Mask rectangles
    cover a class-dependent fraction of the tile, so the mask channel by
    itself carries class information.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = make_rng(seed)
    index = 0
    for cname in class_names:
        cdir = out / cname
        cdir.mkdir(exist_ok=True)
        for i in range(per_class):
            img = _texture(cname, size, rng)
            pixels_u8 = np.round(img * 255.0).astype(np.uint8)
            stem = cdir / f"{cname}_{i:03d}"
            encode_png(pixels_u8, stem.with_suffix(".png"))

            georef = AffineGeoref(0.5, 0.0, 0.0, -0.5,
                                  10000.0 + 100.0 * index, 20000.0 - 50.0 * index)
            write_world_file(georef, stem.with_suffix(".wld"))

            bounds = _mask_rectangle(cname, size, rng)
            doc = _rect_geojson(bounds, georef)
            stem.with_suffix(".geojson").write_text(
                json.dumps(doc, separators=(",", ":")) + "\n", encoding="utf-8")
            index += 1
    return out
