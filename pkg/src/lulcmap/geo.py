"""Geospatial mapping pipeline: tile a georeferenced raster into 64x64
blocks, classify every tile, and render a color-coded LULC map plus a
GeoJSON overlay.

Georeferencing follows the corner convention: pixel (col, row) in corner
coordinates maps to

    x = origin_x + col * pixel_width + row * row_rot
    y = origin_y + col * col_rot    + row * pixel_height

World files (`.wld`) store the same affine map referenced to the CENTER of
the top-left pixel; reading shifts it to the corner convention.  A one-line
`.crs` sidecar names the coordinate reference system.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Protocol

import numpy as np

from . import tensor as T
from . import vit
from .data import ClassMap, EUROSAT_CLASSES, Preprocessor
from .errors import ConfigError, DataError
from .imgio import read_image, write_image

TILE_SIZE = 64


@dataclass(frozen=True)
class GeoTransform:
    origin_x: float
    origin_y: float
    pixel_width: float
    pixel_height: float
    row_rot: float = 0.0
    col_rot: float = 0.0

    def __post_init__(self):
        if self.pixel_width == 0.0 or self.pixel_height == 0.0:
            raise DataError(f"pixel sizes must be nonzero, got {self.pixel_width}/{self.pixel_height}")

    def apply(self, col: float, row: float) -> tuple[float, float]:
        """Pixel-corner coordinates -> projected coordinates."""
        x = self.origin_x + col * self.pixel_width + row * self.row_rot
        y = self.origin_y + col * self.col_rot + row * self.pixel_height
        return x, y

    def inverse(self, x: float, y: float) -> tuple[float, float]:
        """Projected coordinates -> pixel-corner coordinates (2x2 solve)."""
        a, b = self.pixel_width, self.row_rot
        c, d = self.col_rot, self.pixel_height
        det = a * d - b * c
        if det == 0.0:
            raise DataError("geotransform is singular")
        dx, dy = x - self.origin_x, y - self.origin_y
        return (d * dx - b * dy) / det, (a * dy - c * dx) / det

    @classmethod
    def from_world_file(cls, path: str | Path) -> "GeoTransform":
        """Parse the 6-line ESRI world file (A, D, B, E, C, F order,
        center-of-top-left-pixel reference)."""
        path = Path(path)
        try:
            lines = [line.strip() for line in path.read_text().splitlines() if line.strip()]
            a, d, b, e, c, f = (float(v) for v in lines[:6])
        except (OSError, ValueError, IndexError) as exc:
            raise DataError(f"cannot parse world file {path}: {exc}") from exc
        return cls(
            origin_x=c - 0.5 * a - 0.5 * b,
            origin_y=f - 0.5 * d - 0.5 * e,
            pixel_width=a,
            pixel_height=e,
            row_rot=b,
            col_rot=d,
        )

    def to_world_file(self, path: str | Path) -> None:
        cx, cy = self.apply(0.5, 0.5)
        values = (self.pixel_width, self.col_rot, self.row_rot, self.pixel_height, cx, cy)
        Path(path).write_text("\n".join(f"{v:.12f}" for v in values) + "\n")


@dataclass
class GeoRaster:
    pixels: np.ndarray  # uint8 [H, W, 3]
    transform: GeoTransform
    crs: str

    def __post_init__(self):
        arr = np.asarray(self.pixels)
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
            raise DataError(f"raster pixels must be uint8 [H, W, 3], got dtype {arr.dtype} shape {arr.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def read_scene(image_path: str | Path) -> GeoRaster:
    """Load `<scene>.png|.ppm` with its `.wld` and `.crs` sidecars."""
    image_path = Path(image_path)
    if not image_path.exists():
        raise DataError(f"scene image {image_path} does not exist")
    world_path = image_path.with_suffix(".wld")
    crs_path = image_path.with_suffix(".crs")
    if not world_path.exists():
        raise DataError(f"missing world file sidecar {world_path}")
    if not crs_path.exists():
        raise DataError(f"missing CRS sidecar {crs_path}")
    return GeoRaster(
        pixels=read_image(image_path),
        transform=GeoTransform.from_world_file(world_path),
        crs=crs_path.read_text().strip(),
    )


@dataclass
class Tile:
    row: int
    col: int
    row0: int
    col0: int
    polygon: list[tuple[float, float]]  # TL, TR, BR, BL corners
    excluded: bool = False
    class_id: int | None = None
    confidence: float | None = None


@dataclass
class TileGrid:
    rows: int
    cols: int
    tiles: list[Tile]  # row-major
    transform: GeoTransform
    crs: str
    tile_size: int = TILE_SIZE

    def tile_at(self, row: int, col: int) -> Tile:
        return self.tiles[row * self.cols + col]

    def active(self) -> list[Tile]:
        return [t for t in self.tiles if not t.excluded]


def point_in_polygon(x: float, y: float, rings: list[list[tuple[float, float]]]) -> bool:
    """Even-odd ray casting over polygon rings (exterior + holes)."""
    inside = False
    for ring in rings:
        pts = ring[:-1] if ring and ring[0] == ring[-1] else ring
        n = len(pts)
        for i in range(n):
            x1, y1 = pts[i]
            x2, y2 = pts[(i + 1) % n]
            if (y1 > y) != (y2 > y):
                x_cross = x1 + (y - y1) / (y2 - y1) * (x2 - x1)
                if x < x_cross:
                    inside = not inside
    return inside


def _boundary_rings(boundary: dict) -> list[list[tuple[float, float]]]:
    """Rings of a GeoJSON Polygon/MultiPolygon geometry (or Feature thereof)."""
    geom = boundary.get("geometry", boundary)
    kind = geom.get("type")
    if kind == "Polygon":
        polys = [geom["coordinates"]]
    elif kind == "MultiPolygon":
        polys = geom["coordinates"]
    else:
        raise DataError(f"boundary must be a (Multi)Polygon, got {kind!r}")
    return [[(float(x), float(y)) for x, y in ring] for poly in polys for ring in poly]


def tile(raster: GeoRaster, boundary: dict | None = None) -> TileGrid:
    """Partition the raster into non-overlapping 64x64 tiles (row-major).

    Partial tiles at the right/bottom edges are dropped (floor semantics).
    With a boundary polygon (in the raster's CRS), tiles whose CENTER falls
    outside are marked excluded.
    """
    rows = raster.height // TILE_SIZE
    cols = raster.width // TILE_SIZE
    if rows == 0 or cols == 0:
        raise DataError(
            f"raster {raster.height}x{raster.width} is smaller than one {TILE_SIZE}px tile"
        )
    rings = _boundary_rings(boundary) if boundary is not None else None
    tiles: list[Tile] = []
    for r in range(rows):
        for c in range(cols):
            row0, col0 = r * TILE_SIZE, c * TILE_SIZE
            corners = [
                raster.transform.apply(col0, row0),
                raster.transform.apply(col0 + TILE_SIZE, row0),
                raster.transform.apply(col0 + TILE_SIZE, row0 + TILE_SIZE),
                raster.transform.apply(col0, row0 + TILE_SIZE),
            ]
            excluded = False
            if rings is not None:
                cx, cy = raster.transform.apply(col0 + TILE_SIZE / 2, row0 + TILE_SIZE / 2)
                excluded = not point_in_polygon(cx, cy, rings)
            tiles.append(Tile(row=r, col=c, row0=row0, col0=col0, polygon=corners, excluded=excluded))
    return TileGrid(rows=rows, cols=cols, tiles=tiles, transform=raster.transform, crs=raster.crs)


class TileClassifier(Protocol):
    """Anything that maps a uint8 [B, 64, 64, 3] batch to [B, K] probabilities."""

    num_classes: int

    def __call__(self, batch: np.ndarray) -> np.ndarray: ...


@dataclass
class ModelTileClassifier:
    """Classify tiles with a trained model through the same resize+normalize
    path used in training."""

    model: vit.ViTModel
    preprocess: Preprocessor

    @property
    def num_classes(self) -> int:
        return self.model.config.num_classes

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        arrays = [self.preprocess(img) for img in batch]
        with T.no_grad():
            logits = vit.forward(self.model, np.stack(arrays).astype(np.float32), mode="eval")
            probs = T.softmax(logits, axis=1)
        return probs.values


def classify_tiles(grid: TileGrid, raster: GeoRaster, classifier: TileClassifier,
                   batch_size: int = 32, num_classes: int | None = None,
                   threads: int = 1) -> TileGrid:
    """Assign a class id and confidence (max probability) to every
    non-excluded tile.

    Results are assembled by tile index, so they are independent of batch
    size, processing order, and thread count.
    """
    if batch_size < 1 or threads < 1:
        raise ConfigError(f"batch_size and threads must be >= 1, got {batch_size}/{threads}")
    expected_classes = num_classes if num_classes is not None else len(EUROSAT_CLASSES)
    active = grid.active()
    ts = grid.tile_size

    def crop(t: Tile) -> np.ndarray:
        return raster.pixels[t.row0:t.row0 + ts, t.col0:t.col0 + ts]

    batches = [active[i:i + batch_size] for i in range(0, len(active), batch_size)]

    def run_batch(batch: list[Tile]) -> np.ndarray:
        return classifier(np.stack([crop(t) for t in batch]))

    if threads == 1:
        results = [run_batch(b) for b in batches]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_batch, batches))

    new_tiles = [replace(t) for t in grid.tiles]
    for batch, probs in zip(batches, results):
        if probs.shape != (len(batch), expected_classes):
            raise ConfigError(
                f"classifier returned shape {probs.shape}, expected ({len(batch)}, {expected_classes})"
            )
        for t, p in zip(batch, probs):
            out = new_tiles[t.row * grid.cols + t.col]
            out.class_id = int(np.argmax(p))
            out.confidence = float(np.max(p))
    return TileGrid(rows=grid.rows, cols=grid.cols, tiles=new_tiles,
                    transform=grid.transform, crs=grid.crs, tile_size=ts)


def colorize(grid: TileGrid, palette: ClassMap = EUROSAT_CLASSES,
             excluded_color: tuple[int, int, int] = (0, 0, 0)) -> np.ndarray:
    """Render the classified grid as a uint8 image: each tile becomes a
    solid 64x64 block of its class color; excluded tiles get `excluded_color`."""
    if excluded_color in {c.color for c in palette}:
        raise ValueError(f"excluded_color {excluded_color} collides with a palette color")
    ts = grid.tile_size
    out = np.zeros((grid.rows * ts, grid.cols * ts, 3), dtype=np.uint8)
    for t in grid.tiles:
        if t.excluded:
            color = excluded_color
        else:
            if t.class_id is None:
                raise ValueError(f"tile ({t.row}, {t.col}) is unclassified; run classify_tiles first")
            color = palette[t.class_id].color
        out[t.row * ts:(t.row + 1) * ts, t.col * ts:(t.col + 1) * ts] = color
    return out


def legend(palette: ClassMap = EUROSAT_CLASSES) -> dict:
    """class <-> color listing written next to every rendered map."""
    return {
        "classes": [
            {"id": c.id, "name": c.name, "color": list(c.color)} for c in palette
        ]
    }


def _ccw(ring: list[tuple[float, float]]) -> list[tuple[float, float]]:
    area2 = sum(x1 * y2 - x2 * y1 for (x1, y1), (x2, y2) in zip(ring, ring[1:] + ring[:1]))
    return ring if area2 > 0 else ring[::-1]


def to_geojson(grid: TileGrid, palette: ClassMap = EUROSAT_CLASSES) -> dict:
    """One polygon feature per non-excluded classified tile, with
    {class_name, class_id, confidence, color} properties.  Exterior rings
    are counterclockwise and closed, per the GeoJSON spec."""
    features = []
    for t in grid.tiles:
        if t.excluded:
            continue
        if t.class_id is None:
            raise ValueError(f"tile ({t.row}, {t.col}) is unclassified; run classify_tiles first")
        ring = _ccw(list(t.polygon))
        ring.append(ring[0])
        cdef = palette[t.class_id]
        features.append({
            "type": "Feature",
            "geometry": {"type": "Polygon", "coordinates": [[list(pt) for pt in ring]]},
            "properties": {
                "class_name": cdef.name,
                "class_id": cdef.id,
                "confidence": t.confidence,
                "color": "#{:02x}{:02x}{:02x}".format(*cdef.color),
                "row": t.row,
                "col": t.col,
            },
        })
    doc = {"type": "FeatureCollection", "features": features}
    if grid.crs:
        doc["crs"] = {"type": "name", "properties": {"name": grid.crs}}
    return doc


def write_map_artifacts(grid: TileGrid, out_prefix: str | Path,
                        palette: ClassMap = EUROSAT_CLASSES) -> dict[str, Path]:
    """Write `<prefix>_map.png`, `<prefix>_legend.json`, `<prefix>_tiles.geojson`."""
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = {
        "map": out_prefix.with_name(out_prefix.name + "_map.png"),
        "legend": out_prefix.with_name(out_prefix.name + "_legend.json"),
        "tiles": out_prefix.with_name(out_prefix.name + "_tiles.geojson"),
    }
    write_image(paths["map"], colorize(grid, palette))
    paths["legend"].write_text(json.dumps(legend(palette), indent=1, sort_keys=True))
    paths["tiles"].write_text(json.dumps(to_geojson(grid, palette), sort_keys=True))
    return paths
