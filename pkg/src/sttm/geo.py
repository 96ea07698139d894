"""District geometry: Mercator projection, nearest neighbors, scaled relative coordinates."""

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DomainError, ParseError

EARTH_RADIUS_M = 6_378_137.0
MAX_MERCATOR_LAT = 85.05


@dataclass(frozen=True)
class DistrictGeo:
    district_id: int
    raw_lng: float
    raw_lat: float
    planar_x: float = 0.0
    planar_y: float = 0.0
    scaled_x: int = 0
    scaled_y: int = 0
    city: str = "default"


@dataclass(frozen=True)
class NeighborContext:
    center_id: int
    neighbor_ids: tuple
    relative_coords: tuple


@dataclass(frozen=True)
class CoordScaler:
    """Min/max extent frozen from the training district universe."""

    min_x: float
    max_x: float
    min_y: float
    max_y: float
    n_x: int
    n_y: int

    def scale(self, planar_x, planar_y):
        return (
            _scale_one(planar_x, self.min_x, self.max_x, self.n_x),
            _scale_one(planar_y, self.min_y, self.max_y, self.n_y),
        )


def mercator_project(raw_lng, raw_lat):
    """Spherical Mercator; returns planar (x, y) in meters."""
    if not -MAX_MERCATOR_LAT < raw_lat < MAX_MERCATOR_LAT:
        raise DomainError(f"latitude {raw_lat} outside Mercator band (-85.05, 85.05)")
    x = EARTH_RADIUS_M * math.radians(raw_lng)
    # asinh(tan(phi)) == ln(tan(pi/4 + phi/2)), and is exactly 0 at the equator
    y = EARTH_RADIUS_M * math.asinh(math.tan(math.radians(raw_lat)))
    return x, y


def project_all(districts):
    out = []
    for d in districts:
        x, y = mercator_project(d.raw_lng, d.raw_lat)
        out.append(replace(d, planar_x=x, planar_y=y))
    return out


def nearest_neighbors(districts, m):
    """Map each district id to itself followed by its ``m - 1`` nearest others.

    Distance is Euclidean on planar coordinates; ties go to the smaller id.
    """
    if m < 1 or m > len(districts):
        raise ConfigError(f"M={m} must be in [1, {len(districts)}]", field="M")
    ids = np.array([d.district_id for d in districts])
    xy = np.array([[d.planar_x, d.planar_y] for d in districts])
    result = {}
    for i, d in enumerate(districts):
        dist = np.hypot(xy[:, 0] - xy[i, 0], xy[:, 1] - xy[i, 1])
        dist[i] = -1.0  # self always first
        order = np.lexsort((ids, dist))
        result[d.district_id] = [int(ids[j]) for j in order[:m]]
    return result


def _scale_one(v, lo, hi, n):
    # round-to-nearest, then clamp into [0, n)
    s = int(math.floor((v - lo) / (hi - lo) * n + 0.5))
    return min(max(s, 0), n - 1)


def fit_scaler(districts, n_x, n_y):
    xs = [d.planar_x for d in districts]
    ys = [d.planar_y for d in districts]
    if min(xs) == max(xs) or min(ys) == max(ys):
        raise DomainError("degenerate extent: all districts share one planar coordinate")
    return CoordScaler(min(xs), max(xs), min(ys), max(ys), n_x, n_y)


def scale_coords(districts, n_x, n_y, scaler=None):
    """Attach integer scaled coordinates; ``scaler`` defaults to one fit on ``districts``."""
    scaler = scaler or fit_scaler(districts, n_x, n_y)
    out = []
    for d in districts:
        sx, sy = scaler.scale(d.planar_x, d.planar_y)
        out.append(replace(d, scaled_x=sx, scaled_y=sy))
    return out


def relative_coords(neighbor_ids, scaled, n_x, n_y):
    """Offsets of each neighbor from the first (center) id, shifted by (n_x, n_y).

    ``scaled`` maps district id -> (scaled_x, scaled_y).
    """
    cx, cy = scaled[neighbor_ids[0]]
    out = []
    for did in neighbor_ids:
        sx, sy = scaled[did]
        out.append((sx - cx + n_x, sy - cy + n_y))
    return out


def build_contexts(districts, m, n_x, n_y):
    """Project, scale and build a :class:`NeighborContext` for every district."""
    projected = project_all(districts)
    scaled_districts = scale_coords(projected, n_x, n_y)
    neighbors = nearest_neighbors(scaled_districts, m)
    scaled = {d.district_id: (d.scaled_x, d.scaled_y) for d in scaled_districts}
    contexts = {
        did: NeighborContext(did, tuple(ids), tuple(relative_coords(ids, scaled, n_x, n_y)))
        for did, ids in neighbors.items()
    }
    return scaled_districts, contexts


def read_districts(path):
    """Read ``district_id,lng_degrees,lat_degrees[,city]`` with a header row."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != [
            "district_id",
            "lng_degrees",
            "lat_degrees",
        ]:
            raise ParseError("expected header district_id,lng_degrees,lat_degrees", line=1)
        has_city = len(header) > 3 and header[3].strip() == "city"
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            try:
                city = row[3].strip() if has_city else "default"
                out.append(DistrictGeo(int(row[0]), float(row[1]), float(row[2]), city=city))
            except (ValueError, IndexError) as exc:
                raise ParseError(f"bad district row {row!r}: {exc}", line=lineno) from None
    return out


def write_districts(path, districts):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["district_id", "lng_degrees", "lat_degrees", "city"])
        for d in districts:
            w.writerow([d.district_id, repr(d.raw_lng), repr(d.raw_lat), d.city])
