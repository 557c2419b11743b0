"""Traffic movie storage, street maps, mirroring, and synthetic cities.

A city dataset is a directory with a PGM street map, one traffic movie
per day, and a manifest of ``day_index weekday path`` lines.  Movies are
uint8 arrays of shape [T, H, W, 8]: per pixel four (volume, speed) pairs
keyed by heading quadrant, in the order NE, SE, SW, NW.

The ``TMV1`` container is deliberately dumb: a 20-byte header (magic +
four little-endian u32 extents) followed by the raw row-major payload.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from gunet.errors import DataError
from gunet.features import Timestamp

__all__ = [
    "CHANNEL_NAMES", "MIRROR_CHANNEL_PERM", "FRAMES_PER_DAY",
    "MINUTES_PER_FRAME", "HORIZON_OFFSETS", "CityDataset", "read_tmv",
    "write_tmv", "read_pgm", "write_pgm", "mirror_movie", "mirror_street_map",
    "mirror_city", "synth_city", "save_city", "load_city",
    "sample_seed_frames", "max_start_frame",
]

TMV_MAGIC = b"TMV1"

CHANNEL_NAMES = ("vol_NE", "spd_NE", "vol_SE", "spd_SE",
                 "vol_SW", "spd_SW", "vol_NW", "spd_NW")

#: channel permutation applied when a movie is point-reflected:
#: NE<->SW and SE<->NW for both members of each (volume, speed) pair
MIRROR_CHANNEL_PERM = np.array([4, 5, 6, 7, 0, 1, 2, 3], dtype=np.int64)

FRAMES_PER_DAY = 288
MINUTES_PER_FRAME = 5
#: frame offsets after the seed window that the model predicts
#: (5, 10, 15, 30, 45 and 60 minutes ahead)
HORIZON_OFFSETS = (1, 2, 3, 6, 9, 12)


@dataclass
class CityDataset:
    """One city: street map plus one movie (and weekday) per day."""

    name: str
    street_map: np.ndarray
    movies: list
    weekdays: list

    @property
    def n_days(self) -> int:
        return len(self.movies)

    def select_days(self, day_ids: Sequence[int]) -> "CityDataset":
        """Subset view used for train/holdout splits (arrays shared)."""
        return CityDataset(self.name, self.street_map,
                           [self.movies[i] for i in day_ids],
                           [self.weekdays[i] for i in day_ids])


# ---------------------------------------------------------------------------
# movie container


def write_tmv(path, movie: np.ndarray) -> None:
    movie = np.asarray(movie)
    if movie.dtype != np.uint8 or movie.ndim != 4 or movie.shape[3] != 8:
        raise DataError(
            f"movie must be uint8 [T,H,W,8], got {movie.dtype} {movie.shape}")
    with open(path, "wb") as fh:
        fh.write(TMV_MAGIC)
        fh.write(struct.pack("<4I", *movie.shape))
        fh.write(np.ascontiguousarray(movie).tobytes())


def read_tmv(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20:
        raise DataError(f"tmv header truncated: {len(blob)} bytes, need 20")
    if blob[:4] != TMV_MAGIC:
        raise DataError("not a TMV1 file (bad magic)")
    t, h, w, c = struct.unpack("<4I", blob[4:20])
    if c != 8:
        raise DataError(f"tmv channel count must be 8, got {c}")
    expect = t * h * w * c
    actual = len(blob) - 20
    if actual != expect:
        raise DataError(
            f"tmv payload length mismatch: expected {expect} bytes "
            f"({t}x{h}x{w}x{c}), got {actual}")
    return np.frombuffer(blob, dtype=np.uint8, offset=20).reshape(t, h, w, c).copy()


# ---------------------------------------------------------------------------
# PGM street maps (binary P5, maxval 255)


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 2:
        raise DataError(f"pgm image must be uint8 2-D, got {image.dtype} {image.shape}")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    # header: magic, width, height, maxval; '#' comments allowed between tokens
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = re.match(rb"\s*(#[^\n]*\n|\S+)", blob[pos:])
        if not m:
            raise DataError("pgm header truncated")
        pos += m.end()
        tok = m.group(1)
        if not tok.startswith(b"#"):
            tokens.append(tok)
    if tokens[0] != b"P5":
        raise DataError(f"unsupported pgm magic {tokens[0]!r} (want P5)")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DataError(f"pgm maxval must be 255, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    if len(blob) - pos < w * h:
        raise DataError(f"pgm payload truncated: need {w * h}, got {len(blob) - pos}")
    return np.frombuffer(blob, dtype=np.uint8, offset=pos,
                         count=w * h).reshape(h, w).copy()


# ---------------------------------------------------------------------------
# mirroring


def mirror_movie(movie: np.ndarray) -> np.ndarray:
    """Point-reflect every frame and swap heading channels (NE<->SW, SE<->NW).

    An involution: applying it twice gives back the original bytes.
    """
    return np.ascontiguousarray(movie[:, ::-1, ::-1][..., MIRROR_CHANNEL_PERM])


def mirror_street_map(street_map: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(street_map[::-1, ::-1])


def mirror_city(city: CityDataset) -> CityDataset:
    return CityDataset(city.name, mirror_street_map(city.street_map),
                       [mirror_movie(m) for m in city.movies],
                       list(city.weekdays))


# ---------------------------------------------------------------------------
# synthetic city generator


def _daily_profile() -> np.ndarray:
    """Demand factor per frame: quiet nights, steep peaks at 08:00 and 18:00."""
    t = np.arange(FRAMES_PER_DAY) * MINUTES_PER_FRAME
    p = (0.12
         + 0.65 * np.exp(-((t - 480.0) / 85.0) ** 2)
         + 0.55 * np.exp(-((t - 1080.0) / 95.0) ** 2))
    return p / p.max()


def synth_city(seed: int, height: int = 32, width: int = 32,
               days: int = 4, name: str | None = None,
               weekdays: Sequence[int] | None = None) -> CityDataset:
    """Generate a deterministic synthetic city.

    The street skeleton is a crossing set of full-span horizontal and
    vertical corridors (plus short dead-end side streets), so it is a
    single 8-connected component.  Each corridor carries traffic in both
    of its headings, modulated by a double-peaked daily profile, a
    weekday factor, and seeded noise.  Speeds fall off linearly with
    local volume from a per-corridor free-flow value.

    ``weekdays`` overrides the default consecutive labeling (day i is
    weekday i mod 7), e.g. to give a held-out day a weekday that also
    occurs in the training days.
    """
    if height < 8 or width < 8:
        raise DataError(f"synthetic city needs extents >= 8, got {height}x{width}")
    if days < 1:
        raise DataError("synthetic city needs at least one day")
    if weekdays is not None:
        weekdays = [int(d) for d in weekdays]
        if len(weekdays) != days:
            raise DataError(
                f"weekdays has {len(weekdays)} entries for {days} days")
        if not all(0 <= d <= 6 for d in weekdays):
            raise DataError("weekday labels must be in [0, 6]")
    rng = np.random.default_rng(seed)
    street = np.zeros((height, width), dtype=np.uint8)

    corridors = []  # (pixel rows, pixel cols, vol channel fwd/bwd, amp, speed)
    n_h = int(rng.integers(2, 4))
    n_v = int(rng.integers(2, 4))
    h_rows = rng.choice(np.arange(2, height - 2), size=n_h, replace=False)
    v_cols = rng.choice(np.arange(2, width - 2), size=n_v, replace=False)

    def add_corridor(rr, cc, horizontal, wide):
        street[rr, cc] = np.maximum(street[rr, cc], 160 if not wide else 220)
        amp = float(rng.uniform(120.0, 240.0))
        free = float(rng.uniform(150.0, 220.0))
        factors = rng.uniform(0.8, 1.2, size=len(rr))
        # heading volume channels: E->NE(0), W->SW(4); S->SE(2), N->NW(6)
        channels = (0, 4) if horizontal else (2, 6)
        corridors.append((rr, cc, channels, amp, free, factors))

    for row in h_rows:
        wide = bool(rng.random() < 0.4)
        rows_span = [row] + ([row + 1] if wide else [])
        for r in rows_span:
            add_corridor(np.full(width, r), np.arange(width), True, wide)
    for col in v_cols:
        wide = bool(rng.random() < 0.4)
        cols_span = [col] + ([col + 1] if wide else [])
        for c in cols_span:
            add_corridor(np.arange(height), np.full(height, c), False, wide)

    # short dead-end side streets anchored on a corridor
    for _ in range(int(rng.integers(2, 5))):
        row = int(rng.choice(h_rows))
        col = int(rng.integers(1, width - 1))
        length = int(rng.integers(3, 7))
        direction = -1 if rng.random() < 0.5 else 1
        r_end = int(np.clip(row + direction * length, 0, height - 1))
        rr = np.arange(min(row, r_end), max(row, r_end) + 1)
        cc = np.full(len(rr), col)
        street[rr, cc] = np.maximum(street[rr, cc], 100)
        amp = float(rng.uniform(30.0, 60.0))
        free = float(rng.uniform(120.0, 160.0))
        corridors.append((rr, cc, (2, 6), amp, free,
                          rng.uniform(0.8, 1.2, size=len(rr))))

    profile = _daily_profile()
    movies = []
    day_labels = []
    for day in range(days):
        weekday = weekdays[day] if weekdays is not None else day % 7
        day_factor = 0.6 if weekday >= 5 else 1.0
        vol = np.zeros((FRAMES_PER_DAY, height, width, 8), dtype=np.float64)
        free_map = np.zeros((height, width, 8), dtype=np.float64)
        for rr, cc, channels, amp, free, factors in corridors:
            for ch in channels:
                share = float(rng.uniform(0.45, 0.55))
                wiggle = 1.0 + 0.02 * rng.standard_normal(FRAMES_PER_DAY)
                flow = (amp * share * day_factor
                        * profile * wiggle)[:, None] * factors[None, :]
                vol[:, rr, cc, ch] += flow
                free_map[rr, cc, ch] = np.maximum(free_map[rr, cc, ch], free)
        mask = street > 0
        vol_ch = [0, 2, 4, 6]
        vol[:, :, :, vol_ch] += np.where(
            mask[None, :, :, None],
            rng.normal(0.0, 0.5, size=(FRAMES_PER_DAY, height, width, 4)), 0.0)
        vol = np.clip(vol, 0.0, 255.0)
        frames = np.zeros_like(vol)
        for ch in vol_ch:
            v = vol[:, :, :, ch]
            frames[:, :, :, ch] = v
            # probe speed is reported wherever the street carries the
            # heading at all, so it tracks congestion without flickering
            # on and off at low volume
            carries = free_map[None, :, :, ch] > 0.0
            spd = np.clip(free_map[None, :, :, ch] - 0.45 * v, 25.0, 255.0)
            frames[:, :, :, ch + 1] = np.where(carries, spd, 0.0)
        movie = np.clip(np.rint(frames), 0, 255).astype(np.uint8)
        movie[:, ~mask, :] = 0
        movies.append(movie)
        day_labels.append(weekday)

    return CityDataset(name or f"synth{seed}", street, movies, day_labels)


# ---------------------------------------------------------------------------
# directory layout + manifest


def save_city(city: CityDataset, directory) -> None:
    """Materialize a dataset: map.pgm, day_###.tmv, manifest.txt."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_pgm(directory / "map.pgm", city.street_map)
    lines = []
    for i, (movie, weekday) in enumerate(zip(city.movies, city.weekdays)):
        fname = f"day_{i:03d}.tmv"
        write_tmv(directory / fname, movie)
        lines.append(f"{i} {weekday} {fname}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n",
                                            encoding="ascii")


def load_city(directory) -> CityDataset:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise DataError(f"no manifest.txt in {directory}")
    street = read_pgm(directory / "map.pgm")
    movies, weekdays = [], []
    for ln, line in enumerate(manifest.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise DataError(f"{manifest}:{ln}: want 'day weekday path', got {line!r}")
        day, weekday, rel = int(parts[0]), int(parts[1]), parts[2]
        if day != len(movies):
            raise DataError(f"{manifest}:{ln}: day indices must be 0,1,2,...")
        if not 0 <= weekday <= 6:
            raise DataError(f"{manifest}:{ln}: weekday {weekday} out of range")
        movie = read_tmv(directory / rel)
        if movie.shape[1:3] != street.shape:
            raise DataError(
                f"{manifest}:{ln}: movie extent {movie.shape[1:3]} does not "
                f"match street map {street.shape}")
        movies.append(movie)
        weekdays.append(weekday)
    if not movies:
        raise DataError(f"{manifest}: empty manifest")
    return CityDataset(directory.name, street, movies, weekdays)


# ---------------------------------------------------------------------------
# training-sample selection


def max_start_frame(n_frames: int, in_frames: int = 12) -> int:
    """Last admissible seed start: targets must fit inside the day and the
    seed must begin no later than 22:00 wall clock."""
    latest_fit = n_frames - in_frames - HORIZON_OFFSETS[-1]
    latest_clock = (22 * 60) // MINUTES_PER_FRAME
    return min(latest_fit, latest_clock)


def sample_seed_frames(city: CityDataset, rng: np.random.Generator,
                       in_frames: int = 12):
    """Draw a uniform (day, seed start) pair for training.

    Returns ``(day_index, start_frame, Timestamp)`` where the timestamp
    marks the wall-clock minute of the first predicted frame.
    """
    day = int(rng.integers(city.n_days))
    hi = max_start_frame(len(city.movies[day]), in_frames)
    if hi < 0:
        raise DataError(
            f"movie too short for {in_frames} seed frames plus horizons")
    start = int(rng.integers(hi + 1))
    minute = (start + in_frames) * MINUTES_PER_FRAME
    return day, start, Timestamp(minute % 1440, city.weekdays[day])
