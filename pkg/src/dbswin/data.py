"""Synthetic road scenes, PGM raster I/O, tiling, and dataset splitting.

Scenes are textured backgrounds with rasterized polyline roads. Occluder
disks overwrite image pixels only; the mask keeps the true road geometry,
so the ground truth persists under occlusion.
"""

import os
from dataclasses import dataclass

import numpy as np


@dataclass
class Sample:
    image: np.ndarray   # uint8 [C, H, W], C in {1, 3}
    mask: np.ndarray    # uint8 [H, W], values {0, 1}

    def __post_init__(self):
        if self.image.shape[1:] != self.mask.shape:
            raise ValueError(
                f"image {self.image.shape} / mask {self.mask.shape} size mismatch")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("mask must be binary {0,1}")


@dataclass
class SyntheticRoadConfig:
    size: int = 64
    num_roads: tuple = (2, 4)
    width: tuple = (2, 4)
    occluders: tuple = (3, 6)
    occluder_radius: tuple = (3, 8)
    occluder_intensity: tuple = (0.25, 0.35)
    noise_std: float = 0.04
    seed: int = 0

    def __post_init__(self):
        if self.width[0] < 1:
            raise ValueError("road width must be >= 1")
        for lo, hi in (self.num_roads, self.width, self.occluders,
                       self.occluder_radius, self.occluder_intensity):
            if hi < lo:
                raise ValueError("empty range")
        if self.size < 2 * self.width[0]:
            raise ValueError(f"size {self.size} too small for roads")


def _smooth_noise(rng, size, cells, lo, hi):
    coarse = rng.uniform(lo, hi, size=(cells, cells))
    idx = (np.arange(size) * cells) // size
    field = coarse[np.ix_(idx, idx)]
    # cheap box blur to soften cell edges
    k = max(1, size // cells // 2)
    padded = np.pad(field, k, mode="edge")
    c = np.cumsum(np.cumsum(padded, axis=0), axis=1)
    c = np.pad(c, ((1, 0), (1, 0)))
    n = 2 * k + 1
    out = (c[n:, n:] - c[:-n, n:] - c[n:, :-n] + c[:-n, :-n]) / (n * n)
    return out[: size, : size]


def _segment_distance(size, p0, p1):
    yy, xx = np.mgrid[0:size, 0:size]
    d = p1 - p0
    denom = float(d @ d)
    if denom == 0.0:
        return np.hypot(yy - p0[0], xx - p0[1])
    t = ((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / denom
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(yy - (p0[0] + t * d[0]), xx - (p0[1] + t * d[1]))


def _border_point(rng, size, side):
    pos = rng.uniform(0, size - 1)
    return {
        0: np.array([0.0, pos]),
        1: np.array([size - 1.0, pos]),
        2: np.array([pos, 0.0]),
        3: np.array([pos, size - 1.0]),
    }[side]


def generate_synthetic(cfg: SyntheticRoadConfig) -> Sample:
    """Deterministic in cfg.seed; occluders never touch the mask."""
    rng = np.random.default_rng(cfg.seed)
    size = cfg.size
    background = _smooth_noise(rng, size, 8, 0.25, 0.5)
    mask = np.zeros((size, size), dtype=np.uint8)
    image = background.copy()

    n_roads = int(rng.integers(cfg.num_roads[0], cfg.num_roads[1] + 1))
    for _ in range(n_roads):
        # roads always span opposite borders, so each crosses the scene
        side0 = int(rng.integers(0, 4))
        side1 = side0 ^ 1
        p0 = _border_point(rng, size, side0)
        p1 = _border_point(rng, size, side1)
        mid = (p0 + p1) / 2 + rng.normal(0, size / 10, size=2)
        mid = np.clip(mid, 0, size - 1)
        width = rng.uniform(cfg.width[0], cfg.width[1])
        road = np.zeros((size, size), dtype=bool)
        for a, b in ((p0, mid), (mid, p1)):
            road |= _segment_distance(size, a, b) <= width / 2
        mask[road] = 1
        image[road] = 0.75 + rng.normal(0, 0.02)

    n_occ = int(rng.integers(cfg.occluders[0], cfg.occluders[1] + 1))
    yy, xx = np.mgrid[0:size, 0:size]
    road_rows, road_cols = np.nonzero(mask)
    for _ in range(n_occ):
        if road_rows.size and rng.uniform() < 0.7:
            # bias occluders onto roads so they actually break them up
            j = int(rng.integers(0, road_rows.size))
            cy, cx = float(road_rows[j]), float(road_cols[j])
        else:
            cy, cx = rng.uniform(0, size - 1, size=2)
        r = rng.uniform(cfg.occluder_radius[0], cfg.occluder_radius[1])
        disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        image[disk] = rng.uniform(*cfg.occluder_intensity)

    image = image + rng.normal(0, cfg.noise_std, size=(size, size))
    image8 = np.clip(image * 255, 0, 255).astype(np.uint8)
    return Sample(image=image8[None, :, :], mask=mask)


# ---------------------------------------------------------------- PGM I/O

def save_pgm(raster, path):
    """Binary PGM (P5, maxval 255)."""
    arr = np.asarray(raster)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise ValueError("save_pgm expects a 2-D uint8 raster")
    with open(path, "wb") as f:
        f.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        f.write(arr.tobytes())


class PgmError(ValueError):
    pass


def load_pgm(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:2] == b"P2":
        raise PgmError(f"{path}: ASCII PGM (P2) not supported, use binary P5")
    if blob[:2] != b"P5":
        raise PgmError(f"{path}: bad magic {blob[:2]!r} at byte 0")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PgmError(f"{path}: truncated header at byte {start}")
        try:
            fields.append(int(blob[start:pos]))
        except ValueError:
            raise PgmError(f"{path}: bad header token at byte {start}") from None
    w, h, maxval = fields
    if maxval != 255:
        raise PgmError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace after maxval
    payload = blob[pos : pos + w * h]
    if len(payload) != w * h:
        raise PgmError(
            f"{path}: payload truncated at byte {pos + len(payload)} "
            f"(expected {w * h} bytes)")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def save_mask(mask, path):
    save_pgm((np.asarray(mask, dtype=np.uint8) * 255), path)


def load_mask(path):
    return (load_pgm(path) >= 128).astype(np.uint8)


def save_image(image, path):
    """1-channel images as a single PGM; 3-channel as three PGM planes
    plus a .plan manifest listing them."""
    if image.shape[0] == 1:
        save_pgm(image[0], path)
        return
    base, _ = os.path.splitext(path)
    names = []
    for i in range(image.shape[0]):
        plane = f"{base}.c{i}.pgm"
        save_pgm(image[i], plane)
        names.append(os.path.basename(plane))
    with open(base + ".plan", "w") as f:
        f.write("\n".join(names) + "\n")


def load_image(path):
    if path.endswith(".plan"):
        root = os.path.dirname(path)
        with open(path) as f:
            names = [ln.strip() for ln in f if ln.strip()]
        return np.stack([load_pgm(os.path.join(root, n)) for n in names])
    return load_pgm(path)[None, :, :]


# ---------------------------------------------------------------- datasets

def write_dataset(samples, out_dir):
    """Write image/mask PGM pairs and a tab-separated manifest."""
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        img = f"sample_{i:04d}.pgm" if s.image.shape[0] == 1 else f"sample_{i:04d}.plan"
        msk = f"sample_{i:04d}_mask.pgm"
        save_image(s.image, os.path.join(out_dir, f"sample_{i:04d}.pgm"))
        save_mask(s.mask, os.path.join(out_dir, msk))
        lines.append(f"{img}\t{msk}")
    manifest = os.path.join(out_dir, "manifest.tsv")
    with open(manifest, "w") as f:
        f.write("".join(ln + "\n" for ln in lines))
    return manifest


def load_manifest(manifest_path):
    root = os.path.dirname(manifest_path)
    samples = []
    with open(manifest_path) as f:
        for ln in f:
            ln = ln.strip()
            if not ln:
                continue
            img_rel, msk_rel = ln.split("\t")
            samples.append(Sample(load_image(os.path.join(root, img_rel)),
                                  load_mask(os.path.join(root, msk_rel))))
    return samples


def to_model_input(sample: Sample):
    return sample.image.astype(np.float64) / 255.0


def tile(image, tile_size, stride):
    """Row-major sliding tiles over [..., H, W]; edge tiles are clamped so
    every pixel is covered at least once."""
    h, w = image.shape[-2], image.shape[-1]
    if tile_size > h or tile_size > w:
        raise ValueError(f"tile {tile_size} exceeds image {h}x{w}")

    def origins(extent):
        out = list(range(0, extent - tile_size + 1, stride))
        if out[-1] + tile_size < extent:
            out.append(extent - tile_size)
        return out

    tiles = []
    for oy in origins(h):
        for ox in origins(w):
            tiles.append(((oy, ox),
                          image[..., oy : oy + tile_size, ox : ox + tile_size]))
    return tiles


def split_811(samples, seed):
    """Deterministic shuffled 8:1:1 split: floor(.8n) / floor(.1n) / rest."""
    n = len(samples)
    if n < 10:
        raise ValueError(f"need >= 10 samples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(0.8 * n)
    n_val = int(0.1 * n)
    pick = lambda idx: [samples[i] for i in idx]
    return (pick(order[:n_train]),
            pick(order[n_train : n_train + n_val]),
            pick(order[n_train + n_val :]))
