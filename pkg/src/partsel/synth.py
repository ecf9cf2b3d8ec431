"""Synthetic dataset with a planted informative region.

Each image is smooth background clutter plus one rectangular stipple patch
whose filled-area fraction is an affine function of the target age (plus a
fixed offset for gender when enabled). The patch is rendered with an exact
pixel budget — k full pixels and one fractional pixel — so summing the
region and inverting the affine map recovers the age to float precision.
Background pixels come from independent random streams and carry no age
information; the planted box is the ground truth that selection is supposed
to find.
"""

from __future__ import annotations

import csv
import json
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import ConfigError, DataConfig, from_dict
from .prst import read_prst, write_prst
from .rng import substream
from .selection import Box

FRAC_BASE = 0.2
FRAC_SPAN = 0.55
GENDER_OFFSET = 0.06
MANIFEST_HEADER = ["id", "age", "gender", "x1", "y1", "x2", "y2", "seed"]


@dataclass
class SyntheticSample:
    image: np.ndarray  # (1, H, W) float32 in [0, 1]
    age: float  # months
    gender: int  # 0 or 1
    informative_box: Box
    seed: int


def _age_fraction(age, gender, cfg):
    """The stipple fill fraction encoding (age, gender)."""
    rel = (age - cfg.age_min) / (cfg.age_max - cfg.age_min)
    frac = FRAC_BASE + FRAC_SPAN * rel
    if cfg.gender_effect and gender == 1:
        frac += GENDER_OFFSET
    return frac


def decode_age(image, box, gender, cfg):
    """Closed-form inverse of the generator: region sum -> fill fraction -> age.

    Exact (to ~1e-7 months) on noise-free images; with noise_std > 0 it
    degrades gracefully and is no longer a contract.
    """
    x1, y1, x2, y2 = (int(v) for v in (box.x1, box.y1, box.x2, box.y2))
    region = np.asarray(image)[..., y1:y2, x1:x2]
    frac = region.sum(dtype=np.float64) / ((x2 - x1) * (y2 - y1))
    if cfg.gender_effect and gender == 1:
        frac -= GENDER_OFFSET
    return cfg.age_min + (frac - FRAC_BASE) / FRAC_SPAN * (cfg.age_max - cfg.age_min)


def generate_sample(seed, cfg):
    """Render one sample; all randomness derives from (seed, stream name)."""
    cfg.validate()
    size = cfg.image_size
    draw = substream(seed, "draw")
    age = float(draw.uniform(cfg.age_min, cfg.age_max))
    gender = int(draw.integers(0, 2))
    bw = int(draw.integers(cfg.box_min, cfg.box_max + 1))
    bh = int(draw.integers(cfg.box_min, cfg.box_max + 1))
    bx = int(draw.integers(0, size - bw + 1))
    by = int(draw.integers(0, size - bh + 1))

    bg = substream(seed, "background")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    field = np.zeros((size, size))
    for _ in range(int(bg.integers(6, 12))):
        cx, cy = bg.uniform(0, size, size=2)
        sigma = bg.uniform(3.0, 10.0)
        amp = bg.uniform(0.25, 0.95)
        field += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma * sigma))
    np.clip(field, 0.0, 0.95, out=field)

    # carve out the informative box and fill it with an exact-sum stipple:
    # floor(frac*A) pixels at 1.0 plus one fractional pixel, placed by a
    # seeded permutation, so the region sum equals frac*A to f32 rounding.
    area = bw * bh
    frac = _age_fraction(age, gender, cfg)
    k = int(np.floor(frac * area))
    rem = frac * area - k
    pat = substream(seed, "pattern")
    order = pat.permutation(area)
    patch = np.zeros(area)
    patch[order[:k]] = 1.0
    if k < area:
        patch[order[k]] = rem
    field[by : by + bh, bx : bx + bw] = patch.reshape(bh, bw)

    if cfg.noise_std > 0:
        noise = substream(seed, "noise")
        field += noise.normal(0.0, cfg.noise_std, size=field.shape)
        np.clip(field, 0.0, 1.0, out=field)

    image = field[None].astype(np.float32)
    return SyntheticSample(
        image=image,
        age=age,
        gender=gender,
        informative_box=Box(float(bx), float(by), float(bx + bw), float(by + bh)),
        seed=int(seed),
    )


def sample_seeds(dataset_seed, n):
    """Per-sample seeds derived from the dataset seed (stable, well-mixed)."""
    sseq = np.random.SeedSequence([int(dataset_seed) & 0xFFFFFFFF, zlib.crc32(b"data")])
    return [int(s) for s in sseq.generate_state(n, dtype=np.uint32)]


def sample_id(index):
    return f"s{index:05d}"


def is_train_id(sample_id_, train_fraction):
    cut = int(round(train_fraction * 10000))
    return zlib.crc32(sample_id_.encode("utf-8")) % 10000 < cut


def generate_dataset(n, seed, run_cfg, out_dir, force=False, workers=1):
    """Write n samples under out_dir: images/<id>.prst, manifest.csv, config.json."""
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}")
    dcfg = run_cfg.data
    dcfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    img_dir = os.path.join(out_dir, "images")
    manifest_path = os.path.join(out_dir, "manifest.csv")
    if os.path.exists(manifest_path) and not force:
        raise FileExistsError(f"{out_dir} already contains a dataset (use force to overwrite)")
    os.makedirs(img_dir, exist_ok=True)

    seeds = sample_seeds(seed, n)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(lambda s: generate_sample(s, dcfg), seeds))
    else:
        samples = [generate_sample(s, dcfg) for s in seeds]

    rows = []
    for i, sample in enumerate(samples):
        sid = sample_id(i)
        write_prst(os.path.join(img_dir, f"{sid}.prst"), sample.image)
        b = sample.informative_box
        rows.append(
            {
                "id": sid,
                "age": repr(sample.age),
                "gender": sample.gender,
                "x1": int(b.x1),
                "y1": int(b.y1),
                "x2": int(b.x2),
                "y2": int(b.y2),
                "seed": sample.seed,
            }
        )
    with open(manifest_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_HEADER)
        writer.writeheader()
        writer.writerows(rows)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(run_cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


@dataclass
class Dataset:
    ids: list
    images: np.ndarray  # (N, 1, H, W) float32
    ages: np.ndarray  # (N,)
    genders: np.ndarray  # (N,) int
    boxes: np.ndarray  # (N, 4) x1,y1,x2,y2
    train_idx: np.ndarray
    eval_idx: np.ndarray
    image_size: int
    config: object  # RunConfig echoed at generation time

    def __len__(self):
        return len(self.ids)

    def gender_onehot(self):
        return np.eye(2, dtype=np.float64)[self.genders]


def load_dataset(path):
    manifest_path = os.path.join(path, "manifest.csv")
    if not os.path.isfile(manifest_path):
        raise FileNotFoundError(f"no manifest.csv under {path}")
    cfg_path = os.path.join(path, "config.json")
    if not os.path.isfile(cfg_path):
        raise FileNotFoundError(f"no config.json under {path}")
    with open(cfg_path, "r", encoding="utf-8") as fh:
        run_cfg = from_dict(json.load(fh))

    ids, ages, genders, boxes = [], [], [], []
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise ValueError(f"{manifest_path}: unexpected header {reader.fieldnames}")
        for row in reader:
            ids.append(row["id"])
            ages.append(float(row["age"]))
            genders.append(int(row["gender"]))
            boxes.append([float(row["x1"]), float(row["y1"]), float(row["x2"]), float(row["y2"])])
    if not ids:
        raise ValueError(f"{manifest_path}: empty dataset")

    images = []
    for sid in ids:
        arr = read_prst(os.path.join(path, "images", f"{sid}.prst"))
        if arr.ndim != 3 or arr.shape[0] != 1:
            raise ValueError(f"image {sid}: expected (1,H,W), got {arr.shape}")
        images.append(arr.astype(np.float32, copy=False))
    images = np.stack(images)
    size = images.shape[2]
    if images.shape[2] != images.shape[3]:
        raise ValueError(f"non-square images {images.shape} unsupported")

    frac = run_cfg.data.train_fraction
    train_mask = np.array([is_train_id(sid, frac) for sid in ids])
    return Dataset(
        ids=ids,
        images=images,
        ages=np.array(ages),
        genders=np.array(genders, dtype=np.int64),
        boxes=np.array(boxes),
        train_idx=np.flatnonzero(train_mask),
        eval_idx=np.flatnonzero(~train_mask),
        image_size=size,
        config=run_cfg,
    )
