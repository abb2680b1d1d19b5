"""Procedural facade corpus: image/mask generation, referring-sample
construction with the fixed QA template, split/dedup logic, and file IO.

Images are binary PPM (P6), masks binary PGM (P5, 0=wall, 255=window), and
the manifest is newline-delimited JSON.  Everything is a pure function of
(spec, seed).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .errors import (
    BadMagic,
    EmptyDescription,
    MalformedRecord,
    MissingFile,
    NonBinaryMaskValue,
    SpecInfeasible,
    TooFewSamples,
    UnknownClass,
)

STYLES = ("photo", "line_drawing", "noisy_photo")

PROMPT_TEMPLATE = ("User: <Image> Help me segment the objects in this image "
                   "according to {description}? SAAF: ")
ANSWER_TEXT = "Understood, it is <SEG>."

WINDOW_DESCRIPTIONS = (
    "daylight-admitting components",
    "glazed sections",
    "transparent surfaces",
    "fenestration elements",
)
WALL_DESCRIPTIONS = (
    "opaque envelope surfaces",
    "masonry regions",
    "solid wall areas",
)

MANIFEST_FIELDS = ("id", "image", "mask", "target_class", "description",
                   "split", "sha256")


@dataclass
class FacadeSpec:
    rows: int = 2
    cols: int = 2
    size: int = 64
    margin: float = 0.08
    fill_min: float = 0.45
    fill_max: float = 0.65
    wall_intensity: tuple = (0.5, 0.8)
    window_intensity: tuple = (0.1, 0.3)
    noise_sigma: float = 0.02
    style: str = "photo"

    def validate(self):
        if not 1 <= self.rows <= 4 or not 1 <= self.cols <= 5:
            raise SpecInfeasible("window grid must be 1-4 rows, 1-5 cols")
        if self.style not in STYLES:
            raise SpecInfeasible(f"unknown style '{self.style}'")
        if self.noise_sigma < 0:
            raise SpecInfeasible("noise sigma must be nonnegative")
        for lo, hi in (self.wall_intensity, self.window_intensity):
            if not 0 <= lo <= hi <= 1:
                raise SpecInfeasible("intensity ranges must lie within [0,1]")
        mg = int(self.margin * self.size)
        if (self.size - 2 * mg) // self.rows < 4 or \
                (self.size - 2 * mg) // self.cols < 4:
            raise SpecInfeasible("window grid does not fit inside margins")


def generate_facade(spec, seed):
    """Deterministic (image, window_mask, wall_mask) for a (spec, seed) pair.

    Windows are jittered axis-aligned rectangles, one per grid cell, with at
    least one pixel of wall between any two, so the window mask always has
    exactly rows*cols four-connected components.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    n = spec.size
    mg = int(spec.margin * n)
    cell_h = (n - 2 * mg) / spec.rows
    cell_w = (n - 2 * mg) / spec.cols
    window = np.zeros((n, n), dtype=np.uint8)
    rects = []
    for r in range(spec.rows):
        for c in range(spec.cols):
            # keep a 1px inset so neighbouring windows never touch
            avail_h = int(cell_h) - 2
            avail_w = int(cell_w) - 2
            wh = max(2, int(rng.uniform(spec.fill_min, spec.fill_max) * avail_h))
            ww = max(2, int(rng.uniform(spec.fill_min, spec.fill_max) * avail_w))
            y0 = mg + int(r * cell_h) + 1 + int(rng.integers(0, avail_h - wh + 1))
            x0 = mg + int(c * cell_w) + 1 + int(rng.integers(0, avail_w - ww + 1))
            window[y0:y0 + wh, x0:x0 + ww] = 1
            rects.append((y0, x0, wh, ww))
    wall = (1 - window).astype(np.uint8)

    image = _render(spec, rng, window, rects)
    return image, window, wall


def _render(spec, rng, window, rects):
    n = spec.size
    if spec.style == "line_drawing":
        img = np.ones((n, n), dtype=np.float64)
        for y0, x0, wh, ww in rects:
            img[y0, x0:x0 + ww] = 0.1
            img[y0 + wh - 1, x0:x0 + ww] = 0.1
            img[y0:y0 + wh, x0] = 0.1
            img[y0:y0 + wh, x0 + ww - 1] = 0.1
        rgb = np.repeat(img[:, :, None], 3, axis=2)
    else:
        wall_v = rng.uniform(*spec.wall_intensity)
        img = np.full((n, n), wall_v, dtype=np.float64)
        for y0, x0, wh, ww in rects:
            img[y0:y0 + wh, x0:x0 + ww] = rng.uniform(*spec.window_intensity)
        sigma = spec.noise_sigma * (4.0 if spec.style == "noisy_photo" else 1.0)
        tint = rng.uniform(-0.03, 0.03, size=3)
        rgb = img[:, :, None] + tint[None, None, :]
        if sigma > 0:
            rgb = rgb + rng.normal(0.0, sigma, size=rgb.shape)
    return np.clip(rgb, 0.0, 1.0)


def render_prompt(description):
    if not description:
        raise EmptyDescription("description must be nonempty")
    return PROMPT_TEMPLATE.format(description=description)


@dataclass
class ReferringSample:
    id: str
    image: str  # path relative to the dataset root
    mask: str
    target_class: str
    description: str
    split: str = ""
    sha256: str = ""
    prompt: str = field(default="", compare=False)
    answer: str = field(default=ANSWER_TEXT, compare=False)

    @property
    def style(self):
        # style tag is encoded as the id prefix up to the first '-'
        return self.id.split("-")[0]

    def record(self):
        return {k: getattr(self, k) for k in MANIFEST_FIELDS}


def make_referring_sample(sample_id, image_path, mask_paths, target_class,
                          description, image_sha256):
    """Assemble one referring sample; the ground-truth mask path is chosen
    by target class."""
    if target_class not in ("window", "wall"):
        raise UnknownClass(f"target class '{target_class}'")
    if not description:
        raise EmptyDescription("description must be nonempty")
    return ReferringSample(
        id=sample_id,
        image=image_path,
        mask=mask_paths[target_class],
        target_class=target_class,
        description=description,
        sha256=image_sha256,
        prompt=render_prompt(description),
    )


@dataclass
class DatasetManifest:
    samples: list

    def split_counts(self):
        counts = {"train": 0, "test": 0, "val": 0}
        for s in self.samples:
            counts[s.split] += 1
        return counts

    def by_split(self, split):
        return [s for s in self.samples if s.split == split]


def split_and_dedup(samples, seed):
    """Collapse exact duplicates (by image SHA-256), shuffle with the seed,
    and assign 7:2:1 train:test:val splits (test/val floored)."""
    if len(samples) < 10:
        raise TooFewSamples(f"need >= 10 samples, got {len(samples)}")
    seen = set()
    unique = []
    for s in samples:
        if s.sha256 in seen:
            continue
        seen.add(s.sha256)
        unique.append(s)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(unique))
    shuffled = [unique[i] for i in order]
    n = len(shuffled)
    n_test = int(np.floor(0.2 * n))
    n_val = int(np.floor(0.1 * n))
    n_train = n - n_test - n_val
    for i, s in enumerate(shuffled):
        if i < n_train:
            s.split = "train"
        elif i < n_train + n_test:
            s.split = "test"
        else:
            s.split = "val"
    return DatasetManifest(samples=shuffled)


# --- manifest IO -----------------------------------------------------------

def write_manifest(manifest, path):
    lines = [json.dumps(s.record(), sort_keys=True) for s in manifest.samples]
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def read_manifest(path):
    if not os.path.exists(path):
        raise MissingFile(path)
    samples = []
    hash_split = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(str(exc), line=lineno)
            missing = [f for f in MANIFEST_FIELDS if f not in rec]
            if missing:
                raise MalformedRecord(f"missing fields {missing}", line=lineno)
            if rec["split"] not in ("train", "test", "val"):
                raise MalformedRecord(f"bad split '{rec['split']}'", line=lineno)
            prev = hash_split.get(rec["sha256"])
            if prev is not None and prev != rec["split"]:
                raise MalformedRecord(
                    f"sha256 {rec['sha256'][:12]} appears in splits "
                    f"'{prev}' and '{rec['split']}'", line=lineno)
            hash_split[rec["sha256"]] = rec["split"]
            samples.append(ReferringSample(
                prompt=render_prompt(rec["description"]),
                **{k: rec[k] for k in MANIFEST_FIELDS}))
    return DatasetManifest(samples=samples)


# --- image / mask IO -------------------------------------------------------

def _atomic_write(path, payload):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def write_mask(mask, path):
    """Binary PGM, maxval 255, 0=wall, 255=window."""
    mask = np.asarray(mask)
    h, w = mask.shape
    payload = (mask.astype(np.uint8) * 255).tobytes()
    _atomic_write(path, f"P5\n{w} {h}\n255\n".encode() + payload)


def read_mask(path):
    if not os.path.exists(path):
        raise MissingFile(path)
    with open(path, "rb") as fh:
        data = fh.read()
    magic, (w, h), payload = _parse_netpbm(data, path)
    if magic != b"P5":
        raise BadMagic(f"{path}: expected P5, got {magic!r}")
    if len(payload) != w * h:
        raise MalformedRecord(f"{path}: truncated mask payload")
    raw = np.frombuffer(payload, dtype=np.uint8)
    bad = ~np.isin(raw, (0, 255))
    if bad.any():
        raise NonBinaryMaskValue(
            f"{path}: byte {int(raw[bad][0])} is neither 0 nor 255")
    return (raw.reshape(h, w) // 255).astype(np.uint8)


def write_image(image, path):
    """Binary PPM, maxval 255, linear quantization round(v*255)."""
    image = np.asarray(image, dtype=np.float64)
    h, w, _ = image.shape
    payload = np.rint(image * 255.0).astype(np.uint8).tobytes()
    _atomic_write(path, f"P6\n{w} {h}\n255\n".encode() + payload)


def read_image(path):
    if not os.path.exists(path):
        raise MissingFile(path)
    with open(path, "rb") as fh:
        data = fh.read()
    magic, (w, h), payload = _parse_netpbm(data, path)
    if magic != b"P6":
        raise BadMagic(f"{path}: expected P6, got {magic!r}")
    if len(payload) != w * h * 3:
        raise MalformedRecord(f"{path}: truncated image payload")
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return raw.astype(np.float64) / 255.0


def _parse_netpbm(data, path):
    parts = data.split(b"\n", 3)
    if len(parts) < 4:
        raise BadMagic(f"{path}: not a netpbm file")
    magic, dims, maxval, payload = parts
    try:
        w, h = (int(x) for x in dims.split())
    except ValueError:
        raise BadMagic(f"{path}: bad dimensions line {dims!r}")
    if maxval != b"255":
        raise BadMagic(f"{path}: unsupported maxval {maxval!r}")
    return magic, (w, h), payload


# --- whole-dataset generation ----------------------------------------------

def build_dataset(root, count, seed, size=64, styles=STYLES,
                  rows_choices=(1, 2), cols_choices=(1, 2, 3),
                  window_fraction=0.75):
    """Generate `count` referring samples (one per facade; the target class
    alternates with a window bias), write all files under `root`, and return
    the split manifest.

    One referring sample per image keeps content hashes unique, which is
    what makes exact-size splits and hash-disjointness jointly satisfiable.
    Per-facade RNG streams derive from (seed, index) so generation is
    order-independent and reproducible.
    """
    styles = tuple(styles)
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    samples = []
    for idx in range(count):
        rng = np.random.default_rng([seed, idx])
        style = styles[idx % len(styles)]
        spec = FacadeSpec(
            rows=int(rng.choice(rows_choices)),
            cols=int(rng.choice(cols_choices)),
            size=size, style=style)
        image, window, wall = generate_facade(spec, int(rng.integers(2 ** 31)))
        base = f"{style}-{idx:05d}"
        image_path = os.path.join("images", f"{base}.ppm")
        mask_paths = {
            "window": os.path.join("masks", f"{base}-window.pgm"),
            "wall": os.path.join("masks", f"{base}-wall.pgm"),
        }
        write_image(image, os.path.join(root, image_path))
        write_mask(window, os.path.join(root, mask_paths["window"]))
        write_mask(wall, os.path.join(root, mask_paths["wall"]))
        with open(os.path.join(root, image_path), "rb") as fh:
            digest = hashlib.sha256(fh.read()).hexdigest()
        if rng.random() < window_fraction:
            target_class, pool = "window", WINDOW_DESCRIPTIONS
        else:
            target_class, pool = "wall", WALL_DESCRIPTIONS
        description = pool[int(rng.integers(len(pool)))]
        samples.append(make_referring_sample(
            f"{base}-{target_class}", image_path, mask_paths,
            target_class, description, digest))
    manifest = split_and_dedup(samples, seed)
    write_manifest(manifest, os.path.join(root, "manifest.jsonl"))
    return manifest


def load_sample_arrays(root, sample):
    image = read_image(os.path.join(root, sample.image))
    mask = read_mask(os.path.join(root, sample.mask))
    return image, mask
