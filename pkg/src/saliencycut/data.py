"""Dataset model, PPM/PGM codecs, and the synthetic defect-texture corpus.

Corpora are directories shaped root/{normal, anomaly/<type>}/ of PPM images
plus a manifest CSV. The generator renders seeded base textures (stripes,
checker, value noise) and stamps exactly one defect per anomaly, logging
the defect mask alongside.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataError

TEXTURES = ("stripes", "checker", "noise")
DEFECTS = ("blotch", "scratch", "hole", "hue_shift")

_IMAGE_SUFFIXES = (".ppm", ".pgm", ".png")


@dataclass
class Sample:
    """One image with its label and anomaly-type tag."""

    image: np.ndarray  # [C,H,W] float64 in [0,1]
    label: int
    type_tag: str
    id: str

    def __post_init__(self):
        if self.image.ndim != 3:
            raise ContractError(f"sample image must be [C,H,W], got {self.image.shape}")
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise ContractError(f"sample {self.id} has pixels outside [0,1]")
        if self.label not in (0, 1):
            raise ContractError(f"sample {self.id} has label {self.label}")
        if (self.label == 0) != (self.type_tag == "normal"):
            raise ContractError(
                f"sample {self.id}: label {self.label} inconsistent with tag "
                f"'{self.type_tag}'"
            )


@dataclass
class Dataset:
    """Normal and anomalous samples with unique ids."""

    normals: list
    anomalies: list
    manifests: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [s.id for s in self.normals] + [s.id for s in self.anomalies]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate sample ids in dataset")
        if any(s.label != 0 for s in self.normals) or any(
            s.label != 1 for s in self.anomalies
        ):
            raise DataError("samples sorted into the wrong branch")

    @property
    def all_samples(self):
        return self.normals + self.anomalies

    def anomaly_types(self):
        return sorted({s.type_tag for s in self.anomalies})

    def anomalies_of_type(self, tag):
        return [s for s in self.anomalies if s.type_tag == tag]


# ---------------------------------------------------------------- codecs


def quantize(image):
    """Float [0,1] to uint8 with round-half-up."""
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _read_pnm_tokens(raw, count):
    tokens = []
    pos = 0
    while len(tokens) < count:
        if pos >= len(raw):
            raise ValueError("truncated PNM header")
        ch = raw[pos : pos + 1]
        if ch == b"#":
            pos = raw.index(b"\n", pos) + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(raw) and not raw[end : end + 1].isspace():
                end += 1
            tokens.append(raw[pos:end])
            pos = end
    return tokens, pos + 1  # consume the single whitespace after the last token


def write_ppm(path, image):
    """Write a [3,H,W] float image in [0,1] as binary PPM (maxval 255)."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ContractError(f"write_ppm needs [3,H,W], got {image.shape}")
    _, h, w = image.shape
    data = quantize(image).transpose(1, 2, 0).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data)


def write_pgm(path, values, maxval=255):
    """Write a [H,W] array as binary PGM; maxval 1 gives a bilevel file."""
    values = np.asarray(values)
    h, w = values.shape
    if maxval == 255:
        data = quantize(values.astype(np.float64)).tobytes()
    else:
        data = values.astype(np.uint8).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(data)


def _read_pnm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported PNM magic {magic!r}")
    tokens, pos = _read_pnm_tokens(raw[2:], 3)
    w, h, maxval = (int(t) for t in tokens)
    channels = 3 if magic == b"P6" else 1
    pixels = np.frombuffer(raw[2 + pos :], dtype=np.uint8, count=h * w * channels)
    arr = pixels.reshape(h, w, channels).transpose(2, 0, 1).astype(np.float64)
    return arr / float(maxval)


def read_image(path):
    """Read PPM/PGM (or PNG when Pillow is present) as float64 [C,H,W] in [0,1]."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".png":
            from PIL import Image

            with Image.open(path) as img:
                arr = np.asarray(img.convert("RGB"), dtype=np.float64)
            return arr.transpose(2, 0, 1) / 255.0
        return _read_pnm(path)
    except OSError:
        raise
    except Exception as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


def write_image(path, image):
    """Write [3,H,W] float image as PPM or (with Pillow) PNG by extension."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(quantize(image).transpose(1, 2, 0)).save(path)
    else:
        write_ppm(path, image)


def resize_nearest(image, size):
    """Nearest-neighbor resize of [C,H,W] to [C,size,size]."""
    _, h, w = image.shape
    if (h, w) == (size, size):
        return image
    rows = np.minimum((np.arange(size) + 0.5) * h / size, h - 1).astype(np.int64)
    cols = np.minimum((np.arange(size) + 0.5) * w / size, w - 1).astype(np.int64)
    return image[:, rows[:, None], cols[None, :]]


# ---------------------------------------------------------------- loading


def _gray_to_rgb(image):
    return np.repeat(image, 3, axis=0) if image.shape[0] == 1 else image


def load_dataset(root, input_size=64):
    """Load root/{normal, anomaly/<type>}/ images into a Dataset.

    Images normalize to [0,1] and resize (nearest neighbor) to input_size;
    pass input_size=None to keep native resolution. A missing anomaly
    directory is fine (anomaly-free corpora); an empty normal directory is
    an error.
    """
    root = Path(root)
    normal_dir = root / "normal"
    if not normal_dir.is_dir():
        raise DataError(f"missing normal/ directory under {root}")

    def load_one(path, tag, label):
        try:
            img = _gray_to_rgb(read_image(path))
        except OSError as exc:
            raise OSError(f"unreadable image {path}: {exc}") from exc
        if input_size is not None:
            img = resize_nearest(img, input_size)
        sid = path.relative_to(root).with_suffix("").as_posix()
        return Sample(img, label, tag, sid)

    def image_files(directory):
        return sorted(
            p for p in directory.iterdir()
            if p.is_file() and p.suffix.lower() in _IMAGE_SUFFIXES
        )

    normals = [load_one(p, "normal", 0) for p in image_files(normal_dir)]
    if not normals:
        raise DataError(f"no normal images under {normal_dir}")
    anomalies = []
    anomaly_dir = root / "anomaly"
    if anomaly_dir.is_dir():
        for tag_dir in sorted(p for p in anomaly_dir.iterdir() if p.is_dir()):
            anomalies.extend(load_one(p, tag_dir.name, 1) for p in image_files(tag_dir))

    manifests = {}
    splits_dir = root / "splits"
    if splits_dir.is_dir():
        for mpath in sorted(splits_dir.glob("*.txt")):
            manifests[mpath.stem] = mpath.read_text().split()
    return Dataset(normals, anomalies, manifests)


# ---------------------------------------------------------------- synthesis


@dataclass(frozen=True)
class CorpusSpec:
    """What to synthesize: one texture family, defect types, and counts."""

    texture: str = "stripes"
    defects: tuple = ("blotch", "scratch", "hole")
    n_normal: int = 200
    per_defect: tuple = (20, 20, 20)
    size: int = 64

    def __post_init__(self):
        if self.texture not in TEXTURES:
            raise ConfigError(f"unknown texture '{self.texture}', choose from {TEXTURES}")
        unknown = [d for d in self.defects if d not in DEFECTS]
        if unknown:
            raise ConfigError(f"unknown defect kinds {unknown}, choose from {DEFECTS}")
        counts = self.per_defect
        if isinstance(counts, int):
            counts = (counts,) * len(self.defects)
            object.__setattr__(self, "per_defect", counts)
        if len(counts) != len(self.defects) or any(c < 0 for c in counts):
            raise ConfigError(
                f"per_defect {counts} must align with defects {self.defects}"
            )
        if self.n_normal < 2:
            raise ConfigError("need at least two normal samples")
        if self.size < 32:
            raise ConfigError(f"corpus size {self.size} too small for defect geometry")


def _render_stripes(size, rng):
    angle = np.deg2rad(35.0 + rng.uniform(-6.0, 6.0))
    period = rng.uniform(7.0, 10.0)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    wave = 0.5 + 0.5 * np.sin(
        2.0 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)) / period + phase
    )
    lo = np.array([0.32, 0.27, 0.22]) + rng.uniform(-0.03, 0.03, 3)
    hi = np.array([0.78, 0.73, 0.64]) + rng.uniform(-0.03, 0.03, 3)
    img = lo[:, None, None] + (hi - lo)[:, None, None] * wave[None]
    img += rng.normal(0.0, 0.01, img.shape)
    return np.clip(img, 0.15, 0.95)


def _render_checker(size, rng):
    tile = int(rng.integers(6, 11))
    oy, ox = int(rng.integers(0, tile)), int(rng.integers(0, tile))
    yy, xx = np.mgrid[0:size, 0:size]
    pattern = (((yy + oy) // tile + (xx + ox) // tile) % 2).astype(np.float64)
    a = np.array([0.30, 0.33, 0.40]) + rng.uniform(-0.03, 0.03, 3)
    b = np.array([0.72, 0.68, 0.60]) + rng.uniform(-0.03, 0.03, 3)
    img = a[:, None, None] + (b - a)[:, None, None] * pattern[None]
    img += rng.normal(0.0, 0.01, img.shape)
    return np.clip(img, 0.15, 0.95)


def _value_noise(size, cell, rng):
    g = size // cell + 2
    lattice = rng.random((g, g))
    t = (np.arange(size) + 0.5) / cell
    i0 = np.floor(t).astype(np.int64)
    frac = t - i0
    frac = frac * frac * (3.0 - 2.0 * frac)  # smoothstep
    fy, fx = frac[:, None], frac[None, :]
    v00 = lattice[np.ix_(i0, i0)]
    v01 = lattice[np.ix_(i0, i0 + 1)]
    v10 = lattice[np.ix_(i0 + 1, i0)]
    v11 = lattice[np.ix_(i0 + 1, i0 + 1)]
    top = v00 + fx * (v01 - v00)
    bottom = v10 + fx * (v11 - v10)
    return top + fy * (bottom - top)


def _render_noise(size, rng):
    coarse = _value_noise(size, 16, rng)
    fine = _value_noise(size, 6, rng)
    fld = 0.7 * coarse + 0.3 * fine
    lo = np.array([0.28, 0.30, 0.26]) + rng.uniform(-0.03, 0.03, 3)
    hi = np.array([0.76, 0.70, 0.66]) + rng.uniform(-0.03, 0.03, 3)
    img = lo[:, None, None] + (hi - lo)[:, None, None] * fld[None]
    img += rng.normal(0.0, 0.01, img.shape)
    return np.clip(img, 0.15, 0.95)


_RENDERERS = {"stripes": _render_stripes, "checker": _render_checker, "noise": _render_noise}


def render_texture(kind, size, rng):
    """Defect-free base texture in [0.15, 0.95], shape [3,size,size]."""
    return _RENDERERS[kind](size, rng)


def _apply_blotch(img, size, rng):
    cy, cx = rng.uniform(12.0, size - 12.0, 2)
    r1, r2 = rng.uniform(5.0, 10.0, 2)
    theta = rng.uniform(0.0, np.pi)
    factor = rng.uniform(0.30, 0.55)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = (dx * np.cos(theta) + dy * np.sin(theta)) / r1
    v = (-dx * np.sin(theta) + dy * np.cos(theta)) / r2
    mask = u * u + v * v <= 1.0
    out = img.copy()
    out[:, mask] *= factor
    return out, mask


def _apply_scratch(img, size, rng):
    cy, cx = rng.uniform(12.0, size - 12.0, 2)
    angle = rng.uniform(0.0, np.pi)
    length = rng.uniform(18.0, 36.0)
    thickness = rng.uniform(1.5, 3.0)
    dy, dx = np.sin(angle), np.cos(angle)
    p0 = np.array([cy - dy * length / 2, cx - dx * length / 2])
    p1 = np.array([cy + dy * length / 2, cx + dx * length / 2])
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    seg = p1 - p0
    t = ((yy - p0[0]) * seg[0] + (xx - p0[1]) * seg[1]) / (seg @ seg)
    t = np.clip(t, 0.0, 1.0)
    dist2 = (yy - (p0[0] + t * seg[0])) ** 2 + (xx - (p0[1] + t * seg[1])) ** 2
    mask = dist2 <= thickness * thickness
    out = img.copy()
    out[:, mask] = 0.98
    return out, mask


def _apply_hole(img, size, rng):
    cy, cx = rng.uniform(11.0, size - 11.0, 2)
    r = rng.uniform(4.0, 8.0)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    out = img.copy()
    out[:, mask] = 0.02
    return out, mask


def _apply_hue_shift(img, size, rng):
    cy, cx = rng.uniform(12.0, size - 12.0, 2)
    r = rng.uniform(6.0, 10.0)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    out = img.copy()
    out[0, mask] = np.clip(out[0, mask] + 0.30, 0.0, 1.0)
    out[1, mask] = np.clip(out[1, mask] - 0.15, 0.0, 1.0)
    return out, mask


_DEFECT_APPLIERS = {
    "blotch": _apply_blotch,
    "scratch": _apply_scratch,
    "hole": _apply_hole,
    "hue_shift": _apply_hue_shift,
}


def apply_defect(image, kind, size, rng):
    """Stamp one defect; returns (image, boolean defect mask)."""
    return _DEFECT_APPLIERS[kind](image, size, rng)


def _mask_bbox(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return f"{rows[0]}:{rows[-1] + 1}:{cols[0]}:{cols[-1] + 1}"


def per_image_seed(corpus_seed, index):
    """Self-contained per-image seed; the manifest row alone replays an image."""
    return int(np.random.SeedSequence([corpus_seed, index]).generate_state(1, np.uint64)[0])


def synth_corpus(spec, seed, out_dir):
    """Write a corpus to disk (images, masks, manifest) and load it back.

    Fully seeded: the same (spec, seed) reproduces every byte.
    """
    out = Path(out_dir)
    (out / "normal").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    plan = [("normal", i) for i in range(spec.n_normal)]
    for tag, count in zip(spec.defects, spec.per_defect):
        (out / "anomaly" / tag).mkdir(parents=True, exist_ok=True)
        plan.extend((tag, i) for i in range(count))

    rows = []
    for index, (tag, serial) in enumerate(plan):
        sseed = per_image_seed(seed, index)
        rng = np.random.default_rng(sseed)
        base = render_texture(spec.texture, spec.size, rng)
        stem = f"{tag}_{serial:04d}"
        if tag == "normal":
            rel = Path("normal") / f"{stem}.ppm"
            write_ppm(out / rel, base)
            rows.append((f"normal/{stem}", rel.as_posix(), 0, tag, "", sseed))
        else:
            img, mask = apply_defect(base, tag, spec.size, rng)
            rel = Path("anomaly") / tag / f"{stem}.ppm"
            write_ppm(out / rel, img)
            write_pgm(out / "masks" / f"{stem}.pgm", mask.astype(np.uint8), maxval=1)
            rows.append(
                (f"anomaly/{tag}/{stem}", rel.as_posix(), 1, tag, _mask_bbox(mask), sseed)
            )

    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "path", "label", "type_tag", "bbox", "seed"])
        writer.writerows(rows)
    return load_dataset(out, input_size=spec.size)
