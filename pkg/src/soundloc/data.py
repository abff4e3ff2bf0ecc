"""Manifests, cocktail-party synthesis and the procedural toy audiovisual dataset.

A toy category is a (shape, colour, tone) triple. Single-source clips show one
shape on a noise background and play its harmonic tone; multi-source clips tile
four single-source frames 2x2 and mix the audio of two of them.
"""
from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .audio import SAMPLE_RATE, AudioClip, load_spectrogram, write_wav
from .errors import InvalidInputError, PartitionError, SchemaError

SPLITS = ("single", "multi")
SUBSETS = ("train", "test")

SHAPES = ("circle", "square", "triangle", "diamond", "cross", "ring", "hbar", "vbar")
COLORS = ((0.95, 0.15, 0.15), (0.15, 0.85, 0.2), (0.2, 0.3, 0.95), (0.95, 0.9, 0.1),
          (0.9, 0.2, 0.9), (0.1, 0.9, 0.9), (0.95, 0.55, 0.1), (0.95, 0.95, 0.95))
TONES_HZ = (300.0, 700.0, 1500.0, 3100.0, 450.0, 1000.0, 2200.0, 5000.0)
MIX_PEAK = 0.9
JITTER_RANGE = (0.5, 1.5)


# ---------------------------------------------------------------- records

@dataclass
class ClipRecord:
    clip_id: str
    audio: str
    frame: str
    split: str
    subset: str = "train"
    category: int | None = None
    box: list | None = None
    categories: list = field(default_factory=list)
    sounding: list = field(default_factory=list)
    boxes: list = field(default_factory=list)
    noisy: bool = False

    def validate(self, line=None):
        if self.split not in SPLITS:
            raise SchemaError(f"split must be one of {SPLITS}, got {self.split!r}", line)
        if self.subset not in SUBSETS:
            raise SchemaError(f"subset must be one of {SUBSETS}, got {self.subset!r}", line)
        if self.split == "single":
            if self.categories or self.sounding or self.boxes:
                raise SchemaError("single-split record must not carry multi-source annotations", line)
        else:
            n = len(self.categories)
            if n == 0 or len(self.sounding) != n or len(self.boxes) != n:
                raise SchemaError("multi-split record needs aligned categories/sounding/boxes", line)
        for b in ([self.box] if self.box is not None else []) + list(self.boxes):
            if len(b) != 4 or not all(isinstance(v, int) for v in b) or b[0] >= b[2] or b[1] >= b[3]:
                raise SchemaError(f"bad box {b!r}; expected [x0, y0, x1, y1] ints", line)

    def to_json(self):
        d = dataclasses.asdict(self)
        if self.split == "single":
            for k in ("categories", "sounding", "boxes"):
                d.pop(k)
        else:
            d.pop("category")
            d.pop("box")
        return d


_FIELDS = {f.name for f in dataclasses.fields(ClipRecord)}
_REQUIRED = ("clip_id", "audio", "frame", "split")


def load_manifest(path) -> list[ClipRecord]:
    """Parse and validate a JSONL manifest; clip ids must not span both splits."""
    records = []
    seen = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON ({exc.msg})", lineno) from exc
            if not isinstance(obj, dict):
                raise SchemaError("record must be a JSON object", lineno)
            unknown = set(obj) - _FIELDS
            if unknown:
                raise SchemaError(f"unknown fields {sorted(unknown)}", lineno)
            missing = [k for k in _REQUIRED if k not in obj]
            if missing:
                raise SchemaError(f"missing fields {missing}", lineno)
            rec = ClipRecord(**obj)
            rec.validate(lineno)
            prev = seen.get(rec.clip_id)
            if prev is not None:
                if prev != rec.split:
                    raise PartitionError(f"clip {rec.clip_id!r} appears in both {prev} and {rec.split} splits")
                raise SchemaError(f"duplicate clip_id {rec.clip_id!r}", lineno)
            seen[rec.clip_id] = rec.split
            records.append(rec)
    return records


def write_manifest(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


# ---------------------------------------------------------------- toy config

@dataclass
class ToyConfig:
    num_categories: int = 4
    clips_per_category: int = 100
    test_clips_per_category: int = 25
    multi_train: int = 200
    multi_test: int = 100
    image_side: int = 64
    duration_s: float = 1.0
    seed: int = 0
    missing_categories: int = 0
    noise_rate: float = 0.0
    min_size: int = 26
    max_size: int = 38

    def __post_init__(self):
        if not 1 <= self.num_categories <= len(SHAPES):
            raise InvalidInputError(f"num_categories must be in [1, {len(SHAPES)}]")
        if not 0 <= self.missing_categories < self.num_categories:
            raise InvalidInputError("missing_categories must be in [0, num_categories)")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise InvalidInputError("noise_rate must be in [0, 1]")
        if self.image_side % 16:
            raise InvalidInputError("image_side must be a multiple of 16")
        if not 4 <= self.min_size <= self.max_size <= self.image_side:
            raise InvalidInputError("shape size range must fit inside the image")
        if (self.multi_train or self.multi_test) and self.num_categories < 4:
            raise InvalidInputError("multi-source synthesis needs at least 4 categories")

    @property
    def shapes(self):
        return SHAPES[:self.num_categories]

    @property
    def colors(self):
        return COLORS[:self.num_categories]

    @property
    def tones(self):
        return TONES_HZ[:self.num_categories]


def clip_rng(seed: int, clip_id: str):
    """Independent RNG stream per (seed, clip id)."""
    return np.random.default_rng([seed, zlib.crc32(clip_id.encode("utf-8"))])


def shape_mask(shape: str, size: int) -> np.ndarray:
    """Boolean ``size x size`` mask whose bounding box is the full square."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    c = size / 2.0
    u, v = (xx - c) / c, (yy - c) / c
    if shape == "circle":
        m = u ** 2 + v ** 2 <= 1.0
    elif shape == "square":
        m = np.ones((size, size), dtype=bool)
    elif shape == "triangle":
        m = np.abs(u) <= (v + 1.0) / 2.0
    elif shape == "diamond":
        m = np.abs(u) + np.abs(v) <= 1.0
    elif shape == "cross":
        m = (np.abs(u) <= 0.3) | (np.abs(v) <= 0.3)
    elif shape == "ring":
        r2 = u ** 2 + v ** 2
        m = (r2 <= 1.0) & (r2 >= 0.3)
    elif shape == "hbar":
        m = np.abs(v) <= 0.45
    elif shape == "vbar":
        m = np.abs(u) <= 0.45
    else:
        raise InvalidInputError(f"unknown shape {shape!r}")
    return _crop_to_fill(m)


def _crop_to_fill(m):
    """Mask rows/cols that are empty are trimmed so the bounding box is exact."""
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    return m[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]


def render_frame(cfg: ToyConfig, category: int, rng):
    """RGB float frame (H, W, 3) in [0, 1] and the exact box of the shape."""
    side = cfg.image_side
    frame = rng.uniform(0.0, 0.35, size=(side, side, 3))
    size = int(rng.integers(cfg.min_size, cfg.max_size + 1))
    mask = shape_mask(cfg.shapes[category], size)
    h, w = mask.shape
    y0 = int(rng.integers(0, side - h + 1))
    x0 = int(rng.integers(0, side - w + 1))
    color = np.array(cfg.colors[category]) * rng.uniform(0.8, 1.0)
    region = frame[y0:y0 + h, x0:x0 + w]
    region[mask] = color
    return frame, [x0, y0, x0 + w, y0 + h]


def render_tone(cfg: ToyConfig, category: int, rng) -> np.ndarray:
    n = int(round(cfg.duration_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    f0 = cfg.tones[category]
    x = np.zeros(n)
    for h, amp in enumerate((1.0, 0.5, 0.25), start=1):
        if h * f0 < 0.47 * SAMPLE_RATE:
            x += amp * np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi))
    x /= np.abs(x).max()
    x *= rng.uniform(0.15, 0.45)
    x += rng.normal(0.0, 0.002, size=n)
    return x


# ---------------------------------------------------------------- synthesis

@dataclass
class CocktailSample:
    frame: np.ndarray  # (H, W, 3)
    audio: np.ndarray
    categories: list
    sounding: list
    boxes: list
    gains: list  # effective gain of each source in the mix (0 for silent ones)


def downsample2(frame):
    h, w = frame.shape[:2]
    return frame.reshape(h // 2, 2, w // 2, 2, -1).mean(axis=(1, 3))


def synthesize_cocktail(frames, audios, categories, boxes, rng) -> CocktailSample:
    """Tile four solo frames 2x2 and mix the audio of two randomly chosen ones.

    Each mixed source gets a uniform gain in [0.5, 1.5]; the sum is then
    scaled to a peak of 0.9. Tile placement is a random permutation drawn
    from ``rng`` and is recorded through the output boxes.
    """
    if len(frames) != 4 or len(audios) != 4 or len(categories) != 4 or len(boxes) != 4:
        raise InvalidInputError("cocktail synthesis needs exactly four solo clips")
    if len(set(categories)) != 4:
        raise InvalidInputError(f"solo clips must have distinct categories, got {categories}")
    lengths = {len(a) for a in audios}
    if len(lengths) != 1:
        raise InvalidInputError(f"solo clips have mismatched durations {sorted(lengths)}")
    side = frames[0].shape[0]
    if any(f.shape != frames[0].shape for f in frames) or side % 2:
        raise InvalidInputError("solo frames must share an even square size")
    half = side // 2
    placement = rng.permutation(4)
    out = np.zeros_like(frames[0], dtype=np.float64)
    out_boxes = []
    for i in range(4):
        r, c = divmod(int(placement[i]), 2)
        oy, ox = r * half, c * half
        out[oy:oy + half, ox:ox + half] = downsample2(np.asarray(frames[i], dtype=np.float64))
        x0, y0, x1, y1 = boxes[i]
        out_boxes.append([x0 // 2 + ox, y0 // 2 + oy, -(-x1 // 2) + ox, -(-y1 // 2) + oy])
    chosen = sorted(rng.choice(4, size=2, replace=False).tolist())
    gains = np.zeros(4)
    mix = np.zeros(lengths.pop())
    for i in chosen:
        gains[i] = rng.uniform(*JITTER_RANGE)
        mix += gains[i] * np.asarray(audios[i], dtype=np.float64)
    peak = np.abs(mix).max()
    if peak > 0:
        gains *= MIX_PEAK / peak
        mix *= MIX_PEAK / peak
    return CocktailSample(frame=out, audio=mix, categories=[int(c) for c in categories],
                         sounding=[i in chosen for i in range(4)], boxes=out_boxes,
                         gains=gains.tolist())


# ---------------------------------------------------------------- generation

def _save_png(path, frame):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8)).save(path)


def _solo(cfg, category, rng):
    frame, box = render_frame(cfg, category, rng)
    return frame, render_tone(cfg, category, rng), box


def generate_toy_dataset(cfg: ToyConfig, out_dir) -> dict:
    """Write media and ``manifest.jsonl`` under ``out_dir``; returns summary counts."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise InvalidInputError(f"output directory {out} is not writable: {exc}") from exc
    n_cat = cfg.num_categories
    present = list(range(n_cat - cfg.missing_categories))
    records = []

    singles = []
    for subset, per_cat in (("train", cfg.clips_per_category), ("test", cfg.test_clips_per_category)):
        for cat in present:
            for j in range(per_cat):
                singles.append((f"s-{subset}-c{cat}-{j:04d}", subset, cat))
    noisy_ids = set()
    n_noisy = int(round(cfg.noise_rate * len(singles)))
    if n_noisy:
        pick = np.random.default_rng([cfg.seed, 7]).choice(len(singles), size=n_noisy, replace=False)
        noisy_ids = {singles[i][0] for i in pick}
    for clip_id, subset, cat in singles:
        rng = clip_rng(cfg.seed, clip_id)
        frame, audio, box = _solo(cfg, cat, rng)
        if clip_id in noisy_ids:
            # replace the clean audio by a two-source mixture with another category
            other = int(rng.choice([c for c in range(n_cat) if c != cat]))
            audio = audio + render_tone(cfg, other, rng)
            audio *= MIX_PEAK / np.abs(audio).max()
        rel_a, rel_f = f"media/{clip_id}.wav", f"media/{clip_id}.png"
        write_wav(out / rel_a, AudioClip(audio, SAMPLE_RATE))
        _save_png(out / rel_f, frame)
        records.append(ClipRecord(clip_id=clip_id, audio=rel_a, frame=rel_f, split="single",
                                  subset=subset, category=cat, box=box, noisy=clip_id in noisy_ids))

    for subset, count in (("train", cfg.multi_train), ("test", cfg.multi_test)):
        for j in range(count):
            clip_id = f"m-{subset}-{j:04d}"
            rng = clip_rng(cfg.seed, clip_id)
            cats = sorted(rng.choice(n_cat, size=4, replace=False).tolist())
            solos = [_solo(cfg, c, rng) for c in cats]
            sample = synthesize_cocktail([s[0] for s in solos], [s[1] for s in solos], cats,
                                         [s[2] for s in solos], rng)
            rel_a, rel_f = f"media/{clip_id}.wav", f"media/{clip_id}.png"
            write_wav(out / rel_a, AudioClip(sample.audio, SAMPLE_RATE))
            _save_png(out / rel_f, sample.frame)
            records.append(ClipRecord(clip_id=clip_id, audio=rel_a, frame=rel_f, split="multi",
                                      subset=subset, categories=sample.categories,
                                      sounding=sample.sounding, boxes=sample.boxes))

    write_manifest(out / "manifest.jsonl", records)
    counts = {}
    for rec in records:
        key = f"{rec.split}/{rec.subset}"
        counts[key] = counts.get(key, 0) + 1
    return {"manifest": str(out / "manifest.jsonl"), "counts": counts,
            "noisy": len(noisy_ids), "categories": n_cat, "present_in_single": present}


# ---------------------------------------------------------------- arrays

def load_frame(path) -> np.ndarray:
    """PNG -> float32 (3, H, W) in [0, 1]."""
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(img.transpose(2, 0, 1))


@dataclass
class ClipArrays:
    """In-memory tensors for a list of records sharing one split."""

    records: list
    frames: np.ndarray  # (N, 3, H, W) float32
    specs: np.ndarray  # (N, T, M) float32

    @property
    def clip_ids(self):
        return [r.clip_id for r in self.records]

    @property
    def labels(self):
        return np.array([-1 if r.category is None else r.category for r in self.records], dtype=np.int64)

    def __len__(self):
        return len(self.records)

    def subset(self, idx):
        idx = np.asarray(idx)
        return ClipArrays([self.records[i] for i in idx], self.frames[idx], self.specs[idx])


def load_arrays(records, root) -> ClipArrays:
    root = Path(root)
    if not records:
        raise InvalidInputError("no records to load")
    frames = np.stack([load_frame(root / r.frame) for r in records])
    specs = np.stack([load_spectrogram(root / r.audio) for r in records])
    return ClipArrays(list(records), frames, specs)


def select(records, split=None, subset=None):
    return [r for r in records
            if (split is None or r.split == split) and (subset is None or r.subset == subset)]
