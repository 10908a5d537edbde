"""Samples, splits, manifest ingestion and the synthetic grating generator."""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

IID = "IID"
OOD = "OOD"
SPLIT_NAMES = ("victim_train", "proxy", "test")
PACKED_MAGIC = b"PRXDATA\x00"

# orientation bins of the synthetic family; class index j uses bin j % 8
N_ORIENTATIONS = 8
# spatial frequency (cycles per image width) of family band j // 8
FREQUENCY_BANDS = (2.5, 4.0, 1.75, 5.0)


@dataclass(frozen=True, eq=False)
class Sample:
    id: int
    image: np.ndarray  # (channels, height, width), float32 in [0, 1]

    def __post_init__(self):
        if self.id < 0:
            raise ValueError("sample ids are non-negative")
        if self.image.ndim != 3:
            raise ValueError(f"image must be (channels, height, width), got shape {self.image.shape}")


@dataclass(frozen=True, eq=False)
class LabeledSample:
    sample: Sample
    label: int
    posterior: np.ndarray | None = None

    def __post_init__(self):
        if self.posterior is not None:
            p = self.posterior
            if abs(float(p.sum()) - 1.0) > 1e-6:
                raise ValueError("posterior must sum to 1")
            if int(np.argmax(p)) != self.label:
                raise ValueError("posterior argmax disagrees with label")

    @property
    def id(self) -> int:
        return self.sample.id

    @property
    def image(self) -> np.ndarray:
        return self.sample.image


@dataclass(frozen=True)
class DatasetSplit:
    victim_train: list[LabeledSample] = field(default_factory=list)
    proxy: list[Sample] = field(default_factory=list)
    test: list[LabeledSample] = field(default_factory=list)
    regime: str = IID

    def __post_init__(self):
        if self.regime not in (IID, OOD):
            raise ValueError(f"regime must be {IID!r} or {OOD!r}")
        groups = [[s.id for s in self.victim_train], [s.id for s in self.proxy], [s.id for s in self.test]]
        seen: set[int] = set()
        for ids in groups:
            if len(set(ids)) != len(ids) or seen & set(ids):
                raise ValueError("sample ids must be unique across the whole split")
            seen |= set(ids)


def stack_images(samples: Iterable[Sample | LabeledSample]) -> np.ndarray:
    arrs = [s.image for s in samples]
    if not arrs:
        return np.zeros((0, 0, 0, 0), dtype=np.float32)
    return np.stack(arrs).astype(np.float32, copy=False)


def labels_of(samples: Iterable[LabeledSample]) -> np.ndarray:
    return np.array([s.label for s in samples], dtype=np.int64)


def dataset_hash(samples: Iterable[Sample | LabeledSample]) -> str:
    """Content hash over ids and image bytes, used for encoder provenance."""
    import hashlib

    h = hashlib.sha256()
    for s in samples:
        h.update(struct.pack("<q", s.id))
        h.update(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------- synthetic data

def render_pattern(family_index: int, image_shape: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """One windowed sinusoidal grating for generator class ``family_index``.

    The class fixes orientation and spatial frequency; position, window size,
    phase, colours, contrast and pixel noise are nuisance draws.
    """
    c, h, w = image_shape
    theta = (family_index % N_ORIENTATIONS) * math.pi / N_ORIENTATIONS + rng.uniform(-0.08, 0.08)
    freq = FREQUENCY_BANDS[(family_index // N_ORIENTATIONS) % len(FREQUENCY_BANDS)]
    freq *= rng.uniform(0.9, 1.1)
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    u = xx * math.cos(theta) + yy * math.sin(theta)
    wave = np.cos(2 * math.pi * freq * u + rng.uniform(0, 2 * math.pi))

    cy, cx = rng.uniform(0.3, 0.7, size=2)
    sigma = rng.uniform(0.35, 0.6)
    window = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    pattern = 0.5 + 0.5 * wave * window * rng.uniform(0.6, 1.0)

    fg = rng.uniform(0.0, 1.0, size=c)
    bg = rng.uniform(0.0, 1.0, size=c)
    # keep enough colour contrast for the grating to stay visible
    if np.abs(fg - bg).max() < 0.4:
        k = int(np.argmax(np.abs(fg - bg)))
        fg[k] = 1.0 - bg[k] if bg[k] < 0.5 else 0.0
    img = bg[:, None, None] + (fg - bg)[:, None, None] * pattern[None]
    img = img + rng.normal(0.0, 0.04, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_generate(
    num_classes: int,
    per_class: int,
    image_shape: Sequence[int] = (3, 16, 16),
    class_set_offset: int = 0,
    seed: int = 0,
    id_start: int = 0,
) -> list[LabeledSample]:
    """Render ``per_class`` samples for each of ``num_classes`` generator classes.

    Label ``k`` is drawn from generator class ``k + class_set_offset``, so two
    calls whose offsets are at least ``num_classes`` apart share no class
    semantics. Samples are interleaved by class and ids run from ``id_start``.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    image_shape = tuple(int(s) for s in image_shape)
    if len(image_shape) != 3 or image_shape[1] < 8 or image_shape[2] < 8:
        raise ValueError(f"image shape {image_shape} too small for the pattern (need at least 8x8)")
    rng = np.random.default_rng(seed)
    out: list[LabeledSample] = []
    next_id = id_start
    for _ in range(per_class):
        for label in range(num_classes):
            img = render_pattern(label + class_set_offset, image_shape, rng)
            out.append(LabeledSample(Sample(next_id, img), label))
            next_id += 1
    return out


def split(items: Sequence, fractions: Sequence[float], seed: int = 0) -> list[list]:
    """Shuffle ``items`` by ``seed`` and cut them into ``len(fractions)`` parts.

    Each part gets ``floor(f * n)`` items; the rounding remainder goes to the
    first part (39,209 items at 0.8/0.2 give 31,368 / 7,841).
    """
    if not items:
        raise ValueError("cannot split an empty dataset")
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ValueError(f"fractions must be non-negative and sum to 1, got {list(fractions)}")
    n = len(items)
    sizes = [int(math.floor(f * n + 1e-9)) for f in fractions]
    sizes[0] += n - sum(sizes)
    order = np.random.default_rng(seed).permutation(n)
    parts, start = [], 0
    for size in sizes:
        parts.append([items[i] for i in order[start:start + size]])
        start += size
    return parts


def make_split(
    regime: str = IID,
    num_classes: int = 8,
    victim_per_class: int = 150,
    proxy_per_class: int = 150,
    test_per_class: int = 50,
    image_shape: Sequence[int] = (3, 16, 16),
    seed: int = 0,
) -> DatasetSplit:
    """Synthetic victim/proxy/test split.

    IID: the proxy is drawn from the victim's own generator classes.
    OOD: the proxy comes from the next ``num_classes`` generator classes, which
    the victim never saw (same pattern family, different class semantics).
    """
    if regime not in (IID, OOD):
        raise ValueError(f"regime must be {IID!r} or {OOD!r}")
    victim = synth_generate(num_classes, victim_per_class, image_shape, 0, seed * 7 + 1, id_start=0)
    test_start = len(victim)
    test = synth_generate(num_classes, test_per_class, image_shape, 0, seed * 7 + 2, id_start=test_start)
    proxy_start = test_start + len(test)
    offset = 0 if regime == IID else num_classes
    proxy = synth_generate(num_classes, proxy_per_class, image_shape, offset, seed * 7 + 3, id_start=proxy_start)
    return DatasetSplit(victim, [p.sample for p in proxy], test, regime)


# ---------------------------------------------------------------- ingestion

def _load_image(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        arr = np.load(path)
    else:
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    arr = np.asarray(arr)
    if np.issubdtype(arr.dtype, np.integer):
        arr = arr.astype(np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    elif arr.ndim == 3 and arr.shape[-1] in (1, 3, 4) and arr.shape[0] not in (1, 3, 4):
        arr = np.transpose(arr, (2, 0, 1))
    return np.clip(arr, 0.0, 1.0).astype(np.float32)


def read_manifest(manifest: str | Path) -> list[tuple[int, str, int | None, str]]:
    """Parse ``id<TAB>relative-path<TAB>label<TAB>split`` lines; ``-`` marks no label."""
    records = []
    text = Path(manifest).read_text()
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{manifest}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        sid, rel, label, which = parts
        if which not in SPLIT_NAMES:
            raise ValueError(f"{manifest}:{lineno}: unknown split {which!r}; expected one of {SPLIT_NAMES}")
        records.append((int(sid), rel, None if label in ("-", "") else int(label), which))
    return records


def ingest_directory(
    path: str | Path, manifest: str | Path, num_classes: int | None = None, regime: str = IID
) -> DatasetSplit:
    """Load images listed in ``manifest`` (paths relative to ``path``) into a split."""
    root = Path(path)
    records = read_manifest(manifest)
    ids = [r[0] for r in records]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise ValueError(f"duplicate sample id(s) in manifest: {dupes}")
    groups: dict[str, list] = {k: [] for k in SPLIT_NAMES}
    for sid, rel, label, which in sorted(records):
        try:
            img = _load_image(root / rel)
        except Exception as exc:
            raise OSError(f"cannot read image {rel!r} for sample {sid}: {exc}") from exc
        sample = Sample(sid, img)
        if which == "proxy":
            groups["proxy"].append(sample)
            continue
        if label is None:
            raise ValueError(f"sample {sid} in split {which!r} needs a label")
        if label < 0 or (num_classes is not None and label >= num_classes):
            raise ValueError(f"label {label} of sample {sid} out of range [0, {num_classes})")
        groups[which].append(LabeledSample(sample, label))
    return DatasetSplit(groups["victim_train"], groups["proxy"], groups["test"], regime)


def save_packed(path: str | Path, samples: Sequence[Sample | LabeledSample]) -> None:
    """Header (count, shape, dtype, ids, labels) followed by contiguous float32 LE images."""
    shape = list(samples[0].image.shape) if samples else []
    labels = [s.label if isinstance(s, LabeledSample) else None for s in samples]
    header = {
        "count": len(samples),
        "shape": shape,
        "dtype": "float32",
        "ids": [s.id for s in samples],
        "labels": labels,
    }
    head = json.dumps(header, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(PACKED_MAGIC)
    buf.write(struct.pack("<I", len(head)))
    buf.write(head)
    for s in samples:
        buf.write(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_packed(path: str | Path) -> list[Sample | LabeledSample]:
    data = Path(path).read_bytes()
    if data[:len(PACKED_MAGIC)] != PACKED_MAGIC:
        raise ValueError(f"{path}: not a packed dataset")
    off = len(PACKED_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off:off + hlen])
    off += hlen
    count, shape = header["count"], tuple(header["shape"])
    per = int(np.prod(shape)) if count else 0
    arr = np.frombuffer(data, dtype="<f4", count=count * per, offset=off).reshape((count, *shape))
    out: list[Sample | LabeledSample] = []
    for i, (sid, label) in enumerate(zip(header["ids"], header["labels"])):
        s = Sample(sid, arr[i].astype(np.float32))
        out.append(s if label is None else LabeledSample(s, label))
    return out
