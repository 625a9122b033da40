"""Dataset manifests, identity-disjoint splits and image codecs.

A manifest is a JSONL file, one sample per line::

    {"path": "t2i/id003_05.png", "label": 1, "identity": "id003",
     "subset": "T2I", "method": "synth-smooth"}

Paths are relative to the dataset root, which defaults to the directory
holding the manifest.
"""

from __future__ import annotations

import io
import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path, PurePosixPath

import numpy as np
from PIL import Image, UnidentifiedImageError

from ._validation import check_image
from .nn import make_rng

SUBSETS = ("T2I", "I2I", "FS", "FE", "REAL", "OTHER")
FORGED_SUBSETS = ("T2I", "I2I", "FS", "FE")
SPLITS = ("train", "val", "test")
FIELDS = ("path", "label", "identity", "subset", "method")


class ManifestError(ValueError):
    """Malformed or inconsistent manifest content."""


class DecodeError(ValueError):
    """Unsupported or corrupt image payload."""


@dataclass(frozen=True)
class Sample:
    path: str
    label: int
    identity: str
    subset: str = "OTHER"
    method: str = ""

    def __post_init__(self):
        if self.label not in (0, 1) or isinstance(self.label, bool):
            raise ManifestError(f"label must be 0 or 1, got {self.label!r}")
        if not isinstance(self.identity, str) or not self.identity:
            raise ManifestError("identity must be a non-empty string")
        if self.subset not in SUBSETS:
            raise ManifestError(f"subset must be one of {SUBSETS}, got {self.subset!r}")
        p = PurePosixPath(self.path)
        if not self.path or p.is_absolute() or ".." in p.parts:
            raise ManifestError(f"path must be relative to the dataset root: {self.path!r}")


@dataclass
class Manifest:
    root: Path
    samples: list = field(default_factory=list)

    def __post_init__(self):
        self.root = Path(self.root)
        seen = {}
        for i, s in enumerate(self.samples):
            if s.path in seen:
                raise ManifestError(
                    f"duplicate path {s.path!r} at samples {seen[s.path]} and {i}"
                )
            seen[s.path] = i

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def labels(self):
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def identities(self):
        return sorted({s.identity for s in self.samples})

    def resolve(self, sample):
        return self.root / sample.path

    def subset(self, subsets=None, identities=None):
        """Samples whose subset tag / identity is in the given collections."""
        keep = [
            s
            for s in self.samples
            if (subsets is None or s.subset in subsets)
            and (identities is None or s.identity in identities)
        ]
        return Manifest(self.root, keep)

    def select_split(self, assignment, split):
        ids = {i for i, sp in assignment.items() if sp == split}
        return self.subset(identities=ids)

    def check_trainable(self):
        labels = set(self.labels.tolist())
        if labels != {0, 1}:
            raise ManifestError(f"a trainable manifest needs both labels, found {sorted(labels)}")


def load_manifest(path, root=None):
    """Parse a JSONL manifest; errors cite 1-based line numbers."""
    path = Path(path)
    root = path.parent if root is None else Path(root)
    samples = []
    first_line = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}, line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(record, dict):
                raise ManifestError(f"{path}, line {lineno}: expected a JSON object")
            for key in ("path", "label", "identity"):
                if key not in record:
                    raise ManifestError(f"{path}, line {lineno}: missing field {key!r}")
            extra = sorted(set(record) - set(FIELDS))
            if extra:
                warnings.warn(f"{path}, line {lineno}: ignoring unknown fields {extra}", stacklevel=2)
            try:
                sample = Sample(**{k: record[k] for k in FIELDS if k in record})
            except (ManifestError, TypeError) as exc:
                raise ManifestError(f"{path}, line {lineno}: {exc}") from None
            if sample.path in first_line:
                raise ManifestError(
                    f"{path}: duplicate path {sample.path!r} on lines "
                    f"{first_line[sample.path]} and {lineno}"
                )
            first_line[sample.path] = lineno
            samples.append(sample)
    return Manifest(root, samples)


def save_manifest(manifest, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for s in manifest.samples:
            fh.write(json.dumps(asdict(s), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# splitting


def largest_remainder(n, ratios):
    """Integer bucket sizes summing to ``n``; leftover units go to the largest
    fractional parts, earlier buckets first on ties."""
    quotas = [r * n for r in ratios]
    counts = [int(np.floor(q)) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda k: (-(quotas[k] - counts[k]), k))
    for k in order[: n - sum(counts)]:
        counts[k] += 1
    return counts


def identity_disjoint_split(manifest, ratios=(0.8, 0.1, 0.1), seed=0):
    """Assign every identity to exactly one of train/val/test.

    Identities are sorted, shuffled with the seeded package PRNG and cut
    into consecutive runs whose sizes follow ``ratios`` under
    largest-remainder rounding.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ManifestError(f"ratios must be three nonnegative numbers summing to 1, got {ratios}")
    ids = manifest.identities() if isinstance(manifest, Manifest) else sorted(set(manifest))
    needed = sum(r > 0 for r in ratios)
    if len(ids) < max(needed, 3):
        raise ManifestError(
            f"need at least {max(needed, 3)} distinct identities to split, got {len(ids)}"
        )
    order = make_rng(seed).permutation(len(ids))
    counts = largest_remainder(len(ids), ratios)
    assignment = {}
    start = 0
    for split, count in zip(SPLITS, counts):
        for k in order[start : start + count]:
            assignment[ids[k]] = split
        start += count
    return dict(sorted(assignment.items()))


def save_split(assignment, path):
    Path(path).write_text(json.dumps(assignment, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_split(path):
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict) or any(v not in SPLITS for v in data.values()):
        raise ManifestError(f"{path}: split file must map identity -> one of {SPLITS}")
    return data


# ---------------------------------------------------------------------------
# image codecs


def decode_image(data):
    """Decode PNG/JPEG bytes into a float64 (H, W, C) array with values v/255."""
    if data[:8] != b"\x89PNG\r\n\x1a\n" and data[:3] != b"\xff\xd8\xff":
        raise DecodeError("not a PNG or JPEG payload")
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if im.mode not in ("1", "I;16", "I") else "L")
            arr = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode image: {exc}") from None
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr.astype(np.float64) / 255.0


def to_uint8(img):
    img = check_image(img)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def _pil(img):
    arr = to_uint8(img)
    return Image.fromarray(arr[:, :, 0] if arr.shape[2] == 1 else arr, mode="L" if arr.shape[2] == 1 else "RGB")


def encode_png(img):
    buf = io.BytesIO()
    _pil(img).save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def encode_jpeg(img, quality=90):
    buf = io.BytesIO()
    _pil(img).save(buf, format="JPEG", quality=int(quality), optimize=False, progressive=False)
    return buf.getvalue()


def read_image(path):
    return decode_image(Path(path).read_bytes())


def write_png(path, img):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_png(img))


def resize_bilinear(img, size):
    """Half-pixel-centred bilinear resize of an (H, W, C) image to size x size."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (size, size):
        return img.copy()

    def axis(n_in):
        pos = (np.arange(size) + 0.5) * n_in / size - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    ylo, yhi, fy = axis(h)
    xlo, xhi, fx = axis(w)
    top = img[ylo][:, xlo] * (1 - fx)[None, :, None] + img[ylo][:, xhi] * fx[None, :, None]
    bot = img[yhi][:, xlo] * (1 - fx)[None, :, None] + img[yhi][:, xhi] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]


def worker_count():
    """Worker-pool size from EGR_FORGE_THREADS (0 or unset = CPU count)."""
    try:
        n = int(os.environ.get("EGR_FORGE_THREADS", "0"))
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def load_images(manifest, size=64, channels=3):
    """Decode every sample to a (N, size, size, channels) stack in manifest order."""

    def one(sample):
        img = read_image(manifest.resolve(sample))
        if img.shape[2] != channels:
            img = np.repeat(img, channels, axis=2) if img.shape[2] == 1 else img.mean(axis=2, keepdims=True)
        return resize_bilinear(img, size)

    if not len(manifest):
        return np.zeros((0, size, size, channels))
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        return np.stack(list(pool.map(one, manifest.samples)))
