"""Deterministic synthetic pristine/forged face-proxy dataset.

Every identity gets a seeded cartoon face (skin ellipse, eyes, mouth, hair
band over a background). Pristine images add fine pixel-scale texture, a
stand-in for camera detail. Each forged subset starts from the same render
and replaces that texture differently, and also carries its own global
colour or contrast signature:

=====  ==========================================  ========================
tag    texture                                      signature
=====  ==========================================  ========================
T2I    blurred texture (less high-frequency power)  red shift
I2I    low-pass texture (steeper spectral slope)    blue shift
FS     inner face recoloured from another identity  green-magenta tint of
       with blurred texture, feather-blended;       the swapped region
       attenuated texture elsewhere
FE     texture strongly attenuated                  contrast and saturation
                                                    boost
=====  ==========================================  ========================

The signatures make each subset easy to detect in-domain but do not carry
over to other subsets; the reduced fine texture is shared by all of them.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .manifest import FORGED_SUBSETS, Manifest, Sample, save_manifest, write_png
from .edges import LUMA
from .nn import make_rng

SIZE = 64

# zero-luma colour direction: invisible to grayscale edge graphs
GREEN_MAGENTA = np.array([-1.0, 0.6, -0.5])
RED = np.array([1.0, 0.0, 0.0])
BLUE = np.array([0.0, 0.0, 1.0])

METHODS = {
    "REAL": "camera-texture",
    "T2I": "blurred-texture+warm",
    "I2I": "lowpass-texture+cool",
    "FS": "face-swap-blend",
    "FE": "attenuated-texture+contrast",
}


@dataclass(frozen=True)
class SynthSpec:
    """Generator settings; ``texture`` and ``signature`` set the difficulty.

    ``texture`` is the standard deviation of pristine fine texture and
    ``signature`` scales the per-subset colour/contrast offsets.
    """

    identities: int = 100
    images_per_identity: int = 20
    size: int = SIZE
    seed: int = 0
    texture: float = 0.025
    signature: float = 0.12

    def __post_init__(self):
        if self.identities < 10:
            raise ValueError(f"need at least 10 identities, got {self.identities}")
        if self.images_per_identity < 1:
            raise ValueError("images_per_identity must be >= 1")
        if self.size != SIZE:
            raise ValueError(f"only {SIZE}x{SIZE} images are supported")

    def to_dict(self):
        return asdict(self)


def _soft(d, width):
    # smooth inside-indicator from a signed distance-like field (inside: d < 0)
    return 1.0 / (1.0 + np.exp(np.clip(d / width, -50, 50)))


def _blur(field, sigma):
    r = max(1, int(round(3 * sigma)))
    x = np.arange(-r, r + 1)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    out = field
    for axis in (0, 1):
        pad = [(0, 0)] * field.ndim
        pad[axis] = (r, r)
        p = np.pad(out, pad, mode="reflect")
        n = field.shape[axis]
        out = sum(w * np.take(p, np.arange(i, i + n), axis=axis) for i, w in enumerate(k))
    return out


def identity_params(seed, index):
    rng = make_rng(seed, 0, index)
    return {
        "background": rng.uniform(0.2, 0.35, 3),
        "skin": np.clip(np.array([0.7, 0.52, 0.44]) + rng.normal(0, 0.04, 3), 0.3, 0.95),
        "face_center": np.array([rng.normal(0, 0.04), rng.normal(0.05, 0.04)]),
        "face_radii": np.array([rng.uniform(0.5, 0.62), rng.uniform(0.65, 0.78)]),
        "eye_y": rng.uniform(-0.22, -0.08),
        "eye_dx": rng.uniform(0.2, 0.3),
        "eye_r": rng.uniform(0.07, 0.11),
        "eye_color": rng.uniform(0.05, 0.3, 3),
        "mouth_y": rng.uniform(0.32, 0.45),
        "mouth_w": rng.uniform(0.18, 0.3),
        "mouth_color": np.clip(np.array([0.65, 0.28, 0.28]) + rng.normal(0, 0.05, 3), 0, 1),
        "hair": rng.uniform(0.05, 0.45, 3),
        "hair_line": rng.uniform(-0.55, -0.4),
    }


def render_face(params, rng, size=SIZE, features=None, region=None):
    """Clean (texture-free) render. ``features`` overrides the inner-face
    parameters (eyes, mouth) for face swaps; ``region`` returns the
    inner-face mask as well."""
    yy, xx = np.mgrid[0:size, 0:size]
    yy = (yy + 0.5) / size * 2 - 1
    xx = (xx + 0.5) / size * 2 - 1
    shift = rng.normal(0, 0.03, 2)
    gain = rng.uniform(0.92, 1.08)
    light = rng.normal(0, 0.06, 2)
    xx = xx - shift[0]
    yy = yy - shift[1]
    w = 2.0 / size
    p = params
    f = p if features is None else features

    img = np.broadcast_to(p["background"], (size, size, 3)).copy()
    cx, cy = p["face_center"]
    rx, ry = p["face_radii"]
    face_d = np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2) - 1.0
    face = _soft(face_d * min(rx, ry), w)
    img = img * (1 - face[..., None]) + p["skin"] * face[..., None]
    hair = face * _soft(yy - p["hair_line"] - 0.08 * np.cos(3 * xx), w)
    img = img * (1 - hair[..., None]) + p["hair"] * hair[..., None]
    for side in (-1, 1):
        d = np.hypot(xx - cx - side * f["eye_dx"], (yy - cy - f["eye_y"]) * 1.4) - f["eye_r"]
        eye = _soft(d, w)
        img = img * (1 - eye[..., None]) + f["eye_color"] * eye[..., None]
    d = np.hypot((xx - cx) / f["mouth_w"], (yy - cy - f["mouth_y"]) / 0.06) - 1.0
    mouth = _soft(d * 0.06, w)
    img = img * (1 - mouth[..., None]) + f["mouth_color"] * mouth[..., None]
    img = img * gain * (1 + light[0] * xx[..., None] + light[1] * yy[..., None])
    if region is None:
        return img
    inner = _soft(np.sqrt(((xx - cx) / (0.9 * rx)) ** 2 + ((yy - cy - 0.05) / (0.85 * ry)) ** 2) - 1.0, 0.08)
    return img, inner


def camera_texture(rng, size, amplitude):
    luma = rng.normal(0, amplitude, (size, size, 1))
    chroma = rng.normal(0, amplitude * 0.3, (size, size, 3))
    return luma + chroma


def render_sample(spec, identity, k, subset):
    """One image of ``identity`` (index ``k``) for a subset tag, in [0, 1]."""
    params = identity_params(spec.seed, identity)
    code = ("REAL",) + FORGED_SUBSETS
    rng = make_rng(spec.seed, 1, identity, k)
    # same base render and texture draw for the pristine and forged versions
    base, inner = render_face(params, rng, spec.size, region=True)
    tex = camera_texture(rng, spec.size, spec.texture)
    noise_rng = make_rng(spec.seed, 2, identity, k, code.index(subset))
    s = spec.signature
    if subset == "REAL":
        img = base + tex
    elif subset == "T2I":
        img = base + _blur(tex, 1.0) + RED * s
    elif subset == "I2I":
        low = _blur(camera_texture(noise_rng, spec.size, spec.texture), 2.5)
        low *= 0.5 * spec.texture / (low.std() + 1e-12)
        img = base + low + BLUE * s
    elif subset == "FS":
        # donor colours on the target geometry, no ghost features
        donor = identity_params(spec.seed, (identity + 1 + k) % spec.identities)
        features = dict(params, eye_color=donor["eye_color"], mouth_color=donor["mouth_color"])
        swapped = render_face(params, make_rng(spec.seed, 1, identity, k), spec.size, features=features)
        swapped = swapped + 0.3 * _blur(tex, 1.5) + GREEN_MAGENTA * 1.5 * s
        m = inner[..., None]
        img = (base + 0.6 * tex) * (1 - m) + swapped * m
    elif subset == "FE":
        img = 0.5 + (1.0 + 3.0 * s) * (base + 0.3 * tex - 0.5)
        gray = img @ LUMA[:, None]
        img = gray + (1.0 + 5.0 * s) * (img - gray)
    else:
        raise ValueError(f"unknown subset {subset!r}")
    return np.clip(img, 0.0, 1.0)


def quantize(img):
    return np.rint(np.clip(img, 0, 1) * 255.0) / 255.0


def iter_samples(spec):
    """Yield (Sample, image) pairs in manifest order: pristine, then subsets."""
    for subset in ("REAL",) + FORGED_SUBSETS:
        for identity in range(spec.identities):
            for k in range(spec.images_per_identity):
                ident = f"id{identity:04d}"
                path = f"{subset.lower()}/{ident}_{k:03d}.png"
                label = 0 if subset == "REAL" else 1
                yield (
                    Sample(path, label, ident, subset, METHODS[subset]),
                    render_sample(spec, identity, k, subset),
                )


def render_toy_dataset(spec):
    """In-memory dataset: (list of Sample, (N, 64, 64, 3) 8-bit-quantized images)."""
    samples, images = [], []
    for sample, img in iter_samples(spec):
        samples.append(sample)
        images.append(quantize(img))
    return samples, np.stack(images)


def generate_toy_dataset(spec, out_dir):
    """Write PNGs, ``manifest.jsonl`` and ``synth.json`` (the spec, which also
    marks the tree as synthetic) under ``out_dir``; returns the Manifest."""
    out_dir = Path(out_dir)
    samples = []
    for sample, img in iter_samples(spec):
        write_png(out_dir / sample.path, img)
        samples.append(sample)
    manifest = Manifest(out_dir, samples)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    with open(out_dir / "synth.json", "w") as fh:
        json.dump({"data": "synthetic", "spec": spec.to_dict()}, fh, indent=2, sort_keys=True)
    return manifest
