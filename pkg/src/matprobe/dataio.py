"""Dataset manifests, raster I/O, feature caches, and synthetic data.

Images are stored as 16-bit sRGB PNG and handled in memory as linear-light
float64 in [0, 1]. Depth rasters use a small binary format (magic "DPTH").
The trivial encoder provides a deterministic 1024-dim feature stand-in so the
classifier head can be trained and evaluated at desk scale without an
external backbone.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import cv2
import numpy as np

from .taxonomy import Taxonomy

__all__ = [
    "DataError",
    "SampleRecord",
    "DatasetManifest",
    "FeatureCache",
    "EncoderHandle",
    "SyntheticSpec",
    "read_image",
    "write_image",
    "read_depth_raster",
    "write_depth_raster",
    "srgb_to_linear",
    "linear_to_srgb",
    "load_manifest",
    "save_manifest",
    "trivial_encoder",
    "get_encoder",
    "build_feature_cache",
    "save_feature_cache",
    "load_feature_cache",
    "generate_synthetic",
    "convert_folder_tree",
]

DEPTH_MAGIC = b"DPTH"
FEATURE_MAGIC = b"MPFC"
TRIVIAL_DIM = 1024
TRIVIAL_INPUT_SIZE = 128


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# rasters


def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * x ** (1 / 2.4) - 0.055)


def read_image(path) -> np.ndarray:
    """16-bit (or 8-bit) PNG -> linear float64 RGB in [0, 1]."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DataError(f"cannot read image: {path}")
    if raw.ndim == 2:
        raw = raw[:, :, None].repeat(3, axis=2)
    if raw.shape[2] == 4:
        raw = raw[:, :, :3]
    raw = raw[:, :, ::-1]  # BGR -> RGB
    scale = 65535.0 if raw.dtype == np.uint16 else 255.0
    return srgb_to_linear(raw.astype(np.float64) / scale)


def write_image(path, linear: np.ndarray) -> None:
    """Linear float RGB -> 16-bit sRGB PNG."""
    img = np.asarray(linear, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None].repeat(3, axis=2)
    encoded = np.round(linear_to_srgb(img) * 65535.0).astype(np.uint16)
    if not cv2.imwrite(str(path), encoded[:, :, ::-1]):
        raise DataError(f"cannot write image: {path}")


def write_depth_raster(path, depth: np.ndarray) -> None:
    d = np.asarray(depth, dtype=np.float32)
    if d.ndim != 2:
        raise DataError("depth raster must be 2-D")
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC)
        f.write(struct.pack("<BII", 1, d.shape[1], d.shape[0]))
        f.write(d.astype("<f4").tobytes())


def read_depth_raster(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != DEPTH_MAGIC:
            raise DataError(f"bad depth magic {magic!r} in {path}")
        _version, width, height = struct.unpack("<BII", f.read(9))
        payload = f.read()
    expected = width * height * 4
    if len(payload) != expected:
        raise DataError(
            f"depth payload truncated in {path}: expected {expected} bytes, "
            f"got {len(payload)}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(height, width).astype(np.float32)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class SampleRecord:
    id: str
    appearance: str
    label: str
    depth: Optional[str] = None
    context: Optional[str] = None
    meta: dict = field(default_factory=dict)


@dataclass
class DatasetManifest:
    root: Path
    taxonomy_hash: Optional[str]
    records: list[SampleRecord]
    splits: dict[str, list[str]]

    def record(self, sample_id: str) -> SampleRecord:
        for r in self.records:
            if r.id == sample_id:
                return r
        raise DataError(f"unknown sample id {sample_id!r}")

    def split_records(self, name: str) -> list[SampleRecord]:
        if name not in self.splits:
            raise DataError(f"manifest has no split {name!r}")
        wanted = set(self.splits[name])
        return [r for r in self.records if r.id in wanted]

    def path(self, rel: str) -> Path:
        return self.root / rel


def load_manifest(path, taxonomy: Optional[Taxonomy] = None) -> DatasetManifest:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    records = [
        SampleRecord(
            id=r["id"],
            appearance=r["appearance"],
            label=r["label"],
            depth=r.get("depth"),
            context=r.get("context"),
            meta=r.get("meta", {}),
        )
        for r in doc.get("records", [])
    ]
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate record ids in manifest")
    splits = {k: list(v) for k, v in doc.get("splits", {}).items()}
    known = set(ids)
    for name, members in splits.items():
        stray = set(members) - known
        if stray:
            raise DataError(f"split {name!r} references unknown ids: {sorted(stray)}")
    if taxonomy is not None:
        for r in records:
            if r.label not in taxonomy.nodes:
                raise DataError(f"record {r.id!r}: label {r.label!r} not in taxonomy")
    return DatasetManifest(
        root=path.parent,
        taxonomy_hash=doc.get("taxonomy_hash"),
        records=records,
        splits=splits,
    )


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "taxonomy_hash": manifest.taxonomy_hash,
        "records": [
            {
                "id": r.id,
                "appearance": r.appearance,
                "label": r.label,
                **({"depth": r.depth} if r.depth else {}),
                **({"context": r.context} if r.context else {}),
                **({"meta": r.meta} if r.meta else {}),
            }
            for r in manifest.records
        ],
        "splits": manifest.splits,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# trivial encoder


def _luminance(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return np.asarray(img, dtype=np.float64)
    w = np.array([0.2126, 0.7152, 0.0722])
    return img @ w


def _cell_stats(y: np.ndarray, grid: int) -> np.ndarray:
    h, w = y.shape
    gy, gx = np.gradient(y)
    energy = gy * gy + gx * gx
    rows = np.linspace(0, h, grid + 1).astype(int)
    cols = np.linspace(0, w, grid + 1).astype(int)
    out = np.empty(3 * grid * grid)
    k = 0
    for i in range(grid):
        for j in range(grid):
            cell = y[rows[i]:rows[i + 1], cols[j]:cols[j + 1]]
            en = energy[rows[i]:rows[i + 1], cols[j]:cols[j + 1]]
            out[k], out[k + 1], out[k + 2] = cell.mean(), cell.var(), en.mean()
            k += 3
    return out


def _oriented_energy(y: np.ndarray, n_theta: int = 12, n_rad: int = 8) -> np.ndarray:
    """Orientation x radial power-spectrum bins, normalized by total energy."""
    f = np.fft.fftshift(np.fft.fft2(y - y.mean()))
    power = np.abs(f) ** 2
    h, w = y.shape
    fy = np.fft.fftshift(np.fft.fftfreq(h))[:, None]
    fx = np.fft.fftshift(np.fft.fftfreq(w))[None, :]
    radius = np.hypot(fy, fx)  # cycles/px, Nyquist at 0.5
    theta = np.mod(np.arctan2(fy, fx), np.pi)
    t_bin = np.minimum((theta / np.pi * n_theta).astype(int), n_theta - 1)
    r_edges = np.geomspace(0.02, 0.5, n_rad + 1)
    r_bin = np.searchsorted(r_edges, radius, side="right") - 1
    mask = (r_bin >= 0) & (r_bin < n_rad)
    flat = t_bin[mask] * n_rad + r_bin[mask]
    hist = np.bincount(flat, weights=power[mask], minlength=n_theta * n_rad)
    total = hist.sum()
    return hist / total if total > 0 else hist


def trivial_encoder(image: np.ndarray) -> np.ndarray:
    """Deterministic 1024-dim features: multi-scale grayscale statistics
    (mean/variance/gradient-energy on 4x4 and 8x8 grids) plus oriented
    frequency energies; brightness-normalized, fixed layout, zero padded.

    Blocks carry fixed conditioning constants (cell means centered at the
    brightness-normalized baseline, energy blocks amplified) so the raw
    feature scales are comparable across blocks.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    if h < 32 or w < 32:
        raise DataError(f"trivial encoder needs at least 32x32 pixels, got {h}x{w}")
    y = _luminance(img)
    m = y.mean()
    if m < 1e-12:
        return np.zeros(TRIVIAL_DIM)
    y = y / m

    blocks = [_cell_stats(y, 4), _cell_stats(y, 8), _oriented_energy(y)]
    h2, w2 = y.shape[0] // 2, y.shape[1] // 2
    for tile in (y[:h2, :w2], y[:h2, w2:], y[h2:, :w2], y[h2:, w2:]):
        blocks.append(_oriented_energy(tile))
    vec = np.concatenate(blocks)
    cells = vec[: 3 * (16 + 64)].reshape(-1, 3)
    cells[:, 0] = 4.0 * (cells[:, 0] - 1.0)
    cells[:, 1] *= 20.0
    cells[:, 2] *= 8.0
    vec[3 * (16 + 64) :] *= 25.0
    out = np.zeros(TRIVIAL_DIM)
    out[: vec.size] = vec
    return out


@dataclass(frozen=True)
class EncoderHandle:
    """Named deterministic image -> feature map with a fixed output dim."""

    name: str
    output_dim: int
    input_size: int
    encode: Callable[[np.ndarray], np.ndarray]


def get_encoder(name: str) -> EncoderHandle:
    if name == "trivial":
        return EncoderHandle(
            name="trivial",
            output_dim=TRIVIAL_DIM,
            input_size=TRIVIAL_INPUT_SIZE,
            encode=trivial_encoder,
        )
    raise DataError(f"unknown encoder {name!r}")


# ---------------------------------------------------------------------------
# feature cache


@dataclass
class FeatureCache:
    encoder: str
    dim: int
    ids: list[str]
    features: np.ndarray  # (M, dim) float64 in memory

    def vector(self, sample_id: str) -> np.ndarray:
        try:
            return self.features[self.ids.index(sample_id)]
        except ValueError:
            raise DataError(f"no cached features for sample {sample_id!r}") from None

    def require_dim(self, expected: int) -> None:
        if self.dim != expected:
            raise DataError(
                f"feature cache dim {self.dim} does not match model input dim {expected}"
            )


def build_feature_cache(
    manifest: DatasetManifest,
    encoder: EncoderHandle,
    on_error: str = "abort",
    preprocess: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> FeatureCache:
    """Encode every record's appearance image (resized to the encoder's input
    size). on_error="continue" skips failing records, reporting their ids.
    """
    from .renderer.filters import resample_image

    ids, rows, failures = [], [], []
    for rec in manifest.records:
        try:
            img = read_image(manifest.path(rec.appearance))
            if preprocess is not None:
                img = preprocess(img)
            size = encoder.input_size
            if img.shape[0] != size or img.shape[1] != size:
                img = resample_image(img, (size, size))
            vec = encoder.encode(img)
        except Exception as exc:  # noqa: BLE001 - reported per record
            if on_error == "continue":
                failures.append((rec.id, str(exc)))
                continue
            raise DataError(f"encoding failed for record {rec.id!r}: {exc}") from exc
        if vec.shape != (encoder.output_dim,):
            raise DataError(
                f"encoder produced {vec.shape} for {rec.id!r}, "
                f"expected ({encoder.output_dim},)"
            )
        ids.append(rec.id)
        rows.append(vec)
    if failures:
        print(f"feature cache: skipped {len(failures)} records: {[f[0] for f in failures]}")
    feats = np.stack(rows) if rows else np.zeros((0, encoder.output_dim))
    return FeatureCache(encoder.name, encoder.output_dim, ids, feats)


def save_feature_cache(cache: FeatureCache, path) -> None:
    manifest = json.dumps(
        {"encoder": cache.encoder, "dim": cache.dim, "ids": cache.ids},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<BQ", 1, len(manifest)))
        f.write(manifest)
        f.write(cache.features.astype("<f4").tobytes())


def load_feature_cache(path) -> FeatureCache:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FEATURE_MAGIC:
            raise DataError(f"bad feature cache magic {magic!r}")
        _version, mlen = struct.unpack("<BQ", f.read(9))
        meta = json.loads(f.read(mlen))
        payload = f.read()
    count = len(meta["ids"]) * meta["dim"]
    if len(payload) != count * 4:
        raise DataError(
            f"feature payload truncated: expected {count * 4} bytes, got {len(payload)}"
        )
    feats = np.frombuffer(payload, dtype="<f4").reshape(len(meta["ids"]), meta["dim"])
    return FeatureCache(meta["encoder"], meta["dim"], list(meta["ids"]), feats.astype(np.float64))


# ---------------------------------------------------------------------------
# synthetic dataset


@dataclass(frozen=True)
class SyntheticSpec:
    """Texture families per leaf: form groups fix the grating orientation
    band, leaves within a group fix disjoint frequency bands.
    """

    taxonomy: Taxonomy
    image_size: int = 128
    per_leaf: int = 40
    seed: int = 0
    depth_m: float = 0.30
    noise: float = 0.02
    base_freq: float = 0.04  # cycles/px of the slowest family
    freq_ratio: float = 1.6  # band spacing; jitter stays well inside
    splits: tuple[float, float] = (0.8, 0.1)  # train/val fractions, rest test


def _family_params(spec: SyntheticSpec) -> dict[str, dict]:
    """Deterministic per-leaf texture family assignment."""
    t = spec.taxonomy
    leaves = list(t.leaves())
    groups: dict[str, list[str]] = {}
    for leaf in leaves:
        parent = t.nodes[leaf].parent or leaf
        groups.setdefault(parent, []).append(leaf)
    params = {}
    n_groups = max(len(groups), 1)
    for g, (parent, members) in enumerate(sorted(groups.items())):
        theta = (g + 0.37) * np.pi / n_groups
        tint = np.array([
            0.9 + 0.1 * np.cos(2.1 * g),
            0.9 + 0.1 * np.cos(2.1 * g + 2.0),
            0.9 + 0.1 * np.cos(2.1 * g + 4.0),
        ])
        for li, leaf in enumerate(members):
            params[leaf] = {
                "theta": theta,
                "freq": spec.base_freq * spec.freq_ratio**li,
                "contrast": 0.30 + 0.05 * (li % 3),
                "tint": tint,
            }
    return params


def synth_texture(
    size: int, theta: float, freq: float, contrast: float, tint: np.ndarray,
    noise: float, rng: np.random.Generator,
) -> np.ndarray:
    """One linear-light RGB texture image from a family's parameters."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    th = theta + rng.uniform(-0.06, 0.06)
    f = freq * (1.0 + rng.uniform(-0.08, 0.08))
    phase = rng.uniform(0, 2 * np.pi)
    phase2 = rng.uniform(0, 2 * np.pi)
    u = xx * np.cos(th) + yy * np.sin(th)
    v = -xx * np.sin(th) + yy * np.cos(th)
    pattern = 0.5 + contrast * (
        0.6 * np.sin(2 * np.pi * f * u + phase)
        + 0.25 * np.sin(2 * np.pi * 2.0 * f * v + phase2)
    )
    pattern = pattern + rng.normal(0.0, noise, pattern.shape)
    img = pattern[:, :, None] * tint[None, None, :]
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(spec: SyntheticSpec, out_dir) -> Path:
    """Write images, flat depth maps, and a manifest; returns the manifest path.

    Deterministic: a given (spec, seed) produces bit-identical files.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    params = _family_params(spec)
    records = []
    splits = {"train": [], "val": [], "test": [], "ood": []}
    depth = np.full((spec.image_size, spec.image_size), spec.depth_m, dtype=np.float32)
    n_train = int(round(spec.splits[0] * spec.per_leaf))
    n_val = int(round(spec.splits[1] * spec.per_leaf))
    for leaf in spec.taxonomy.leaves():
        fam = params[leaf]
        for i in range(spec.per_leaf):
            sid = f"{leaf}_{i:03d}"
            img = synth_texture(
                spec.image_size, fam["theta"], fam["freq"], fam["contrast"],
                fam["tint"], spec.noise, rng,
            )
            write_image(out / "images" / f"{sid}.png", img)
            write_depth_raster(out / "depth" / f"{sid}.dpth", depth)
            records.append(
                SampleRecord(
                    id=sid,
                    appearance=f"images/{sid}.png",
                    depth=f"depth/{sid}.dpth",
                    label=leaf,
                )
            )
            bucket = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
            splits[bucket].append(sid)
    manifest = DatasetManifest(
        root=out,
        taxonomy_hash=spec.taxonomy.content_hash(),
        records=records,
        splits=splits,
    )
    path = out / "manifest.json"
    save_manifest(manifest, path)
    return path


def load_synth_spec(path, taxonomy: Taxonomy) -> SyntheticSpec:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    return SyntheticSpec(
        taxonomy=taxonomy,
        image_size=doc.get("image_size", 128),
        per_leaf=doc.get("per_leaf", 40),
        seed=doc.get("seed", 0),
        depth_m=doc.get("depth_m", 0.30),
        noise=doc.get("noise", 0.02),
    )


# ---------------------------------------------------------------------------
# external folder-tree conversion


def convert_folder_tree(
    src_dir, out_dir, label_map: dict[str, str], taxonomy: Taxonomy,
    depth_m: float = 0.30,
) -> Path:
    """Convert a folder-per-class image tree into the engine's formats.

    label_map maps folder names to taxonomy leaf ids. Images are re-encoded
    as 16-bit PNG; a constant-depth raster is synthesized when none exists.
    """
    src, out = Path(src_dir), Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    records = []
    for folder, leaf in sorted(label_map.items()):
        if leaf not in taxonomy.nodes:
            raise DataError(f"label map target {leaf!r} not in taxonomy")
        cls_dir = src / folder
        if not cls_dir.is_dir():
            raise DataError(f"missing class folder {cls_dir}")
        for i, img_path in enumerate(sorted(cls_dir.iterdir())):
            if img_path.suffix.lower() not in {".png", ".jpg", ".jpeg", ".tif", ".tiff"}:
                continue
            sid = f"{leaf}_{i:04d}"
            img = read_image(img_path)
            write_image(out / "images" / f"{sid}.png", img)
            depth = np.full(img.shape[:2], depth_m, dtype=np.float32)
            write_depth_raster(out / "depth" / f"{sid}.dpth", depth)
            records.append(
                SampleRecord(
                    id=sid,
                    appearance=f"images/{sid}.png",
                    depth=f"depth/{sid}.dpth",
                    label=leaf,
                )
            )
    manifest = DatasetManifest(
        root=out,
        taxonomy_hash=taxonomy.content_hash(),
        records=records,
        splits={"train": [r.id for r in records], "val": [], "test": [], "ood": []},
    )
    path = out / "manifest.json"
    save_manifest(manifest, path)
    return path
