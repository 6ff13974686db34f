"""Synthetic ID / semi-OOD / full-OOD data, pseudo-OOD noise, and IDX files.

The generator realizes the three-way data-space segmentation with
isotropic Gaussian class blobs:

  ID        N(center_k, sigma_id^2 I); centers at least ``margin`` apart,
            so each sample's own-class density dominates every other class.
  semi-OOD  same class centers shifted by a common style offset and drawn
            with 1.5x the noise scale: class structure kept, style moved.
  full-OOD  uniform noise on [-box, box]^d, unrelated to every class.

The training-time OOD pool is pseudo-OOD: ID features plus Gaussian noise,
carrying no information beyond the ID data itself.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng, as_matrix


@dataclass
class BlobSpec:
    K: int
    d: int
    sigma_id: float = 1.0
    semi_shift: float = 4.0
    margin: float = 10.0
    box: float = 20.0
    centers: np.ndarray | None = None

    def validate(self):
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.sigma_id <= 0:
            raise ValueError("sigma_id must be > 0")
        if self.semi_shift <= 0:
            raise ValueError("semi_shift must be > 0")
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        if self.box <= 0:
            raise ValueError("box must be > 0")
        if self.centers is not None:
            c = np.asarray(self.centers, dtype=np.float64)
            if c.shape != (self.K, self.d):
                raise ValueError(f"centers must be K x d = {(self.K, self.d)}")
            for i in range(self.K):
                for j in range(i + 1, self.K):
                    if np.linalg.norm(c[i] - c[j]) < self.margin:
                        raise ValueError("pairwise center distance below margin")

    def to_dict(self):
        return {
            "K": self.K,
            "d": self.d,
            "sigma_id": self.sigma_id,
            "semi_shift": self.semi_shift,
            "margin": self.margin,
            "box": self.box,
            "centers": None if self.centers is None else np.asarray(self.centers).tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        centers = d.get("centers")
        return cls(
            K=int(d["K"]),
            d=int(d["d"]),
            sigma_id=float(d["sigma_id"]),
            semi_shift=float(d["semi_shift"]),
            margin=float(d["margin"]),
            box=float(d["box"]),
            centers=None if centers is None else np.asarray(centers, dtype=np.float64),
        )


@dataclass
class DatasetBundle:
    id_train_x: np.ndarray
    id_train_y: np.ndarray
    id_test_x: np.ndarray
    id_test_y: np.ndarray
    semi_ood: np.ndarray
    full_ood: np.ndarray
    ood_train: np.ndarray
    meta: dict = field(default_factory=dict)


def _sample_centers(spec: BlobSpec, rng: Rng) -> np.ndarray:
    """Rejection-sample K centers on a sphere, pairwise distance >= margin.

    The sphere radius is chosen so random directions typically satisfy
    the margin without pushing clusters far apart: pairwise distances
    concentrate near radius * sqrt(2).
    """
    radius = 1.15 * spec.margin / np.sqrt(2.0)
    centers = []
    for _ in range(10_000):
        cand = rng.normal(spec.d)
        cand *= radius / np.linalg.norm(cand)
        if all(np.linalg.norm(cand - c) >= spec.margin for c in centers):
            centers.append(cand)
            if len(centers) == spec.K:
                return np.vstack(centers)
    raise RuntimeError("could not place centers; margin too large for K on the sphere")


def gen_blobs(
    spec: BlobSpec,
    n_per_class: int,
    rng: Rng,
    n_test_per_class: int | None = None,
    n_semi: int | None = None,
    n_full: int | None = None,
    noise_std: float = 1.0,
    standardize: bool = True,
) -> DatasetBundle:
    """Generate the full ID / semi-OOD / full-OOD triple plus pseudo-OOD pool.

    Features are standardized to zero mean / unit variance computed on the
    ID train split only; the OOD pools are transformed with those same ID
    statistics. Deterministic per (spec, rng).
    """
    spec.validate()
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if n_test_per_class is None:
        n_test_per_class = max(1, n_per_class // 5)
    if n_semi is None:
        n_semi = spec.K * n_test_per_class
    if n_full is None:
        n_full = spec.K * n_test_per_class

    centers = spec.centers if spec.centers is not None else _sample_centers(spec, rng.substream(0))
    centers = np.asarray(centers, dtype=np.float64)

    def blob_split(n_k, stream):
        xs, ys = [], []
        for k in range(spec.K):
            xs.append(centers[k] + spec.sigma_id * stream.normal((n_k, spec.d)))
            ys.append(np.full(n_k, k, dtype=np.int64))
        return np.vstack(xs), np.concatenate(ys)

    train_x, train_y = blob_split(n_per_class, rng.substream(1))
    test_x, test_y = blob_split(n_test_per_class, rng.substream(2))

    semi_rng = rng.substream(3)
    direction = semi_rng.normal(spec.d)
    direction /= np.linalg.norm(direction)
    shift = spec.semi_shift * direction
    per_k = [n_semi // spec.K] * spec.K
    for k in range(n_semi % spec.K):
        per_k[k] += 1
    semi = np.vstack(
        [
            centers[k] + shift + 1.5 * spec.sigma_id * semi_rng.normal((per_k[k], spec.d))
            for k in range(spec.K)
            if per_k[k] > 0
        ]
    )

    full_rng = rng.substream(4)
    full = (full_rng.uniform(n_full * spec.d).reshape(n_full, spec.d) * 2.0 - 1.0) * spec.box

    if standardize:
        mean = train_x.mean(axis=0)
        std = train_x.std(axis=0)
        std = np.where(std < 1e-12, 1.0, std)
    else:
        mean = np.zeros(spec.d)
        std = np.ones(spec.d)
    train_x = (train_x - mean) / std
    test_x = (test_x - mean) / std
    semi = (semi - mean) / std
    full = (full - mean) / std

    ood_train = pseudo_ood(train_x, noise_std, rng.substream(5))

    meta = {
        "spec": spec.to_dict(),
        "centers": centers.tolist(),
        "n_per_class": n_per_class,
        "n_test_per_class": n_test_per_class,
        "n_semi": n_semi,
        "n_full": n_full,
        "noise_std": noise_std,
        "standardize": standardize,
        "feature_mean": mean.tolist(),
        "feature_std": std.tolist(),
        "seed": rng.seed,
        "stream_id": rng.stream_id,
    }
    return DatasetBundle(train_x, train_y, test_x, test_y, semi, full, ood_train, meta)


def pseudo_ood(id_features, noise_std: float, rng: Rng) -> np.ndarray:
    """ID features plus i.i.d. Gaussian noise of scale noise_std."""
    if noise_std <= 0:
        raise ValueError("noise_std must be > 0")
    x = as_matrix(id_features, "id_features")
    return x + noise_std * rng.normal(x.shape)


def class_densities(centers, sigma: float, X) -> np.ndarray:
    """Isotropic Gaussian density of every class at every row of X (n x K)."""
    centers = np.asarray(centers, dtype=np.float64)
    X = as_matrix(X, "X")
    d = X.shape[1]
    norm = (2.0 * np.pi * sigma * sigma) ** (-d / 2.0)
    diff = X[:, None, :] - centers[None, :, :]
    sq = (diff * diff).sum(axis=2)
    return norm * np.exp(-0.5 * sq / (sigma * sigma))


# ---- persistence ---------------------------------------------------------------

_SPLITS = ("id_train", "id_test", "semi_ood", "full_ood", "ood_train")


def save_bundle(bundle: DatasetBundle, out_dir):
    """One CSV per split (features, then label where present) plus meta.json."""
    import os

    os.makedirs(out_dir, exist_ok=True)

    def path(name):
        return os.path.join(out_dir, f"{name}.csv")

    labeled = np.hstack([bundle.id_train_x, bundle.id_train_y[:, None].astype(np.float64)])
    d = bundle.id_train_x.shape[1]
    fmt = ["%.17g"] * d + ["%d"]
    np.savetxt(path("id_train"), labeled, delimiter=",", fmt=fmt)
    labeled = np.hstack([bundle.id_test_x, bundle.id_test_y[:, None].astype(np.float64)])
    np.savetxt(path("id_test"), labeled, delimiter=",", fmt=fmt)
    np.savetxt(path("semi_ood"), bundle.semi_ood, delimiter=",", fmt="%.17g")
    np.savetxt(path("full_ood"), bundle.full_ood, delimiter=",", fmt="%.17g")
    np.savetxt(path("ood_train"), bundle.ood_train, delimiter=",", fmt="%.17g")
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(bundle.meta, fh)
        fh.write("\n")


def load_bundle(in_dir) -> DatasetBundle:
    import os

    def load(name, labeled=False):
        arr = np.loadtxt(os.path.join(in_dir, f"{name}.csv"), delimiter=",", ndmin=2)
        if labeled:
            return arr[:, :-1], arr[:, -1].astype(np.int64)
        return arr

    train_x, train_y = load("id_train", labeled=True)
    test_x, test_y = load("id_test", labeled=True)
    semi = load("semi_ood")
    full = load("full_ood")
    ood = load("ood_train")
    with open(os.path.join(in_dir, "meta.json"), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    return DatasetBundle(train_x, train_y, test_x, test_y, semi, full, ood, meta)


# ---- IDX binary format ----------------------------------------------------------

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Raised for malformed IDX files; message states the defect."""


def _read_file(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def load_idx(images_path, labels_path):
    """Parse big-endian IDX image/label files.

    Returns (features, labels) with features n x (rows*cols) scaled to
    [0, 1] by dividing raw u8 pixels by 255, flattened row-major.
    """
    img = _read_file(images_path)
    if len(img) < 16:
        raise IdxFormatError(f"truncated image header in {images_path}")
    magic, n, rows, cols = struct.unpack_from(">IIII", img, 0)
    if magic != IDX_IMAGES_MAGIC:
        raise IdxFormatError(f"wrong magic in {images_path}: 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    payload = img[16:]
    expected = n * rows * cols
    if len(payload) != expected:
        raise IdxFormatError(f"truncated image payload in {images_path}: {len(payload)} bytes, expected {expected}")
    pixels = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    features = pixels.reshape(n, rows * cols)

    lab = _read_file(labels_path)
    if len(lab) < 8:
        raise IdxFormatError(f"truncated label header in {labels_path}")
    magic_l, n_l = struct.unpack_from(">II", lab, 0)
    if magic_l != IDX_LABELS_MAGIC:
        raise IdxFormatError(f"wrong magic in {labels_path}: 0x{magic_l:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    lab_payload = lab[8:]
    if len(lab_payload) != n_l:
        raise IdxFormatError(f"truncated label payload in {labels_path}: {len(lab_payload)} bytes, expected {n_l}")
    if n_l != n:
        raise IdxFormatError(f"count mismatch: {n} images vs {n_l} labels")
    labels = np.frombuffer(lab_payload, dtype=np.uint8).astype(np.int64)
    return features, labels
