"""Task-stream construction: the synthetic Objects image benchmark, linear
regression streams with known ground truth, binary pair tasks over a labeled
image source, pixel-intensity regression tasks, and idx/csv image loaders.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

SHAPES = ("circle", "triangle", "square")
COLORS = ("orange", "blue", "pink", "green")
COLOR_RGB = {
    "orange": (255, 165, 0),
    "blue": (0, 0, 255),
    "pink": (255, 105, 180),
    "green": (0, 128, 0),
}
QUADRANT_CENTERS = ((7, 7), (7, 21), (21, 7), (21, 21))
IMAGES_PER_CLASS = 100
IMG_SIDE = 28


@dataclass
class TaskDataset:
    """One task's data splits plus generator metadata."""

    tid: int
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int = 0  # 0 means regression
    metadata: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.x_train.shape[1]

    def subsample(self, n: int, rng: np.random.Generator) -> "TaskDataset":
        """Smaller copy with n training samples (val/test untouched)."""
        if n >= self.x_train.shape[0]:
            return self
        idx = rng.choice(self.x_train.shape[0], size=n, replace=False)
        return TaskDataset(self.tid, self.x_train[idx], self.y_train[idx],
                           self.x_val, self.y_val, self.x_test, self.y_test,
                           self.n_classes, dict(self.metadata))


def replay_capacity(n_train: int) -> int:
    """Replay size rule for data-size sweeps: a tenth of the training set,
    at least 1 and at most one mini-batch."""
    return min(max(n_train // 10, 1), 32)


# ---------------------------------------------------------------------------
# Objects benchmark
# ---------------------------------------------------------------------------


def _render(shape: str, cx: int, cy: int, size: int, rgb) -> np.ndarray:
    """Filled shape on a black 28x28 RGB canvas; no anti-aliasing, clipped
    at the image border."""
    img = np.zeros((IMG_SIDE, IMG_SIDE, 3), dtype=np.float64)
    rr, cc = np.mgrid[0:IMG_SIDE, 0:IMG_SIDE]
    if shape == "circle":
        inside = (rr - cy) ** 2 + (cc - cx) ** 2 <= size**2
    elif shape == "square":
        inside = (np.abs(rr - cy) <= size) & (np.abs(cc - cx) <= size)
    elif shape == "triangle":
        # isoceles, apex up: width grows linearly from apex to base
        dy = rr - (cy - size)
        half = dy / 2.0
        inside = (dy >= 0) & (dy <= 2 * size) & (np.abs(cc - cx) <= half)
    else:
        raise ValueError(f"unknown shape: {shape}")
    for ch in range(3):
        img[..., ch][inside] = rgb[ch] / 255.0
    return img


def _split_indices(n: int, rng: np.random.Generator):
    idx = rng.permutation(n)
    n_tr = n // 2
    n_va = n // 5
    return idx[:n_tr], idx[n_tr:n_tr + n_va], idx[n_tr + n_va:]


def _held_out(setting: str, cls) -> bool:
    shape, color, quad = cls
    if setting == "holdout-circle":
        return shape == "circle"
    if setting == "holdout-orange":
        return color == "orange"
    if setting == "holdout-topleft":
        return quad == 0
    return False


def generate_objects(setting: str = "random", seed: int = 0) -> list[TaskDataset]:
    """The 48-class shapes benchmark as 16 three-way classification tasks.

    Each class is a (shape, color, quadrant) combination rendered 100 times
    with jittered center (+-3), per-channel color (+-16) and size in [3, 7].
    Holdout settings push every class containing the held-out attribute to
    the end of the stream.  Note the held-out suffix for a shape spans six
    tasks, not five: 16 affected classes do not fit in five 3-way tasks, so
    the earliest suffix task mixes one held-out class with two others.
    """
    if setting not in ("random", "holdout-circle", "holdout-orange", "holdout-topleft"):
        raise ValueError(f"unknown objects setting: {setting}")
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    classes = [(s, c, q) for s in SHAPES for c in COLORS for q in range(4)]

    images: dict[tuple, np.ndarray] = {}
    for cls in classes:
        shape, color, quad = cls
        cx0, cy0 = QUADRANT_CENTERS[quad]
        nominal = COLOR_RGB[color]
        batch = np.empty((IMAGES_PER_CLASS, IMG_SIDE * IMG_SIDE * 3))
        for i in range(IMAGES_PER_CLASS):
            cx = cx0 + rng.integers(-3, 4)
            cy = cy0 + rng.integers(-3, 4)
            size = rng.integers(3, 8)
            rgb = [int(np.clip(v + rng.integers(-16, 17), 0, 255)) for v in nominal]
            batch[i] = _render(shape, cx, cy, size, rgb).ravel()
        images[cls] = batch

    held = [c for c in classes if _held_out(setting, c)]
    rest = [c for c in classes if not _held_out(setting, c)]
    order = [rest[i] for i in rng.permutation(len(rest))]
    order += [held[i] for i in rng.permutation(len(held))]

    stream = []
    for t in range(16):
        triple = order[3 * t: 3 * t + 3]
        xs = {k: [] for k in ("train", "val", "test")}
        ys = {k: [] for k in ("train", "val", "test")}
        for label, cls in enumerate(triple):
            tr, va, te = _split_indices(IMAGES_PER_CLASS, rng)
            for key, idx in (("train", tr), ("val", va), ("test", te)):
                xs[key].append(images[cls][idx])
                ys[key].append(np.full(len(idx), label, dtype=np.intp))
        stream.append(TaskDataset(
            tid=t,
            x_train=np.vstack(xs["train"]), y_train=np.concatenate(ys["train"]),
            x_val=np.vstack(xs["val"]), y_val=np.concatenate(ys["val"]),
            x_test=np.vstack(xs["test"]), y_test=np.concatenate(ys["test"]),
            n_classes=3,
            metadata={"generator": "objects", "seed": seed, "setting": setting,
                      "classes": triple, "version": 1},
        ))
    return stream


# ---------------------------------------------------------------------------
# Synthetic linear streams
# ---------------------------------------------------------------------------


def generate_linear_stream(seed: int, T: int, d: int, k_star: int,
                           noise: float = 0.0, n_train: int = 128,
                           n_val: int = 64, n_test: int = 64,
                           labels: str = "regression") -> list[TaskDataset]:
    """T regression (or sign-label) tasks whose targets share k* ground-truth
    linear factors: y = psi*_t . (Phi*^T x) + noise.  The ground truth is
    recorded in metadata for oracle scoring."""
    if not (1 <= k_star <= d):
        raise ValueError("need 1 <= k* <= d")
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    phi_star = rng.normal(size=(d, k_star))
    phi_star /= np.linalg.norm(phi_star, axis=0, keepdims=True)
    stream = []
    for t in range(T):
        if t < k_star:
            # the first k* tasks isolate one factor each with a coefficient
            # bounded away from zero, so the stream's early tasks induce a
            # well-conditioned basis; streams whose early tasks leave a
            # factor untouched (or nearly collinear) make later tasks
            # unidentifiable from the early ones alone
            psi = np.zeros(k_star)
            psi[t] = rng.uniform(0.5, 1.5) * rng.choice([-1.0, 1.0])
        else:
            psi = rng.normal(size=k_star)
            keep = rng.random(k_star) < 0.5
            if not keep.any():
                keep[rng.integers(k_star)] = True
            psi = psi * keep
        splits = {}
        for key, n in (("train", n_train), ("val", n_val), ("test", n_test)):
            x = rng.normal(size=(n, d))
            y = x @ phi_star @ psi
            if noise > 0:
                y = y + rng.normal(0, noise, size=n)
            if labels == "binary":
                y = (y > 0).astype(float)
            splits[key] = (x, y)
        stream.append(TaskDataset(
            tid=t, x_train=splits["train"][0], y_train=splits["train"][1],
            x_val=splits["val"][0], y_val=splits["val"][1],
            x_test=splits["test"][0], y_test=splits["test"][1],
            n_classes=2 if labels == "binary" else 0,
            metadata={"generator": "linear", "seed": seed, "noise": noise,
                      "phi_star": phi_star, "psi_star": psi},
        ))
    return stream


# ---------------------------------------------------------------------------
# Binary pair streams over a labeled image source
# ---------------------------------------------------------------------------


def binary_pairs_stream(source, T: int, seed: int,
                        transform_dim: int = 64) -> list[TaskDataset]:
    """T binary discrimination tasks, each over one pair of source classes
    sampled with replacement across tasks.  Marks the per-task input
    transform as fixed-random of width transform_dim."""
    images, labels = source
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("image source must have at least 2 classes")
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    stream = []
    for t in range(T):
        a, b = rng.choice(classes, size=2, replace=False)
        idx = np.flatnonzero((labels == a) | (labels == b))
        x = images[idx]
        y = (labels[idx] == b).astype(float)
        tr, va, te = _split_indices(x.shape[0], rng)
        stream.append(TaskDataset(
            tid=t, x_train=x[tr], y_train=y[tr], x_val=x[va], y_val=y[va],
            x_test=x[te], y_test=y[te], n_classes=2,
            metadata={"generator": "binary-pairs", "seed": seed,
                      "pair": (int(a), int(b)), "e_kind": "fixed",
                      "transform_dim": transform_dim},
        ))
    return stream


# ---------------------------------------------------------------------------
# Pixel-intensity regression
# ---------------------------------------------------------------------------


def pixel_regression_stream(images: list[np.ndarray],
                            normalize: bool = True) -> list[TaskDataset]:
    """One generative task per grayscale image: features are normalized
    (row, col) coordinates, targets the pixel intensity; every pixel is a
    training sample and there are no held-out splits.  Transforms are
    flagged as shared across tasks."""
    if not images:
        raise ValueError("need at least one image")
    stream = []
    empty_x, empty_y = np.zeros((0, 2)), np.zeros(0)
    for t, img in enumerate(images):
        img = np.asarray(img, dtype=np.float64)
        if img.size == 0:
            raise ValueError("empty image")
        if normalize and img.max() > 1.0:
            img = img / 255.0
        h, w = img.shape
        rr, cc = np.mgrid[0:h, 0:w]
        x = np.column_stack([
            rr.ravel() / max(h - 1, 1),
            cc.ravel() / max(w - 1, 1),
        ])
        stream.append(TaskDataset(
            tid=t, x_train=x, y_train=img.ravel(),
            x_val=empty_x, y_val=empty_y, x_test=empty_x, y_test=empty_y,
            n_classes=0,
            metadata={"generator": "pixels", "shape": (h, w),
                      "shared_transforms": True, "loss": "binary-xent"},
        ))
    return stream


# ---------------------------------------------------------------------------
# idx / csv image loaders
# ---------------------------------------------------------------------------

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_idx_images(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) < 16:
            raise ValueError(f"{path}: truncated idx header")
        magic, n, h, w = struct.unpack(">iiii", head)
        if magic != IDX_IMAGES_MAGIC:
            raise ValueError(f"{path}: bad idx image magic {magic:#010x}")
        payload = f.read(n * h * w)
        if len(payload) != n * h * w:
            raise ValueError(f"{path}: truncated idx payload")
        return np.frombuffer(payload, dtype=np.uint8).reshape(n, h * w) / 255.0


def _read_idx_labels(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(8)
        if len(head) < 8:
            raise ValueError(f"{path}: truncated idx header")
        magic, n = struct.unpack(">ii", head)
        if magic != IDX_LABELS_MAGIC:
            raise ValueError(f"{path}: bad idx label magic {magic:#010x}")
        payload = f.read(n)
        if len(payload) != n:
            raise ValueError(f"{path}: truncated idx payload")
        return np.frombuffer(payload, dtype=np.uint8).astype(np.intp)


def load_labeled_images(path: str, fmt: str, labels_path: str | None = None):
    """Read an image source as (images in [0,1], integer labels).

    fmt "idx": path is the big-endian u8 image tensor, labels_path the
    matching label file.  fmt "csv": one header row `label,p0,...`, one
    sample per row.
    """
    if fmt == "idx":
        if labels_path is None:
            raise ValueError("idx sources need a labels file")
        images = _read_idx_images(path)
        labels = _read_idx_labels(labels_path)
        if images.shape[0] != labels.shape[0]:
            raise ValueError("image/label counts disagree")
        return images, labels
    if fmt == "csv":
        rows = []
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if not header or header[0] != "label":
                raise ValueError(f"{path}: expected a `label,p0,...` header")
            for row in reader:
                rows.append([float(v) for v in row])
        if not rows:
            raise ValueError(f"{path}: no samples")
        arr = np.array(rows)
        labels = arr[:, 0]
        if np.any(labels != labels.astype(np.intp)):
            raise ValueError("labels must be integral")
        images = arr[:, 1:]
        if images.max() > 1.0:
            images = images / 255.0
        return images, labels.astype(np.intp)
    raise ValueError(f"unknown source format: {fmt}")


def save_labeled_images(images: np.ndarray, labels: np.ndarray, path: str,
                        fmt: str, labels_path: str | None = None,
                        side: int | None = None) -> None:
    """Inverse of load_labeled_images, for round-trips and fixtures."""
    raw = np.clip(np.round(images * 255.0), 0, 255).astype(np.uint8)
    if fmt == "idx":
        if labels_path is None:
            raise ValueError("idx sources need a labels file")
        n, d = raw.shape
        side = side or int(np.sqrt(d))
        with open(path, "wb") as f:
            f.write(struct.pack(">iiii", IDX_IMAGES_MAGIC, n, side, d // side))
            f.write(raw.tobytes())
        with open(labels_path, "wb") as f:
            f.write(struct.pack(">ii", IDX_LABELS_MAGIC, n))
            f.write(np.asarray(labels, dtype=np.uint8).tobytes())
        return
    if fmt == "csv":
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["label"] + [f"p{i}" for i in range(raw.shape[1])])
            for lab, row in zip(labels, raw):
                writer.writerow([int(lab)] + row.tolist())
        return
    raise ValueError(f"unknown source format: {fmt}")
