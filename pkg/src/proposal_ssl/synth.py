"""Synthetic planted-cluster scenes and representation-quality metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pointcloud import PointCloud, save_point_cloud
from .proposals import ProposalSet

__all__ = [
    "SceneConfig",
    "LabeledScene",
    "GenerationError",
    "EvaluationError",
    "CLASS_NAMES",
    "generate_scene",
    "save_labeled_scene",
    "load_scene_labels",
    "proposal_labels",
    "cluster_metrics",
    "linear_probe",
]

CLASS_NAMES = ("ground", "sphere_shell", "box", "vertical_pole")


class GenerationError(RuntimeError):
    """Could not place all objects without overlap."""


class EvaluationError(RuntimeError):
    """Evaluation preconditions violated (class too small, etc.)."""


@dataclass(frozen=True)
class SceneConfig:
    ground_extent: float = 20.0
    objects_per_scene: int = 9
    points_per_object: int = 150
    ground_points: int = 1200
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.ground_points <= 0 or self.points_per_object <= 0:
            raise ValueError("point counts must be positive")
        if self.objects_per_scene < 0:
            raise ValueError("objects_per_scene must be non-negative")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


@dataclass(frozen=True)
class LabeledScene:
    cloud: PointCloud
    class_ids: np.ndarray      # (L,) int64, 0 = ground
    instance_ids: np.ndarray   # (L,) int64, -1 = ground

    def __post_init__(self):
        if len(self.class_ids) != len(self.cloud) or len(self.instance_ids) != len(self.cloud):
            raise ValueError("labels must align 1:1 with points")


def _sphere_shell(rng, n, radius=0.5):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return radius * v + np.array([0.0, 0.0, 0.8])


def _box(rng, n, half=0.45):
    # points on the surface of an axis-aligned cube
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-half, half, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, half, -half)
    for i in range(n):
        a = axis[i]
        others = [d for d in range(3) if d != a]
        pts[i, a] = sign[i]
        pts[i, others[0]] = uv[i, 0]
        pts[i, others[1]] = uv[i, 1]
    return pts + np.array([0.0, 0.0, 0.8])


def _vertical_pole(rng, n, radius=0.08, height=1.8):
    ang = rng.uniform(0, 2 * np.pi, size=n)
    z = rng.uniform(0.3, 0.3 + height, size=n)
    return np.column_stack([radius * np.cos(ang), radius * np.sin(ang), z])


_GENERATORS = {1: _sphere_shell, 2: _box, 3: _vertical_pole}


def generate_scene(cfg: SceneConfig) -> LabeledScene:
    """Flat ground plus non-overlapping objects of three geometric classes."""
    rng = np.random.default_rng(cfg.seed)
    half = cfg.ground_extent / 2

    gx = rng.uniform(-half, half, size=(cfg.ground_points, 2))
    parts = [np.column_stack([gx, np.zeros(cfg.ground_points)])]
    classes = [np.zeros(cfg.ground_points, dtype=np.int64)]
    instances = [np.full(cfg.ground_points, -1, dtype=np.int64)]

    centers: list[np.ndarray] = []
    min_sep = 2.5  # keeps 1 m proposal spheres single-object
    for obj in range(cfg.objects_per_scene):
        cls = 1 + obj % 3
        placed = False
        for _ in range(200):
            c = rng.uniform(-half + 1.5, half - 1.5, size=2)
            if all(np.linalg.norm(c - p) >= min_sep for p in centers):
                placed = True
                break
        if not placed:
            raise GenerationError(
                f"could not place object {obj} without overlap")
        centers.append(c)
        pts = _GENERATORS[cls](rng, cfg.points_per_object)
        pts = pts + np.array([c[0], c[1], 0.0])
        parts.append(pts)
        classes.append(np.full(cfg.points_per_object, cls, dtype=np.int64))
        instances.append(np.full(cfg.points_per_object, obj, dtype=np.int64))

    points = np.concatenate(parts)
    if cfg.noise_sigma > 0:
        points = points + rng.normal(scale=cfg.noise_sigma, size=points.shape)
    cloud = PointCloud(points, np.arange(len(points)))
    return LabeledScene(cloud, np.concatenate(classes), np.concatenate(instances))


def save_labeled_scene(scene: LabeledScene, bin_path, label_path) -> None:
    """xyzi_bin plus a `point_index,class_id,instance_id` sidecar CSV."""
    save_point_cloud(scene.cloud, bin_path)
    with open(label_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["point_index", "class_id", "instance_id"])
        for i, (c, inst) in enumerate(zip(scene.class_ids, scene.instance_ids)):
            writer.writerow([i, int(c), int(inst)])


def load_scene_labels(label_path) -> tuple[np.ndarray, np.ndarray]:
    with open(label_path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = [(int(r["point_index"]), int(r["class_id"]), int(r["instance_id"]))
                for r in reader]
    rows.sort()
    classes = np.array([r[1] for r in rows], dtype=np.int64)
    instances = np.array([r[2] for r in rows], dtype=np.int64)
    return classes, instances


def proposal_labels(scene: LabeledScene, proposals: ProposalSet) -> np.ndarray:
    """Majority class over member points; ties go to the lower class id."""
    class_of = {int(pid): int(c)
                for pid, c in zip(scene.cloud.ids, scene.class_ids)}
    out = np.empty(len(proposals), dtype=np.int64)
    for i, row in enumerate(proposals.members):
        counts: dict[int, int] = {}
        for pid in row:
            c = class_of[int(pid)]
            counts[c] = counts.get(c, 0) + 1
        best = max(counts.items(), key=lambda kv: (kv[1], -kv[0]))
        out[i] = best[0]
    return out


def _entropy(counts: np.ndarray) -> float:
    p = counts / counts.sum()
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def cluster_metrics(assignments: np.ndarray, labels: np.ndarray) -> dict:
    """Purity and NMI (sqrt normalization, 0/0 -> 0) of hard assignments."""
    assignments = np.asarray(assignments)
    labels = np.asarray(labels)
    if len(assignments) != len(labels):
        raise ValueError("assignments and labels must have equal length")
    n = len(labels)
    clusters = np.unique(assignments)
    classes = np.unique(labels)
    table = np.zeros((len(clusters), len(classes)))
    for i, c in enumerate(clusters):
        for j, l in enumerate(classes):
            table[i, j] = np.sum((assignments == c) & (labels == l))

    purity = float(table.max(axis=1).sum() / n)

    h_c = _entropy(table.sum(axis=1))
    h_l = _entropy(table.sum(axis=0))
    mi = 0.0
    for i in range(len(clusters)):
        for j in range(len(classes)):
            nij = table[i, j]
            if nij > 0:
                mi += (nij / n) * np.log(n * nij / (table[i].sum() * table[:, j].sum()))
    denom = np.sqrt(h_c * h_l)
    nmi = float(mi / denom) if denom > 0 else 0.0
    return {"purity": purity, "nmi": nmi}


def linear_probe(embeddings: np.ndarray, labels: np.ndarray,
                 split_seed: int = 0, steps: int = 500, lr: float = 0.5) -> float:
    """Full-batch softmax regression on 70% of rows, accuracy on the rest."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    classes, y = np.unique(labels, return_inverse=True)
    if len(classes) < 2:
        raise EvaluationError("linear probe needs at least 2 classes")
    counts = np.bincount(y)
    if counts.min() < 10:
        small = classes[int(np.argmin(counts))]
        raise EvaluationError(
            f"class {small} has only {counts.min()} samples (< 10)")

    rng = np.random.default_rng(split_seed)
    perm = rng.permutation(len(y))
    cut = int(round(0.7 * len(y)))
    tr, te = perm[:cut], perm[cut:]

    x_tr, y_tr = embeddings[tr], y[tr]
    k = len(classes)
    w = np.zeros((embeddings.shape[1], k))
    b = np.zeros(k)
    onehot = np.eye(k)[y_tr]
    for _ in range(steps):
        logits = x_tr @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / len(y_tr)
        w -= lr * (x_tr.T @ g)
        b -= lr * g.sum(axis=0)

    pred = np.argmax(embeddings[te] @ w + b, axis=1)
    return float(np.mean(pred == y[te]))
