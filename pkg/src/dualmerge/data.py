"""Task datasets: MNIST-style two-task splits and synthetic stand-ins.

Classification is posed as target-embedding regression: every class owns a
fixed 64-dimensional unit vector drawn from one shared orthonormal bank, all
tasks slice that bank, and a model predicts by maximum cosine similarity
between its output embedding and the candidate class targets. Sharing the
bank is what lets heads from different tasks be scored in a common space.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DataFormatError

TARGET_DIM = 64
TARGET_BANK_SEED = 90217
PRIME_DIGITS = frozenset({2, 3, 5, 7})
ODD_DIGITS = frozenset({1, 3, 5, 7, 9})

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

# Class-id layout in the shared target bank. Digits keep ids 0..9 so that
# class-split tasks address rows directly; binary tasks get rows above that.
PRIME_CLASS_IDS = (10, 11)  # (negative, positive)
ODD_CLASS_IDS = (12, 13)
BLOB_CLASS_IDS = (14, 15)
_BANK_ROWS = 16


@dataclass(frozen=True)
class TaskDataset:
    """One task's samples with per-sample class targets attached."""

    inputs: np.ndarray          # [S, input_dim] float32
    targets: np.ndarray         # [S, TARGET_DIM] float32
    labels: np.ndarray          # [S] int64, values are global class ids
    class_ids: np.ndarray       # [C] int64, the task's candidate classes
    class_targets: np.ndarray   # [C, TARGET_DIM] float32
    task_id: str

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ContractError("inputs and labels disagree in length")
        gram = self.class_targets.astype(np.float64) @ self.class_targets.T.astype(np.float64)
        if np.max(np.abs(gram - np.eye(len(self.class_ids)))) > 1e-6:
            raise ContractError("class targets are not pairwise orthonormal")

    def __len__(self) -> int:
        return len(self.inputs)


def target_bank(seed: int = TARGET_BANK_SEED, rows: int = _BANK_ROWS,
                dim: int = TARGET_DIM) -> np.ndarray:
    """Fixed orthonormal class-target vectors shared by every task."""
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))  # pin the QR sign convention
    return q.T[:rows].astype(np.float32)


def _dataset(inputs: np.ndarray, class_of_sample: np.ndarray,
             class_ids: tuple[int, ...], task_id: str) -> TaskDataset:
    bank = target_bank()
    labels = np.asarray(class_of_sample, dtype=np.int64)
    return TaskDataset(
        inputs=np.ascontiguousarray(inputs, dtype=np.float32),
        targets=bank[labels],
        labels=labels,
        class_ids=np.asarray(class_ids, dtype=np.int64),
        class_targets=bank[np.asarray(class_ids)],
        task_id=task_id,
    )


# ---------------------------------------------------------------------------
# MNIST IDX loading with a synthetic fallback
# ---------------------------------------------------------------------------

def _open_maybe_gzip(path: Path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def load_idx_images(path: Path) -> np.ndarray:
    """Read a big-endian IDX image file into [N, rows*cols] float32 in [0, 1]."""
    with _open_maybe_gzip(Path(path)) as fh:
        header = fh.read(16)
        if len(header) != 16:
            raise DataFormatError(f"{path}: truncated IDX header")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGE_MAGIC:
            raise DataFormatError(f"{path}: bad image magic 0x{magic:08x}")
        raw = fh.read(count * rows * cols)
    if len(raw) != count * rows * cols:
        raise DataFormatError(f"{path}: truncated IDX payload")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)
    return (pixels.astype(np.float32) / 255.0)


def load_idx_labels(path: Path) -> np.ndarray:
    with _open_maybe_gzip(Path(path)) as fh:
        header = fh.read(8)
        if len(header) != 8:
            raise DataFormatError(f"{path}: truncated IDX header")
        magic, count = struct.unpack(">II", header)
        if magic != IDX_LABEL_MAGIC:
            raise DataFormatError(f"{path}: bad label magic 0x{magic:08x}")
        raw = fh.read(count)
    if len(raw) != count:
        raise DataFormatError(f"{path}: truncated IDX payload")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


_IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find_idx_pair(root: Path, split: str) -> tuple[Path, Path] | None:
    image_name, label_name = _IDX_FILES[split]
    for suffix in ("", ".gz"):
        images = root / (image_name + suffix)
        labels = root / (label_name + suffix)
        if images.exists() and labels.exists():
            return images, labels
    return None


def synthetic_digits(mean_seed: int, sample_seed: int, count: int,
                     input_dim: int = 784, mean_scale: float = 0.35,
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Seeded Gaussian class blobs standing in for MNIST digits.

    Class means depend only on ``mean_seed`` so different splits of one
    dataset share a distribution; per-sample noise comes from
    ``sample_seed``. The scale keeps tasks learnable but not trivially
    mergeable.
    """
    means = np.random.default_rng(mean_seed).standard_normal((10, input_dim))
    sample_rng = np.random.default_rng(sample_seed)
    digits = sample_rng.integers(0, 10, size=count)
    noise = sample_rng.standard_normal((count, input_dim))
    inputs = (means[digits] * mean_scale + noise).astype(np.float32)
    return inputs, digits.astype(np.int64)


def _digit_pool(path: Path | None, split: str, data_seed: int,
                samples: int | None) -> tuple[np.ndarray, np.ndarray]:
    if path is not None:
        pair = _find_idx_pair(Path(path), split)
        if pair is not None:
            inputs = load_idx_images(pair[0])
            digits = load_idx_labels(pair[1])
            if samples is not None and samples < len(inputs):
                keep = np.random.default_rng(data_seed).choice(
                    len(inputs), size=samples, replace=False)
                keep.sort()
                inputs, digits = inputs[keep], digits[keep]
            return inputs, digits
    # Fallback: synthetic pool; splits draw from disjoint sample streams.
    count = samples if samples is not None else (6000 if split == "train" else 2000)
    sample_seed = data_seed * 2 + (0 if split == "train" else 1)
    return synthetic_digits(data_seed, sample_seed, count)


def make_mnist_tasks(path: Path | None, task: str, *, split: str = "train",
                     data_seed: int = 0, samples: int | None = None,
                     ) -> tuple[TaskDataset, TaskDataset]:
    """Build the two binary-or-split tasks over a shared digit pool.

    ``task`` is ``prime_odd`` (is the digit prime? / is it odd?) or
    ``class_split`` (digits partitioned into two disjoint halves by a seeded
    shuffle). Tasks load IDX files under ``path`` when present and fall back
    to the synthetic digit pool otherwise.
    """
    if split not in _IDX_FILES:
        raise ContractError(f"unknown split {split!r}")
    inputs, digits = _digit_pool(path, split, data_seed, samples)

    if task == "prime_odd":
        prime = np.isin(digits, sorted(PRIME_DIGITS)).astype(np.int64)
        odd = np.isin(digits, sorted(ODD_DIGITS)).astype(np.int64)
        task_a = _dataset(inputs, np.take(PRIME_CLASS_IDS, prime),
                          PRIME_CLASS_IDS, "prime")
        task_b = _dataset(inputs, np.take(ODD_CLASS_IDS, odd),
                          ODD_CLASS_IDS, "odd")
        return task_a, task_b

    if task == "class_split":
        order = np.random.default_rng(data_seed).permutation(10)
        half_a, half_b = np.sort(order[:5]), np.sort(order[5:])
        in_a = np.isin(digits, half_a)
        in_b = np.isin(digits, half_b)
        task_a = _dataset(inputs[in_a], digits[in_a], tuple(half_a), "split_a")
        task_b = _dataset(inputs[in_b], digits[in_b], tuple(half_b), "split_b")
        return task_a, task_b

    raise ContractError(f"unknown task kind {task!r}")


def make_blobs_task(seed: int, count: int = 512, input_dim: int = 16,
                    separation: float = 2.5) -> TaskDataset:
    """Small linearly separable two-class task for harness tests."""
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(input_dim)
    direction /= np.linalg.norm(direction)
    labels = rng.integers(0, 2, size=count)
    centers = np.where(labels[:, None] == 1, separation, -separation) * direction
    inputs = (centers + rng.standard_normal((count, input_dim))).astype(np.float32)
    return _dataset(inputs, np.take(BLOB_CLASS_IDS, labels), BLOB_CLASS_IDS, "blobs")


# ---------------------------------------------------------------------------
# Task descriptors used by the service and CLI
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DataConfig:
    """Reproducible description of where a task's data comes from."""

    task: str                     # prime_odd | class_split | blobs
    subtask: str = "a"            # a | b (ignored for blobs)
    data_seed: int = 0
    path: str | None = None       # IDX directory; None = synthetic fallback
    samples: int | None = None
    input_dim: int = 784

    def to_meta(self) -> dict:
        return {
            "task": self.task, "subtask": self.subtask,
            "data_seed": self.data_seed, "path": self.path,
            "samples": self.samples, "input_dim": self.input_dim,
        }

    @staticmethod
    def from_meta(meta: dict) -> "DataConfig":
        return DataConfig(**{k: meta[k] for k in (
            "task", "subtask", "data_seed", "path", "samples", "input_dim")})


def load_task(cfg: DataConfig, split: str = "train") -> TaskDataset:
    if cfg.task == "blobs":
        seed = cfg.data_seed * 2 + (0 if split == "train" else 1)
        return make_blobs_task(seed, count=cfg.samples or 512,
                               input_dim=cfg.input_dim)
    pair = make_mnist_tasks(Path(cfg.path) if cfg.path else None, cfg.task,
                            split=split, data_seed=cfg.data_seed,
                            samples=cfg.samples)
    if cfg.subtask == "a":
        return pair[0]
    if cfg.subtask == "b":
        return pair[1]
    raise ContractError(f"unknown subtask {cfg.subtask!r}")
