"""Synthetic quadratic problems, IDX (MNIST) loading, client partitioning
and patch-trigger poisoning."""

from __future__ import annotations

import gzip
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigError, FormatError

# IDX type byte -> (numpy big-endian dtype, element size)
_IDX_TYPES = {
    0x08: (np.dtype(">u1"), 1),
    0x09: (np.dtype(">i1"), 1),
    0x0B: (np.dtype(">i2"), 2),
    0x0C: (np.dtype(">i4"), 4),
    0x0D: (np.dtype(">f4"), 4),
    0x0E: (np.dtype(">f8"), 8),
}
_IDX_CODES = {np.dtype(v[0]).newbyteorder("="): k for k, v in _IDX_TYPES.items()}

MNIST_IMAGE_MAGIC = 0x00000803
MNIST_LABEL_MAGIC = 0x00000801

PACKAGED_MNIST = Path(__file__).parent / "_data" / "mnist5k"
DATA_DIR_ENV = "FEDUHB_DATA_DIR"


@dataclass(eq=False)
class Dataset:
    """Feature matrix ``X`` (n, d) with integer labels ``y`` (n,)."""

    X: np.ndarray
    y: np.ndarray
    num_classes: int = 10
    image_shape: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.y.ndim != 1 or len(self.X) != len(self.y):
            raise ConfigError(f"inconsistent dataset shapes X{self.X.shape} y{self.y.shape}")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ConfigError(f"labels must lie in [0, {self.num_classes})")
        if self.image_shape is not None and math.prod(self.image_shape) != self.X.shape[1]:
            raise ConfigError(f"image shape {self.image_shape} does not match {self.X.shape[1]} features")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.num_classes, self.image_shape)

    def batch(self, indices) -> "Dataset":
        return self.subset(indices)


@dataclass(eq=False)
class QuadraticShard:
    """One client of a quadratic problem: loss ``0.5 (w-b)^T A (w-b)``.

    A quadratic client counts as a single example, so every local epoch is
    one full-batch gradient step and aggregation weights are equal.
    """

    A: np.ndarray
    b: np.ndarray

    def __len__(self) -> int:
        return 1

    @property
    def dim(self) -> int:
        return len(self.b)

    def batch(self, indices) -> "QuadraticShard":
        return self


@dataclass(eq=False)
class QuadraticProblem:
    shards: List[QuadraticShard]
    mu: float
    L: float

    @property
    def dim(self) -> int:
        return self.shards[0].dim

    @property
    def hessian(self) -> np.ndarray:
        return sum(s.A for s in self.shards) / len(self.shards)

    @property
    def optimum(self) -> np.ndarray:
        rhs = sum(s.A @ s.b for s in self.shards) / len(self.shards)
        return np.linalg.solve(self.hessian, rhs)

    def loss(self, w) -> float:
        """Mean client loss."""
        w = np.asarray(w, dtype=np.float64)
        return float(np.mean([0.5 * (w - s.b) @ s.A @ (w - s.b) for s in self.shards]))

    def gradient(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        return sum(s.A @ (w - s.b) for s in self.shards) / len(self.shards)

    def restrict(self, client_ids) -> "QuadraticProblem":
        """The federation of the listed clients only, with its own mu and L."""
        shards = [self.shards[c] for c in client_ids]
        if not shards:
            raise ConfigError("a quadratic problem needs at least one client")
        eig = np.linalg.eigvalsh(sum(s.A for s in shards) / len(shards))
        return QuadraticProblem(shards, float(eig[0]), float(eig[-1]))

    def excess_loss(self, w) -> float:
        """``loss(w) - loss(w*)``, computed via the Hessian to avoid cancellation."""
        d = np.asarray(w, dtype=np.float64) - self.optimum
        return float(0.5 * d @ self.hessian @ d)


@dataclass(frozen=True)
class TriggerSpec:
    row: int = 24
    col: int = 24
    height: int = 4
    width: int = 4
    value: float = 1.0
    target_label: int = 0
    poison_fraction: float = 0.5

    def validate(self, image_shape) -> None:
        if image_shape is None:
            raise ConfigError("backdoor trigger needs image-shaped data")
        rows, cols = image_shape
        if self.height < 1 or self.width < 1:
            raise ConfigError("trigger patch must be at least 1x1")
        if self.row < 0 or self.col < 0 or self.row + self.height > rows or self.col + self.width > cols:
            raise ConfigError(
                f"trigger patch rows {self.row}:{self.row + self.height}, cols {self.col}:{self.col + self.width} "
                f"falls outside {rows}x{cols} image"
            )
        if not 0.0 < self.poison_fraction <= 1.0:
            raise ConfigError("poison_fraction must lie in (0, 1]")


@dataclass
class PartitionPlan:
    client_shards: Dict[int, np.ndarray]
    num_clients: int

    def shard_sizes(self) -> List[int]:
        return [len(self.client_shards[c]) for c in range(self.num_clients)]


# ---------------------------------------------------------------------------
# synthetic problems


def _random_orthogonal(dim: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def gen_quadratic(num_clients: int, dim: int, mu_target: float, L_target: float,
                  rng: np.random.Generator, heterogeneity: float = 0.5,
                  optimum_scale: float = 1.0) -> QuadraticProblem:
    """Random strongly convex quadratic federation with a prescribed spectrum.

    The mean Hessian is ``Q diag(lam) Q^T`` with ``lam`` evenly spaced on
    ``[mu_target, L_target]``. Client Hessians add zero-sum symmetric
    perturbations whose spectral norm is at most ``heterogeneity * mu_target``,
    so every ``A_c`` stays positive definite and the mean is exact.
    """
    if num_clients < 1 or dim < 1:
        raise ConfigError("num_clients and dim must be positive")
    if not (0 < mu_target <= L_target) or not math.isfinite(L_target):
        raise ConfigError(f"need 0 < mu <= L, got mu={mu_target}, L={L_target}")
    if not 0 <= heterogeneity < 1:
        raise ConfigError("heterogeneity must lie in [0, 1)")
    lam = np.linspace(mu_target, L_target, dim) if dim > 1 else np.array([mu_target])
    if dim > 1:
        lam[0], lam[-1] = mu_target, L_target
    Q = _random_orthogonal(dim, rng)
    H = (Q * lam) @ Q.T
    H = 0.5 * (H + H.T)

    perturb = []
    if num_clients > 1 and dim > 1 and heterogeneity > 0:
        raw = []
        for _ in range(num_clients):
            M = rng.standard_normal((dim, dim))
            raw.append(0.5 * (M + M.T))
        mean_raw = sum(raw) / num_clients
        centred = [R - mean_raw for R in raw]
        worst = max(np.linalg.norm(E, 2) for E in centred)
        scale = heterogeneity * mu_target / worst if worst > 0 else 0.0
        perturb = [scale * E for E in centred]
        # re-centre after scaling so the mean Hessian is exactly H
        drift = sum(perturb) / num_clients
        perturb = [E - drift for E in perturb]
    else:
        perturb = [np.zeros((dim, dim)) for _ in range(num_clients)]

    shards = []
    for c in range(num_clients):
        A = H + perturb[c]
        A = 0.5 * (A + A.T)
        b = optimum_scale * rng.standard_normal(dim)
        shards.append(QuadraticShard(A, b))
    eig = np.linalg.eigvalsh(sum(s.A for s in shards) / num_clients)
    return QuadraticProblem(shards, float(eig[0]), float(eig[-1]))


# ---------------------------------------------------------------------------
# IDX files


def _open_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(raw: bytes, expected_magic: Optional[int] = None) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError("file too short for IDX magic number", offset=len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if raw[0] != 0 or raw[1] != 0:
        raise FormatError(f"bad IDX magic 0x{magic:08x}: first two bytes must be zero", offset=0)
    type_code, rank = raw[2], raw[3]
    if type_code not in _IDX_TYPES:
        raise FormatError(f"unknown IDX element type 0x{type_code:02x}", offset=2)
    if expected_magic is not None and magic != expected_magic:
        raise FormatError(f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    header_end = 4 + 4 * rank
    if len(raw) < header_end:
        raise FormatError(f"truncated IDX header: need {header_end} bytes", offset=len(raw))
    dims = struct.unpack(f">{rank}I", raw[4:header_end])
    dtype, size = _IDX_TYPES[type_code]
    count = math.prod(dims)
    need = header_end + count * size
    if len(raw) < need:
        have = (len(raw) - header_end) // size
        raise FormatError(
            f"truncated IDX payload: header declares {count} elements {dims}, found {have}",
            offset=len(raw),
        )
    if len(raw) > need:
        raise FormatError(f"{len(raw) - need} trailing bytes after IDX payload", offset=need)
    return np.frombuffer(raw, dtype=dtype, count=count, offset=header_end).reshape(dims)


def load_idx(path, expected_magic: Optional[int] = None) -> np.ndarray:
    """Read an IDX file (optionally gzip-compressed) into a native-endian array.

    Rank-3 unsigned-byte payloads are image stacks and are scaled to [0, 1].
    """
    arr = parse_idx(_open_bytes(path), expected_magic)
    if arr.dtype == np.dtype(">u1") and arr.ndim == 3:
        return arr.astype(np.float64) / 255.0
    return arr.astype(arr.dtype.newbyteorder("="))


def encode_idx(arr) -> bytes:
    arr = np.asarray(arr)
    code = _IDX_CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise ValueError(f"dtype {arr.dtype} has no IDX encoding")
    header = struct.pack(">BBBB", 0, 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + arr.astype(_IDX_TYPES[code][0]).tobytes()


def write_idx(path, arr) -> None:
    path = Path(path)
    payload = encode_idx(arr)
    if path.suffix == ".gz":
        # mtime=0 keeps the compressed bytes reproducible
        with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
            fh.write(payload)
    else:
        path.write_bytes(payload)


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")


def resolve_data_dir(data_dir=None) -> Path:
    if data_dir:
        return Path(data_dir)
    if os.environ.get(DATA_DIR_ENV):
        return Path(os.environ[DATA_DIR_ENV])
    return PACKAGED_MNIST


def load_mnist(data_dir=None, split: str = "train") -> Dataset:
    """Load an MNIST image/label pair (``train`` or ``t10k``) as a flat Dataset."""
    d = resolve_data_dir(data_dir)
    prefix = {"train": "train", "test": "t10k", "t10k": "t10k"}[split]
    images = load_idx(_find(d, f"{prefix}-images-idx3-ubyte"), MNIST_IMAGE_MAGIC)
    labels = load_idx(_find(d, f"{prefix}-labels-idx1-ubyte"), MNIST_LABEL_MAGIC)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels in {d}")
    n, rows, cols = images.shape
    return Dataset(images.reshape(n, rows * cols), labels.astype(np.int64), 10, (rows, cols))


# ---------------------------------------------------------------------------
# partitioning and poisoning


def partition_iid(dataset_size: int, num_clients: int, rng: np.random.Generator) -> PartitionPlan:
    """Shuffle indices and deal them round-robin to ``num_clients`` shards."""
    if num_clients <= 0:
        raise ConfigError("num_clients must be positive")
    if dataset_size < num_clients:
        raise ConfigError(f"{dataset_size} examples cannot fill {num_clients} non-empty shards")
    perm = rng.permutation(dataset_size)
    shards = {c: np.sort(perm[c::num_clients]) for c in range(num_clients)}
    return PartitionPlan(shards, num_clients)


def client_datasets(dataset: Dataset, plan: PartitionPlan) -> List[Dataset]:
    return [dataset.subset(plan.client_shards[c]) for c in range(plan.num_clients)]


def stamp_trigger(X: np.ndarray, image_shape, spec: TriggerSpec) -> np.ndarray:
    """Return a copy of flat images ``X`` with the trigger patch applied."""
    spec.validate(image_shape)
    out = np.array(X, dtype=np.float64, copy=True)
    imgs = out.reshape(len(out), *image_shape)
    imgs[:, spec.row:spec.row + spec.height, spec.col:spec.col + spec.width] = spec.value
    return out


def inject_backdoor(shard: Dataset, spec: TriggerSpec, rng: np.random.Generator) -> Tuple[Dataset, np.ndarray]:
    """Poison ``ceil(poison_fraction * n)`` randomly chosen examples of a shard.

    Returns the poisoned copy and the sorted indices that were modified.
    """
    spec.validate(shard.image_shape)
    if not 0 <= spec.target_label < shard.num_classes:
        raise ConfigError(f"target label {spec.target_label} outside {shard.num_classes} classes")
    n = len(shard)
    # round first so e.g. 0.7 * 10 does not ceil to 8
    k = min(n, math.ceil(round(spec.poison_fraction * n, 9)))
    chosen = np.sort(rng.permutation(n)[:k])
    X = shard.X.copy()
    y = shard.y.copy()
    X[chosen] = stamp_trigger(shard.X[chosen], shard.image_shape, spec)
    y[chosen] = spec.target_label
    return Dataset(X, y, shard.num_classes, shard.image_shape), chosen
