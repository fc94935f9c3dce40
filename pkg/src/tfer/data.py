"""Embedding datasets: synthetic vMF-mixture generator, binary container, forget plans."""
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    FormatError,
    InvalidTask,
    MeanPlacementFailure,
    OverlappingForgetSets,
    UnknownClass,
    VersionMismatch,
)
from .geometry import VmfParams, sample_vmf, uniform_sphere

DATASET_MAGIC = b"TFERDS01"
DATASET_VERSION = 1
MIN_MEAN_ANGLE = np.pi / 8
OOD_MIX_COMPONENTS = 4


@dataclass(eq=False)
class EmbeddingDataset:
    train_x: np.ndarray  # (n_train, D) float32
    train_y: np.ndarray  # (n_train,) uint16
    test_x: np.ndarray
    test_y: np.ndarray
    ood: dict  # name -> (n, D) float32, insertion-ordered
    class_count: int
    seed: int = None
    source: str = ""
    class_means: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.train_x = np.ascontiguousarray(self.train_x, dtype=np.float32)
        self.test_x = np.ascontiguousarray(self.test_x, dtype=np.float32)
        self.train_y = np.ascontiguousarray(self.train_y, dtype=np.uint16)
        self.test_y = np.ascontiguousarray(self.test_y, dtype=np.uint16)
        self.ood = {str(k): np.ascontiguousarray(v, dtype=np.float32) for k, v in self.ood.items()}
        for name, y in (("train", self.train_y), ("test", self.test_y)):
            if y.size and int(y.max()) >= self.class_count:
                raise ValueError(f"{name} label {int(y.max())} >= class count {self.class_count}")

    @property
    def dim(self):
        return self.train_x.shape[1]

    def __eq__(self, other):
        if not isinstance(other, EmbeddingDataset):
            return NotImplemented
        return (
            self.class_count == other.class_count
            and list(self.ood) == list(other.ood)
            and all(np.array_equal(self.ood[k], other.ood[k]) for k in self.ood)
            and np.array_equal(self.train_x, other.train_x)
            and np.array_equal(self.train_y, other.train_y)
            and np.array_equal(self.test_x, other.test_x)
            and np.array_equal(self.test_y, other.test_y)
        )

    def summary(self):
        lines = [
            f"source: {self.source or '-'}",
            f"dimension: {self.dim}",
            f"classes: {self.class_count}",
            f"train: {len(self.train_y)}  test: {len(self.test_y)}",
        ]
        lines += [f"ood {name}: {len(x)}" for name, x in self.ood.items()]
        return "\n".join(lines)


def _place_means(rng, classes, d, min_angle=MIN_MEAN_ANGLE, max_attempts=10_000):
    cos_max = np.cos(min_angle)
    means = []
    attempts = 0
    while len(means) < classes:
        if attempts >= max_attempts:
            raise MeanPlacementFailure(
                f"could not place {classes} means with pairwise angle >= {min_angle:.4f} in {max_attempts} attempts"
            )
        attempts += 1
        v = rng.standard_normal(d)
        v /= np.linalg.norm(v)
        if all(v @ m <= cos_max for m in means):
            means.append(v)
    return np.array(means)


def generate_synthetic(classes=10, per_class=500, d=32, kappa=20.0, ood_sets=3, ood_per_set=1000, seed=0, ood_kappa=None):
    """Well-separated vMF class clusters plus external OOD sets.

    Even-numbered OOD sets are uniform on the sphere; odd ones are vMF
    mixtures around fresh random directions (concentration ``ood_kappa``,
    default ``kappa``). Train/test split is 80/20 per class.
    """
    if classes < 2:
        raise ValueError("classes must be >= 2")
    if per_class < 20:
        raise ValueError("per_class must be >= 20")
    if d < 2:
        raise ValueError("d must be >= 2")
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    ood_kappa = kappa if ood_kappa is None else ood_kappa
    ss = np.random.SeedSequence(seed)
    mean_seed, class_seed, ood_seed = ss.spawn(3)
    means = _place_means(np.random.default_rng(mean_seed), classes, d)
    n_train = (4 * per_class) // 5
    tr_x, tr_y, te_x, te_y = [], [], [], []
    for c, cs in zip(range(classes), class_seed.spawn(classes)):
        x = sample_vmf(VmfParams(means[c], kappa), per_class, cs)
        tr_x.append(x[:n_train])
        te_x.append(x[n_train:])
        tr_y.append(np.full(n_train, c))
        te_y.append(np.full(per_class - n_train, c))
    ood = {}
    for i, s in enumerate(ood_seed.spawn(ood_sets)):
        if i % 2 == 0:
            ood[f"uniform{i}"] = uniform_sphere(d, ood_per_set, s)
        else:
            centre_seed, *comp_seeds = s.spawn(OOD_MIX_COMPONENTS + 1)
            centres = _place_means(np.random.default_rng(centre_seed), OOD_MIX_COMPONENTS, d)
            counts = np.full(OOD_MIX_COMPONENTS, ood_per_set // OOD_MIX_COMPONENTS)
            counts[: ood_per_set % OOD_MIX_COMPONENTS] += 1
            ood[f"vmfmix{i}"] = np.concatenate(
                [sample_vmf(VmfParams(m, ood_kappa), int(n), cs) for m, n, cs in zip(centres, counts, comp_seeds)]
            )
    return EmbeddingDataset(
        np.concatenate(tr_x),
        np.concatenate(tr_y),
        np.concatenate(te_x),
        np.concatenate(te_y),
        ood,
        classes,
        seed=seed,
        source=f"synthetic(classes={classes}, per_class={per_class}, d={d}, kappa={kappa}, seed={seed})",
        class_means=means,
    )


# -- binary container ------------------------------------------------------

_HEADER = struct.Struct("<IIIIII")  # version, D, classes, n_train, n_test, n_ood_sets


def dataset_to_bytes(ds):
    parts = [DATASET_MAGIC, _HEADER.pack(DATASET_VERSION, ds.dim, ds.class_count, len(ds.train_y), len(ds.test_y), len(ds.ood))]
    for name, x in ds.ood.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<I", len(x)))
    for x, y in ((ds.train_x, ds.train_y), (ds.test_x, ds.test_y)):
        parts.append(x.astype("<f4").tobytes())
        parts.append(y.astype("<u2").tobytes())
    for x in ds.ood.values():
        parts.append(x.astype("<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_dataset(ds, path):
    data = dataset_to_bytes(ds)
    with open(path, "wb") as fh:
        fh.write(data)
    return zlib.crc32(data[:-4])


def load_dataset(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    ds = dataset_from_bytes(buf)
    ds.source = str(path)
    return ds


def dataset_from_bytes(buf):
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf) - 4:
            raise FormatError(f"truncated while reading {what}", pos)
        out = buf[pos : pos + n]
        pos += n
        return out

    if len(buf) < len(DATASET_MAGIC) + _HEADER.size + 4:
        raise FormatError("file too short for a dataset header", len(buf))
    magic = buf[:8]
    if magic != DATASET_MAGIC:
        if magic[:6] == DATASET_MAGIC[:6]:
            raise VersionMismatch(f"unsupported container tag {magic!r}", 0)
        raise FormatError("not a dataset file (bad magic)", 0)
    pos = 8
    version, d, classes, n_train, n_test, n_ood = _HEADER.unpack(take(_HEADER.size, "header"))
    if version != DATASET_VERSION:
        raise VersionMismatch(f"dataset version {version}, expected {DATASET_VERSION}", 8)
    if d < 1:
        raise FormatError("dimension must be positive", 12)
    ood_meta = []
    for _ in range(n_ood):
        (nlen,) = struct.unpack("<I", take(4, "OOD name length"))
        at = pos
        try:
            name = take(nlen, "OOD name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"OOD set name is not UTF-8: {exc.reason}", at) from None
        (count,) = struct.unpack("<I", take(4, "OOD count"))
        ood_meta.append((name, count))

    def block(n, what):
        at = pos
        x = np.frombuffer(take(4 * n * d, f"{what} vectors"), dtype="<f4").reshape(n, d)
        return x.astype(np.float32), at

    def labels(n, what):
        at = pos
        y = np.frombuffer(take(2 * n, f"{what} labels"), dtype="<u2").astype(np.uint16)
        bad = np.flatnonzero(y >= classes)
        if bad.size:
            i = int(bad[0])
            raise FormatError(f"{what} record {i} has class id {int(y[i])} >= class count {classes}", at + 2 * i)
        return y

    train_x, _ = block(n_train, "train")
    train_y = labels(n_train, "train")
    test_x, _ = block(n_test, "test")
    test_y = labels(n_test, "test")
    ood = {}
    for name, count in ood_meta:
        if name in ood:
            raise FormatError(f"duplicate OOD set name {name!r}", pos)
        ood[name], _ = block(count, f"OOD set {name!r}")
    if pos != len(buf) - 4:
        raise FormatError("unexpected bytes before checksum", pos)
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise FormatError("CRC32 mismatch", len(buf) - 4)
    return EmbeddingDataset(train_x, train_y, test_x, test_y, ood, classes)


def dataset_crc32(ds):
    return zlib.crc32(dataset_to_bytes(ds)[:-4])


# -- forget plans ----------------------------------------------------------


class ForgetPlan:
    """Ordered, pairwise-disjoint class sets, one per unlearning task."""

    def __init__(self, tasks, class_count=None):
        self.tasks = [frozenset(int(c) for c in t) for t in tasks]
        seen = set()
        for t in self.tasks:
            if t & seen:
                raise OverlappingForgetSets(f"classes {sorted(t & seen)} appear in more than one task")
            seen |= t
        if class_count is not None:
            bad = sorted(c for c in seen if not 0 <= c < class_count)
            if bad:
                raise UnknownClass(f"unknown class ids {bad}")

    def __len__(self):
        return len(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]

    def upto(self, i):
        """Union of forget sets for tasks 0..i."""
        return frozenset().union(*self.tasks[: i + 1])


@dataclass
class ForgetViews:
    """Index views into a dataset for one task; arrays are materialized on access."""

    dataset: EmbeddingDataset
    forget_train_idx: np.ndarray
    retain_train_idx: np.ndarray
    forget_test_idx: np.ndarray
    retain_test_idx: np.ndarray

    @property
    def forget_train(self):
        return self.dataset.train_x[self.forget_train_idx], self.dataset.train_y[self.forget_train_idx]

    @property
    def retain_train(self):
        return self.dataset.train_x[self.retain_train_idx], self.dataset.train_y[self.retain_train_idx]

    @property
    def forget_test(self):
        return self.dataset.test_x[self.forget_test_idx], self.dataset.test_y[self.forget_test_idx]

    @property
    def retain_test(self):
        return self.dataset.test_x[self.retain_test_idx], self.dataset.test_y[self.retain_test_idx]


def apply_forget_plan(dataset, plan, task_index, cumulative=False):
    """Partition labeled data by task ``task_index``'s forget set (or the union up to it)."""
    if not 0 <= task_index < len(plan):
        raise InvalidTask(f"task index {task_index} outside plan of length {len(plan)}")
    forget = sorted(plan.upto(task_index) if cumulative else plan[task_index])
    f_tr = np.isin(dataset.train_y, forget)
    f_te = np.isin(dataset.test_y, forget)
    return ForgetViews(
        dataset,
        np.flatnonzero(f_tr),
        np.flatnonzero(~f_tr),
        np.flatnonzero(f_te),
        np.flatnonzero(~f_te),
    )


def validation_split(labels, frac=0.2, seed=0):
    """Per-class random split of sample indices into (fit, validation)."""
    labels = np.asarray(labels)
    rng = np.random.default_rng([seed, 0x5A11])
    fit, val = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        n_val = int(round(frac * idx.size))
        val.append(idx[:n_val])
        fit.append(idx[n_val:])
    return np.sort(np.concatenate(fit)), np.sort(np.concatenate(val))
