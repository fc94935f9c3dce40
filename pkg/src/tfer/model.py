"""Frozen MLP projector plus an ordered stack of low-rank task adapters.

The projector maps raw embeddings x to the unit sphere::

    h1 = W1 x + b1,  a = tanh(h1),  h = W2 a + b2,  z = h / ||h||

Each adapter adds ``scale * B @ A`` to one of W1 / W2. Base weights never
change after construction; only the active task's adapters receive gradients.
"""
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatch,
    FormatError,
    NoActiveTask,
    NonFiniteLoss,
    ShapeMismatch,
    UnknownTask,
    VersionMismatch,
    ZeroVector,
)
from .geometry import EPS_NORM

PLACEMENTS = {"layer1": (0,), "layer2": (1,), "both": (0, 1)}


def _frozen(a):
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


class Projector:
    """Two affine layers with a tanh between them; immutable once built.

    ``linear=True`` replaces the tanh with the identity (used by oracle tests).
    """

    def __init__(self, w1, b1, w2, b2, linear=False):
        self.w1, self.b1 = _frozen(w1), _frozen(b1)
        self.w2, self.b2 = _frozen(w2), _frozen(b2)
        self.linear = bool(linear)
        d_h, d_in = self.w1.shape
        if self.b1.shape != (d_h,) or self.w2.shape[1] != d_h or self.b2.shape != (self.w2.shape[0],):
            raise ShapeMismatch("inconsistent projector layer shapes")

    @property
    def d_in(self):
        return self.w1.shape[1]

    @property
    def d_h(self):
        return self.w1.shape[0]

    @property
    def d_out(self):
        return self.w2.shape[0]

    @property
    def weights(self):
        return (self.w1, self.w2)

    @property
    def param_count(self):
        return self.w1.size + self.b1.size + self.w2.size + self.b2.size

    @classmethod
    def random(cls, d_in, d_h, d_out, rng, linear=False):
        rng = np.random.default_rng(rng)
        w1 = rng.standard_normal((d_h, d_in)) / np.sqrt(d_in)
        w2 = rng.standard_normal((d_out, d_h)) / np.sqrt(d_h)
        return cls(w1, np.zeros(d_h), w2, np.zeros(d_out), linear=linear)

    @classmethod
    def identity(cls, d):
        eye = np.eye(d)
        return cls(eye, np.zeros(d), eye, np.zeros(d), linear=True)

    def same_as(self, other):
        return (
            self.linear == other.linear
            and all(np.array_equal(p, q) for p, q in zip(self.arrays(), other.arrays()))
        )

    def arrays(self):
        return (self.w1, self.b1, self.w2, self.b2)


@dataclass
class LowRankAdapter:
    layer_index: int
    a: np.ndarray  # r x k
    b: np.ndarray  # d x r
    scale: float

    @property
    def rank(self):
        return self.a.shape[0]

    @property
    def param_count(self):
        return self.a.size + self.b.size

    def delta(self):
        return self.scale * (self.b @ self.a)

    def freeze(self):
        self.a.setflags(write=False)
        self.b.setflags(write=False)

    def copy(self):
        return LowRankAdapter(self.layer_index, self.a.copy(), self.b.copy(), self.scale)


@dataclass
class AdapterTask:
    task_id: int
    adapters: list
    frozen: bool = False

    def adapter(self, layer_index):
        for ad in self.adapters:
            if ad.layer_index == layer_index:
                return ad
        return None


@dataclass
class AdapterStack:
    """Ordered per-task adapter groups; at most one task is trainable."""

    tasks: list = field(default_factory=list)
    active_task: int = None

    def __len__(self):
        return len(self.tasks)

    def task(self, task_id):
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise UnknownTask(f"no adapter task with id {task_id}")

    def has_task(self, task_id):
        return any(t.task_id == task_id for t in self.tasks)

    def active(self):
        if self.active_task is None:
            return None
        return self.task(self.active_task)

    def freeze_active(self):
        t = self.active()
        if t is not None:
            for ad in t.adapters:
                ad.freeze()
            t.frozen = True
        self.active_task = None

    def new_task(self, task_id, projector, placement="both", rank=4, rng=None, scale=None, init_std=0.02):
        """Freeze the current active task and append a zero-delta adapter group."""
        if self.has_task(task_id):
            raise ValueError(f"task id {task_id} already present")
        layers = PLACEMENTS[placement] if isinstance(placement, str) else tuple(placement)
        if not isinstance(rank, (int, np.integer)) or rank < 1:
            raise ValueError(f"rank must be a positive integer, got {rank!r}")
        rng = np.random.default_rng(rng)
        scale = 1.0 / rank if scale is None else float(scale)
        adapters = []
        for li in layers:
            d, k = projector.weights[li].shape
            if rank < 1 or rank > min(d, k) / 2:
                raise ValueError(f"rank {rank} outside [1, min({d},{k})/2] for layer {li}")
            a = rng.normal(0.0, init_std, size=(rank, k))
            adapters.append(LowRankAdapter(li, a, np.zeros((d, rank)), scale))
        self.freeze_active()
        self.tasks.append(AdapterTask(task_id, adapters))
        self.active_task = task_id
        return self.tasks[-1]

    def delta(self, layer_index, upto=None):
        """Summed adapter delta for one layer over tasks up to and including ``upto``."""
        total = None
        for t in self.tasks:
            ad = t.adapter(layer_index)
            if ad is not None:
                total = ad.delta() if total is None else total + ad.delta()
            if upto is not None and t.task_id == upto:
                break
        return total

    def copy(self):
        out = AdapterStack(active_task=self.active_task)
        for t in self.tasks:
            ads = [ad.copy() for ad in t.adapters]
            if t.frozen:
                for ad in ads:
                    ad.freeze()
            out.tasks.append(AdapterTask(t.task_id, ads, t.frozen))
        return out

    def parameter_arrays(self):
        return [(t.task_id, ad.layer_index, ad.a, ad.b) for t in self.tasks for ad in t.adapters]


def trainable_param_count(stack):
    t = stack.active() if stack is not None else None
    return 0 if t is None else sum(ad.param_count for ad in t.adapters)


def effective_weights(projector, stack=None, upto=None):
    ws = []
    for li, w in enumerate(projector.weights):
        d = stack.delta(li, upto) if stack is not None else None
        ws.append(w if d is None else w + d)
    return ws


@dataclass
class ForwardCache:
    x: np.ndarray
    a: np.ndarray
    z: np.ndarray
    hnorm: np.ndarray
    w2: np.ndarray
    linear: bool


def forward_arrays(w1, b1, w2, b2, X, linear=False):
    """Forward pass on raw layer arrays; returns (h, cache)."""
    if X.shape[-1] != w1.shape[1]:
        raise DimensionMismatch(f"input dim {X.shape[-1]} != projector D_in {w1.shape[1]}")
    h1 = X @ w1.T + b1
    a = h1 if linear else np.tanh(h1)
    h = a @ w2.T + b2
    with np.errstate(over="ignore"):
        r = np.linalg.norm(h, axis=1, keepdims=True)
    if not np.all(np.isfinite(r)):
        raise NonFiniteLoss("projector output overflowed")
    if np.any(r <= EPS_NORM):
        raise ZeroVector("projector output has (near) zero norm")
    return h, ForwardCache(X, a, h / r, r, w2, linear)


def _as_batch(x):
    X = np.asarray(x, dtype=np.float64)
    return (X[None, :], True) if X.ndim == 1 else (X, False)


def forward(projector, stack, x, return_hidden=False):
    """Map raw embedding(s) to unit features; optionally also return pre-normalization h."""
    X, single = _as_batch(x)
    w1, w2 = effective_weights(projector, stack)
    h, cache = forward_arrays(w1, projector.b1, w2, projector.b2, X, projector.linear)
    z = cache.z
    if single:
        z, h = z[0], h[0]
    return (z, h) if return_hidden else z


def backprop(cache, G):
    """Pull a cotangent dL/dz back to the effective layer weights.

    Returns (dW1, db1, dW2, db2). Includes the sphere-projection Jacobian
    (I - z z^T) / ||h||.
    """
    z = cache.z
    dh = (G - z * np.sum(z * G, axis=1, keepdims=True)) / cache.hnorm
    dw2 = dh.T @ cache.a
    db2 = dh.sum(axis=0)
    da = dh @ cache.w2
    dh1 = da if cache.linear else da * (1.0 - cache.a**2)
    dw1 = dh1.T @ cache.x
    db1 = dh1.sum(axis=0)
    return dw1, db1, dw2, db2


class AdapterTape:
    """Gradient context returned by :func:`forward_with_jacobian`."""

    def __init__(self, cache, task):
        self.cache = cache
        self.task = task

    @property
    def z(self):
        return self.cache.z

    def vjp(self, G):
        """Contract upstream dL/dz (n x D_out) into {layer_index: (dA, dB)} for the active task.

        Works through the rank-r factors so the full weight gradients are
        never formed: dA = s (dY B)^T X and dB = s dY^T (X A^T).
        """
        G = np.atleast_2d(np.asarray(G, dtype=np.float64))
        c = self.cache
        z = c.z
        dh = (G - z * np.sum(z * G, axis=1, keepdims=True)) / c.hnorm
        dh1 = None
        out = {}
        for ad in self.task.adapters:
            if ad.layer_index == 1:
                dy, x = dh, c.a
            else:
                if dh1 is None:
                    da = dh @ c.w2
                    dh1 = da if c.linear else da * (1.0 - c.a**2)
                dy, x = dh1, c.x
            out[ad.layer_index] = (ad.scale * ((dy @ ad.b).T @ x), ad.scale * (dy.T @ (x @ ad.a.T)))
        return out


def forward_with_jacobian(projector, stack, x):
    task = stack.active() if stack is not None else None
    if task is None:
        raise NoActiveTask("gradient evaluation needs an active adapter task")
    X, _ = _as_batch(x)
    w1, w2 = effective_weights(projector, stack)
    _, cache = forward_arrays(w1, projector.b1, w2, projector.b2, X, projector.linear)
    return cache.z, AdapterTape(cache, task)


def merge_task(projector, stack, task_id=None):
    """Materialize base + all adapter deltas up to ``task_id`` into a new frozen projector."""
    if task_id is None:
        if len(stack) == 0:
            return projector
        task_id = stack.tasks[-1].task_id
    stack.task(task_id)
    w1, w2 = effective_weights(projector, stack, upto=task_id)
    return Projector(w1, projector.b1, w2, projector.b2, linear=projector.linear)


# -- checkpoint container -------------------------------------------------

MODEL_MAGIC = b"TFERMDL1"
_HDR = struct.Struct("<IIIII")  # d_in, d_h, d_out, layer_count, flags


def save_model(path, projector, stack=None):
    stack = stack if stack is not None else AdapterStack()
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(projector, stack))


def model_to_bytes(projector, stack):
    parts = [MODEL_MAGIC]
    parts.append(_HDR.pack(projector.d_in, projector.d_h, projector.d_out, 2, int(projector.linear)))
    active = -1 if stack.active_task is None else stack.active_task
    parts.append(struct.pack("<Ii", len(stack.tasks), active))
    for t in stack.tasks:
        parts.append(struct.pack("<III", t.task_id, len(t.adapters), int(t.frozen)))
        for ad in t.adapters:
            parts.append(struct.pack("<IId", ad.layer_index, ad.rank, ad.scale))
    for arr in projector.arrays():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    for t in stack.tasks:
        for ad in t.adapters:
            parts.append(np.ascontiguousarray(ad.a, dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(ad.b, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def load_model(path):
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated while reading {what}", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))

    def matrix(self, shape, dtype, what):
        count = int(np.prod(shape))
        itemsize = np.dtype(dtype).itemsize
        raw = self.take(count * itemsize, what)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(np.dtype(dtype).newbyteorder("="))


def model_from_bytes(buf):
    r = _Reader(buf)
    magic = r.take(8, "magic")
    if magic != MODEL_MAGIC:
        if magic[:7] == MODEL_MAGIC[:7]:
            raise VersionMismatch(f"unsupported model container version {magic[7:]!r}", 7)
        raise FormatError("not a model checkpoint (bad magic)", 0)
    if len(buf) < 12:
        raise FormatError("truncated before checksum", len(buf))
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise FormatError("checksum mismatch", len(buf) - 4)
    r.buf = buf[:-4]
    d_in, d_h, d_out, n_layers, flags = r.unpack(_HDR.format, "header")
    if n_layers != 2:
        raise FormatError(f"unsupported layer count {n_layers}", 8)
    n_tasks, active = r.unpack("<Ii", "task table header")
    specs = []
    for _ in range(n_tasks):
        task_id, n_ad, frozen = r.unpack("<III", "task entry")
        ads = []
        for _ in range(n_ad):
            pos = r.pos
            li, rank, scale = r.unpack("<IId", "adapter entry")
            if li > 1 or rank < 1:
                raise FormatError(f"bad adapter entry (layer {li}, rank {rank})", pos)
            ads.append((li, rank, scale))
        specs.append((task_id, bool(frozen), ads))
    w1 = r.matrix((d_h, d_in), "<f8", "W1")
    b1 = r.matrix((d_h,), "<f8", "b1")
    w2 = r.matrix((d_out, d_h), "<f8", "W2")
    b2 = r.matrix((d_out,), "<f8", "b2")
    projector = Projector(w1, b1, w2, b2, linear=bool(flags & 1))
    stack = AdapterStack()
    for task_id, frozen, ads in specs:
        adapters = []
        for li, rank, scale in ads:
            d, k = projector.weights[li].shape
            a = r.matrix((rank, k), "<f8", "adapter A")
            b = r.matrix((d, rank), "<f8", "adapter B")
            adapters.append(LowRankAdapter(li, a, b, scale))
        t = AdapterTask(task_id, adapters, frozen)
        if frozen:
            for ad in adapters:
                ad.freeze()
        stack.tasks.append(t)
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after last matrix", r.pos)
    stack.active_task = None if active < 0 else active
    if stack.active_task is not None:
        stack.task(stack.active_task)
    return projector, stack
