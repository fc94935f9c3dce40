"""Per-class prototype sets on the sphere with a shared vMF concentration."""
import json

import numpy as np

from .errors import DimensionMismatch, FormatError, OverlappingForgetSets, UnknownClass
from .geometry import UNIT_TOL, logsumexp, softmax


class PrototypeBank:
    """``prototypes[j, k]`` is the k-th unit mean direction of class j.

    Mixture weights are uniform (1/K). ``forgotten`` classes are excluded from
    :attr:`retained` and therefore from every retained-set loss and score.
    """

    def __init__(self, prototypes, kappa, forgotten=()):
        P = np.asarray(prototypes, dtype=np.float64)
        if P.ndim == 2:
            P = P[:, None, :]
        if P.ndim != 3:
            raise DimensionMismatch("prototypes must have shape (classes, K, D)")
        if np.any(np.abs(np.linalg.norm(P, axis=-1) - 1.0) > UNIT_TOL):
            raise ValueError("every prototype must be unit-norm")
        if not kappa >= 0:
            raise ValueError("kappa must be >= 0")
        self.prototypes = P
        self.prototypes.setflags(write=False)
        self.kappa = float(kappa)
        forgotten = frozenset(int(c) for c in forgotten)
        bad = [c for c in forgotten if not 0 <= c < P.shape[0]]
        if bad:
            raise UnknownClass(f"unknown class ids {sorted(bad)}")
        self.forgotten = forgotten

    @property
    def n_classes(self):
        return self.prototypes.shape[0]

    @property
    def k(self):
        return self.prototypes.shape[1]

    @property
    def dim(self):
        return self.prototypes.shape[2]

    @property
    def retained(self):
        return tuple(c for c in range(self.n_classes) if c not in self.forgotten)

    @property
    def all_classes(self):
        return tuple(range(self.n_classes))

    def with_forgotten(self, classes):
        """Return a bank that additionally forgets ``classes``."""
        classes = frozenset(int(c) for c in classes)
        bad = [c for c in classes if not 0 <= c < self.n_classes]
        if bad:
            raise UnknownClass(f"unknown class ids {sorted(bad)}")
        if classes & self.forgotten:
            raise OverlappingForgetSets(f"classes {sorted(classes & self.forgotten)} already forgotten")
        return PrototypeBank(self.prototypes, self.kappa, self.forgotten | classes)

    def _select(self, classes):
        classes = self.retained if classes is None else tuple(classes)
        return classes, self.prototypes[list(classes)]

    def logits(self, Z, classes=None):
        """Mixture logits L_j(z) for each row of Z over ``classes`` (default: retained)."""
        _, P = self._select(classes)
        Z = np.atleast_2d(Z)
        if Z.shape[1] != self.dim:
            raise DimensionMismatch(f"feature dim {Z.shape[1]} != prototype dim {self.dim}")
        sims = np.einsum("nd,mkd->nmk", Z, P)
        return logsumexp(self.kappa * sims, axis=-1) - np.log(self.k)

    def logits_and_grads(self, Z, classes=None):
        """Logits (n, m) and their gradients w.r.t. z, shape (n, m, D)."""
        _, P = self._select(classes)
        Z = np.atleast_2d(Z)
        sims = self.kappa * np.einsum("nd,mkd->nmk", Z, P)
        logits = logsumexp(sims, axis=-1) - np.log(self.k)
        resp = softmax(sims, axis=-1)
        grads = self.kappa * np.einsum("nmk,mkd->nmd", resp, P)
        return logits, grads

    def nearest(self, Z, classes=None):
        """Per class, the prototype with maximal cosine to each z: (n, m, D)."""
        _, P = self._select(classes)
        Z = np.atleast_2d(Z)
        if P.shape[1] == 1:
            return np.broadcast_to(P[None, :, 0], (Z.shape[0],) + P[:, 0].shape)
        sims = np.einsum("nd,mkd->nmk", Z, P)
        idx = np.argmax(sims, axis=-1)
        m = P.shape[0]
        return P[np.arange(m)[None, :], idx]

    def predict(self, Z, classes=None):
        """argmax class over ``classes``; ties go to the smallest class id."""
        classes, _ = self._select(classes)
        order = np.argsort(classes, kind="stable")
        L = self.logits(Z, classes)[:, order]
        return np.asarray(classes)[order][np.argmax(L, axis=1)]

    def __eq__(self, other):
        return (
            isinstance(other, PrototypeBank)
            and self.kappa == other.kappa
            and self.forgotten == other.forgotten
            and np.array_equal(self.prototypes, other.prototypes)
        )

    def to_dict(self):
        return {
            "kappa": self.kappa,
            "forgotten": sorted(self.forgotten),
            "shape": list(self.prototypes.shape),
            "prototypes": self.prototypes.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        try:
            P = np.asarray(d["prototypes"], dtype=np.float64).reshape(d["shape"])
            return cls(P, d["kappa"], d.get("forgotten", ()))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed prototype bank: {exc}") from exc


def save_bank(path, bank):
    with open(path, "w") as fh:
        json.dump(bank.to_dict(), fh)


def load_bank(path):
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"prototype bank is not valid JSON: {exc.msg}", exc.pos) from exc
    return PrototypeBank.from_dict(d)
