"""K-means object dictionary and purity-maximizing cluster -> category assignment."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .archive import read_archive, write_archive
from .errors import EnumerationTooLargeError, InvalidInputError, VersionMismatchError

DICTIONARY_KIND = "soundloc-dictionary"
DEFAULT_ENUMERATION_CAP = 20_000_000


@dataclass
class CategoryAssignment:
    mapping: np.ndarray  # cluster index -> category index
    purity: float
    num_categories: int

    def members(self, category):
        return np.flatnonzero(self.mapping == category)


@dataclass
class ObjectDictionary:
    keys: np.ndarray  # (K, C)
    labels: np.ndarray  # cluster index per representation
    inertia: float
    clip_ids: list = field(default_factory=list)
    seed: int = 0
    history: list = field(default_factory=list)
    category_assignment: CategoryAssignment | None = None

    @property
    def K(self):
        return self.keys.shape[0]

    @property
    def C(self):
        return self.keys.shape[1]

    @property
    def assignments(self):
        return dict(zip(self.clip_ids, self.labels.tolist()))


def _kmeans_pp(X, K, rng):
    n = len(X)
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _update_centers(X, labels, dist, centers):
    """Cluster means; an empty cluster is reseeded at the point farthest from its center."""
    K = len(centers)
    counts = np.bincount(labels, minlength=K)
    new = np.zeros_like(centers)
    np.add.at(new, labels, X)
    labels = labels.copy()
    dist = dist.copy()
    for k in np.flatnonzero(counts == 0):
        donors = counts[labels] > 1
        if not donors.any():
            new[k] = centers[k]
            continue
        cand = np.where(donors, dist, -1.0)
        i = int(np.argmax(cand))
        old = labels[i]
        counts[old] -= 1
        new[old] -= X[i]
        labels[i] = k
        dist[i] = 0.0
        counts[k] = 1
        new[k] = X[i]
    nonempty = counts > 0
    new[nonempty] /= counts[nonempty, None]
    return new


def _lloyd(X, centers, max_iter, tol):
    history = []
    for _ in range(max_iter):
        labels, dist = kernels.assign_nearest(X, centers)
        history.append(float(dist.sum()))
        new = _update_centers(X, labels, dist, centers)
        shift = float(np.sqrt(((new - centers) ** 2).sum(axis=1)).max())
        centers = new
        if shift < tol:
            break
    labels, dist = kernels.assign_nearest(X, centers)
    history.append(float(dist.sum()))
    return centers, labels, history


def fit_dictionary(reps, K: int, seed: int = 0, *, init=None, clip_ids=None, n_init: int = 1,
                   max_iter: int = 300, tol: float = 1e-6) -> ObjectDictionary:
    """Lloyd's algorithm with k-means++ seeding (or explicit ``init`` centers).

    With ``n_init > 1`` the k-means++ seeding is repeated and the run with the
    lowest objective kept. ``history`` holds the objective (sum of squared
    distances to the nearest key) of the kept run after every assignment
    step; it never increases.
    """
    X = np.asarray(reps, dtype=np.float64)
    if X.ndim != 2:
        raise InvalidInputError("representations must be a 2-D array (N, C)")
    if K < 1 or len(X) < K:
        raise InvalidInputError(f"need at least K={K} representations, got {len(X)}")
    if n_init < 1:
        raise InvalidInputError("n_init must be >= 1")
    rng = np.random.default_rng(seed)
    if init is not None:
        starts = [np.array(init, dtype=np.float64)]
        if starts[0].shape != (K, X.shape[1]):
            raise InvalidInputError(f"init centers must have shape {(K, X.shape[1])}")
    else:
        starts = (_kmeans_pp(X, K, rng) for _ in range(n_init))
    best = None
    for centers in starts:
        run = _lloyd(X, centers, max_iter, tol)
        if best is None or run[2][-1] < best[2][-1]:
            best = run
    centers, labels, history = best
    ids = list(clip_ids) if clip_ids is not None else [str(i) for i in range(len(X))]
    return ObjectDictionary(keys=centers, labels=labels, inertia=history[-1],
                            clip_ids=ids, seed=seed, history=history)


def class_means(reps, labels, K):
    """Per-label means; ``None`` if some label in ``range(K)`` has no member."""
    X = np.asarray(reps, dtype=np.float64)
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=K)
    if (counts == 0).any():
        return None
    out = np.zeros((K, X.shape[1]))
    np.add.at(out, labels, X)
    return out / counts[:, None]


def cluster_fractions(cluster_labels, category_labels, K, num_categories):
    counts = np.zeros((K, num_categories), dtype=np.float64)
    np.add.at(counts, (np.asarray(cluster_labels), np.asarray(category_labels)), 1.0)
    sizes = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, sizes, out=np.zeros_like(counts), where=sizes > 0), counts


def assign_categories(dictionary: ObjectDictionary, labels, *, num_categories=None,
                      cap: int = DEFAULT_ENUMERATION_CAP) -> CategoryAssignment:
    """Surjective cluster -> category map with the largest summed purity.

    ``labels`` is either a mapping clip id -> category or a sequence aligned
    with ``dictionary.labels``. Purity is the unnormalized sum over clusters
    of the fraction of the cluster carrying the mapped category.
    """
    if isinstance(labels, dict):
        missing = [c for c in dictionary.clip_ids if c not in labels]
        if missing:
            raise InvalidInputError(f"no category label for clips {missing[:5]}")
        y = np.array([labels[c] for c in dictionary.clip_ids], dtype=np.int64)
    else:
        y = np.asarray(labels, dtype=np.int64)
        if len(y) != len(dictionary.labels):
            raise InvalidInputError("labels must align with the dictionary assignments")
    if num_categories is None:
        num_categories = int(y.max()) + 1
    present = np.unique(y)
    K = dictionary.K
    if K < len(present):
        raise InvalidInputError(f"K={K} clusters cannot cover {len(present)} categories")
    if float(len(present)) ** K > cap:
        raise EnumerationTooLargeError(
            f"{len(present)}^{K} candidate maps exceed the cap of {cap}; use a smaller K")
    # search only over categories that actually occur, then translate back
    remap = np.searchsorted(present, y)
    fractions, _ = cluster_fractions(dictionary.labels, remap, K, len(present))
    local, purity = kernels.best_surjective_map(fractions)
    return CategoryAssignment(mapping=present[local].astype(np.int64), purity=float(purity),
                              num_categories=int(num_categories))


def category_activation(maps, assignment: CategoryAssignment):
    """Sum per-cluster maps ``(..., K, H, W)`` into per-category maps ``(..., N, H, W)``.

    Works on numpy arrays and torch tensors alike.
    """
    K = len(assignment.mapping)
    onehot = np.zeros((assignment.num_categories, K))
    onehot[assignment.mapping, np.arange(K)] = 1.0
    if isinstance(maps, np.ndarray):
        return np.einsum("ck,...khw->...chw", onehot.astype(maps.dtype), maps)
    import torch
    A = torch.as_tensor(onehot, dtype=maps.dtype, device=maps.device)
    return torch.einsum("ck,...khw->...chw", A, maps)


def save_dictionary(dictionary: ObjectDictionary, path):
    tensors = {"keys": dictionary.keys, "labels": dictionary.labels.astype(np.int64)}
    meta = {"kind": DICTIONARY_KIND, "K": dictionary.K, "C": dictionary.C, "seed": dictionary.seed,
            "inertia": dictionary.inertia, "clip_ids": list(dictionary.clip_ids)}
    ca = dictionary.category_assignment
    if ca is not None:
        tensors["cluster_to_category"] = ca.mapping.astype(np.int64)
        meta["purity"] = ca.purity
        meta["num_categories"] = ca.num_categories
    write_archive(path, tensors, meta)


def load_dictionary(path) -> ObjectDictionary:
    tensors, meta = read_archive(path)
    if meta.get("kind") != DICTIONARY_KIND:
        raise VersionMismatchError(f"{path} is not a dictionary archive (kind={meta.get('kind')!r})")
    ca = None
    if "cluster_to_category" in tensors:
        ca = CategoryAssignment(tensors["cluster_to_category"], meta["purity"], meta["num_categories"])
    return ObjectDictionary(keys=tensors["keys"], labels=tensors["labels"], inertia=meta["inertia"],
                            clip_ids=meta["clip_ids"], seed=meta["seed"], category_assignment=ca)
