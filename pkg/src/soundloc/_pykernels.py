"""Pure-Python/numpy implementations of the hot kernels.

Used when the compiled ``_ckernels`` extension is unavailable, or when
``SOUNDLOC_PURE_PYTHON=1`` is set.
"""
import numpy as np

_CHUNK = 1 << 16
# strict-improvement margin; keeps the lexicographically first map on float ties
TIE_EPS = 1e-12


def assign_nearest(X, centers):
    """Index of the nearest center (squared Euclidean) and that distance."""
    X = np.asarray(X, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    return labels.astype(np.int64), d2[np.arange(len(X)), labels]


def best_surjective_map(fractions):
    """Exhaustive search over maps cluster -> category that hit every category.

    ``fractions[k, c]`` is the share of cluster ``k`` carrying label ``c``.
    Maps are visited in lexicographic order (cluster 0 most significant) and
    the first map reaching the maximum purity wins.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    K, n_cat = fr.shape
    total = n_cat ** K
    powers = n_cat ** np.arange(K - 1, -1, -1, dtype=np.int64)
    best_purity = -np.inf
    best_code = -1
    for start in range(0, total, _CHUNK):
        codes = np.arange(start, min(start + _CHUNK, total), dtype=np.int64)
        digits = (codes[:, None] // powers[None, :]) % n_cat
        hit = np.zeros((len(codes), n_cat), dtype=bool)
        np.put_along_axis(hit, digits, True, axis=1)
        surjective = hit.all(axis=1)
        # sequential sum over clusters, same order as the compiled kernel
        purity = np.zeros(len(codes))
        for k in range(K):
            purity += fr[k, digits[:, k]]
        purity[~surjective] = -np.inf
        i = int(np.argmax(purity))
        if purity[i] > best_purity + TIE_EPS:
            best_purity = float(purity[i])
            best_code = int(codes[i])
    if best_code < 0:
        raise ValueError("no surjective map exists (fewer clusters than categories)")
    mapping = (best_code // powers) % n_cat
    return mapping.astype(np.int64), best_purity
