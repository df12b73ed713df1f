"""Input validation helpers for the estimator API.

Utterances have variable length, so the estimators take lists of per-utterance
feature matrices rather than one rectangular array; these helpers normalize
and sanity-check that structure.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError, DimensionError


def check_feature_matrix(x, dim: int | None = None, name: str = "features") -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise DimensionError(f"{name}: expected a non-empty (T, D) matrix, got shape {x.shape}")
    if dim is not None and x.shape[1] != dim:
        raise DimensionError(f"{name}: expected D={dim}, got D={x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise DataError(f"{name}: non-finite values")
    return x


def normalize_feature_lists(X, n_branches: int):
    """Turn X into a list of per-utterance branch tuples and infer branch dims.

    Single-branch input may be given as a flat list of matrices; multi-branch
    input is a list of length-``n_branches`` tuples/lists of matrices.
    """
    if not isinstance(X, (list, tuple)) or len(X) == 0:
        raise DataError("X must be a non-empty list of feature matrices")
    items = []
    for i, item in enumerate(X):
        if isinstance(item, (list, tuple)):
            if len(item) != n_branches:
                raise DataError(
                    f"X[{i}] has {len(item)} branch matrices, model has {n_branches} branches")
            items.append(tuple(item))
        else:
            if n_branches != 1:
                raise DataError(
                    f"X[{i}] is a single matrix but the model has {n_branches} branches; "
                    f"pass per-utterance tuples of matrices")
            items.append((item,))
    dims = None
    normalized = []
    for i, branches in enumerate(items):
        mats = tuple(check_feature_matrix(m, name=f"X[{i}][{b}]")
                     for b, m in enumerate(branches))
        these = tuple(m.shape[1] for m in mats)
        if dims is None:
            dims = these
        elif these != dims:
            raise DimensionError(
                f"X[{i}] has feature dims {these}, expected {dims} from X[0]")
        normalized.append(mats)
    return normalized, list(dims)


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n:
        raise DataError(f"y must be a length-{n} vector, got shape {y.shape}")
    return y
