"""numpy fallback for the selection kernels (same contract as _select)."""

import numpy as np


def kth_abs_value(x, k):
    return np.partition(np.abs(x), k - 1)[k - 1]


def row_kth_abs_value(x, k):
    return np.partition(np.abs(x), k - 1, axis=1)[:, k - 1]
