"""Pure-numpy implementations of the segment reduction kernels.

Used when the compiled extension is unavailable (or disabled through the
``GUNET_PURE_PYTHON`` environment variable).  Same contracts as
``_ckernels``: float64 C-contiguous values, int64 segment ids, negative
segment ids mean "drop this row".
"""

import numpy as np

BACKEND = "python"


def segment_sum(values, segments, n):
    values = np.atleast_2d(values)
    m, d = values.shape
    out = np.zeros((n, d), dtype=np.float64)
    if m == 0:
        return out
    keep = segments >= 0
    if not keep.all():
        values = values[keep]
        segments = segments[keep]
    # bincount per column beats np.add.at by a wide margin
    for col in range(d):
        out[:, col] = np.bincount(segments, weights=values[:, col], minlength=n)
    return out


def segment_max(values, segments, n):
    """Per-segment columnwise max plus the source row of each winner.

    Ties go to the smallest contributing row index.  Empty segments get
    value 0 and argrow -1.
    """
    values = np.atleast_2d(values)
    m, d = values.shape
    out = np.zeros((n, d), dtype=np.float64)
    argrow = np.full((n, d), -1, dtype=np.int64)
    if m == 0:
        return out, argrow
    keep = segments >= 0
    rows = np.arange(m, dtype=np.int64)[keep]
    vals = values[keep]
    segs = segments[keep]
    if len(segs) == 0:
        return out, argrow
    order = np.argsort(segs, kind="stable")
    vals = vals[order]
    segs = segs[order]
    rows = rows[order]
    starts = np.flatnonzero(np.r_[True, segs[1:] != segs[:-1]])
    seg_ids = segs[starts]
    for col in range(d):
        colmax = np.maximum.reduceat(vals[:, col], starts)
        out[seg_ids, col] = colmax
        # first row (in original order) attaining the columnwise max
        cand = np.where(vals[:, col] == colmax[np.repeat(
            np.arange(len(starts)), np.diff(np.r_[starts, len(segs)]))],
            rows, np.iinfo(np.int64).max)
        argrow[seg_ids, col] = np.minimum.reduceat(cand, starts)
    return out, argrow


def index_add(out, idx, values):
    """out[idx[i], :] += values[i, :] in row order; idx < 0 rows are skipped."""
    values = np.atleast_2d(values)
    n = out.shape[0]
    out += segment_sum(values, idx, n)
    return out


def max_grad_scatter(grad, argrow, m):
    """Route pooled-max gradients back to their winning rows."""
    n, d = grad.shape
    out = np.zeros((m, d), dtype=np.float64)
    cols = np.broadcast_to(np.arange(d), (n, d))
    ok = argrow >= 0
    np.add.at(out, (argrow[ok], cols[ok]), grad[ok])
    return out
