"""Hot inner loops with a numba path and a pure-numpy path.

Every public kernel dispatches on :func:`ppgvit._accel.use_numba`. Both paths
implement the same arithmetic in the same order where it matters (recurrence
symmetry, exact unit diagonal, exact zeros on masked positions); summation
order may differ, so cross-path agreement is to a few ulps, not bitwise.
"""
import numpy as np

from ._accel import njit, use_numba


# -- Gaussian-soft recurrence -------------------------------------------------

@njit
def _gaussian_recurrence_nb(v, sigma):
    n = v.shape[0]
    out = np.empty((n, n))
    denom = 2.0 * sigma * sigma
    for i in range(n):
        out[i, i] = 1.0
        for j in range(i + 1, n):
            d = v[i] - v[j]
            r = np.exp(-(d * d) / denom)
            out[i, j] = r
            out[j, i] = r
    return out


def _gaussian_recurrence_np(v, sigma):
    d = v[:, None] - v[None, :]
    out = np.exp(-(d * d) / (2.0 * sigma * sigma))
    # exp(-0.0) is already 1.0, but keep the guarantee explicit and cheap
    np.fill_diagonal(out, 1.0)
    return out


def gaussian_recurrence(v, sigma):
    """Return ``exp(-(v[i]-v[j])**2 / (2 sigma**2))`` as an ``n x n`` array."""
    v = np.ascontiguousarray(v, dtype=np.float64)
    if use_numba():
        return _gaussian_recurrence_nb(v, float(sigma))
    return _gaussian_recurrence_np(v, float(sigma))


# -- STFT framing -------------------------------------------------------------

@njit
def _frame_signal_nb(x, window, hop, n_frames):
    n_w = window.shape[0]
    out = np.empty((n_frames, n_w))
    for t in range(n_frames):
        base = t * hop
        for m in range(n_w):
            out[t, m] = x[base + m] * window[m]
    return out


def _frame_signal_np(x, window, hop, n_frames):
    n_w = window.shape[0]
    idx = hop * np.arange(n_frames)[:, None] + np.arange(n_w)[None, :]
    return x[idx] * window[None, :]


def frame_signal(x, window, hop):
    """Slice ``x`` into windowed frames ``x[tH + m] * w[m]``, shape ``(T, N_w)``.

    ``T = (len(x) - N_w) // hop + 1``; the caller guarantees ``len(x) >= N_w``.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    window = np.ascontiguousarray(window, dtype=np.float64)
    n_frames = (x.shape[0] - window.shape[0]) // hop + 1
    if use_numba():
        return _frame_signal_nb(x, window, int(hop), n_frames)
    return _frame_signal_np(x, window, hop, n_frames)


# -- masked softmax -----------------------------------------------------------

@njit
def _masked_softmax_nb(scores, mask):
    rows, cols = scores.shape
    out = np.zeros((rows, cols))
    for r in range(rows):
        mx = -np.inf
        for c in range(cols):
            if mask[r, c] and scores[r, c] > mx:
                mx = scores[r, c]
        if mx == -np.inf:
            continue
        total = 0.0
        for c in range(cols):
            if mask[r, c]:
                e = np.exp(scores[r, c] - mx)
                out[r, c] = e
                total += e
        for c in range(cols):
            out[r, c] /= total
    return out


def _masked_softmax_np(scores, mask):
    masked = np.where(mask, scores, -np.inf)
    mx = masked.max(axis=1, keepdims=True)
    empty = ~np.isfinite(mx)
    mx = np.where(empty, 0.0, mx)
    e = np.where(mask, np.exp(masked - mx), 0.0)
    total = e.sum(axis=1, keepdims=True)
    total = np.where(total == 0.0, 1.0, total)
    return e / total


def masked_softmax(scores, mask):
    """Softmax over the last axis restricted to ``mask`` (True = valid).

    Masked entries come out exactly 0. A row with no valid entry comes out all
    zeros; callers that cannot accept that must check for it.
    """
    scores = np.asarray(scores, dtype=np.float64)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
    shape = scores.shape
    s2 = np.ascontiguousarray(scores.reshape(-1, shape[-1]))
    m2 = np.ascontiguousarray(mask.reshape(-1, shape[-1]))
    if use_numba():
        out = _masked_softmax_nb(s2, m2)
    else:
        out = _masked_softmax_np(s2, m2)
    return out.reshape(shape)
