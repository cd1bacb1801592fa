import math

import mpmath
import numpy as np
import pytest

from ppgvit import kernels
from ppgvit.errors import EmptyPoolError, NumericError
from ppgvit.pool_head import (
    attention_pool,
    head_backward,
    head_forward,
    init_head,
    pool_backward,
    pool_tokens,
    regress,
)

from gradcheck import check

D = 8


def head_params(rng, hidden=6, target="hr"):
    p = init_head(D, hidden, target, rng)
    p[f"head/{target}/ln/g"][...] = rng.uniform(0.5, 1.5, D)
    p[f"head/{target}/ln/b"][...] = rng.standard_normal(D) * 0.1
    p[f"head/{target}/fc1/b"][...] = rng.standard_normal(hidden) * 0.1
    p[f"head/{target}/fc2/b"][...] = 0.3
    return p


def test_uniform_weights_give_mean(rng):
    F = rng.standard_normal((D, 5, 3))
    p, alpha = attention_pool(F, np.ones((5, 3), bool), {"pool/w_s": np.zeros(D)}, return_weights=True)
    np.testing.assert_allclose(alpha, 1 / 15, rtol=1e-15)
    np.testing.assert_allclose(p, F.reshape(D, -1).mean(axis=1), rtol=1e-13)


def test_single_valid_position_exact(rng, backend):
    F = rng.standard_normal((D, 5, 3))
    M = np.zeros((5, 3), bool)
    M[3, 1] = True
    p = attention_pool(F, M, {"pool/w_s": rng.standard_normal(D)})
    assert p.tobytes() == np.ascontiguousarray(F[:, 3, 1]).tobytes()


def _mp_pool(F, M, w):
    """Pooling recomputed with 50-digit arithmetic."""
    mpmath.mp.dps = 50
    Dd, H, W = F.shape
    pos = [(h, w_) for h in range(H) for w_ in range(W) if M[h, w_]]
    s = {q: mpmath.fsum(mpmath.mpf(w[d]) * mpmath.mpf(F[d, q[0], q[1]]) for d in range(Dd)) for q in pos}
    mx = max(s.values())
    e = {q: mpmath.exp(s[q] - mx) for q in pos}
    Z = mpmath.fsum(e.values())
    alpha = {q: e[q] / Z for q in pos}
    p = [mpmath.fsum(alpha[q] * mpmath.mpf(F[d, q[0], q[1]]) for q in pos) for d in range(Dd)]
    return np.array([float(v) for v in p]), alpha


def test_random_pool_against_high_precision(rng, backend):
    for _ in range(5):
        F = rng.standard_normal((D, 4, 3)) * 3
        M = rng.random((4, 3)) > 0.4
        M[0, 0] = True
        w = rng.standard_normal(D)
        p, alpha = attention_pool(F, M, {"pool/w_s": w}, return_weights=True)
        ref_p, ref_alpha = _mp_pool(F, M, w)
        assert abs(alpha.sum() - 1) < 1e-9
        assert np.all(alpha.reshape(4, 3)[~M] == 0)
        np.testing.assert_allclose(p, ref_p, atol=1e-12)
        valid = F[:, M]
        assert np.all(p >= valid.min(axis=1) - 1e-12) and np.all(p <= valid.max(axis=1) + 1e-12)


def test_pool_ignores_invalid_features(rng):
    F = rng.standard_normal((D, 5, 3))
    M = np.ones((5, 3), bool)
    M[4] = False
    w = {"pool/w_s": rng.standard_normal(D)}
    G = F.copy()
    G[:, 4] = 1e6 * rng.standard_normal((D, 3))
    assert attention_pool(F, M, w).tobytes() == attention_pool(G, M, w).tobytes()


def test_softmax_shift_invariance(rng, backend):
    s = rng.standard_normal((3, 15))
    m = rng.random((3, 15)) > 0.3
    m[:, 0] = True
    np.testing.assert_allclose(kernels.masked_softmax(s + 123.4, m), kernels.masked_softmax(s, m), atol=1e-9)


def test_argmax_preserved_under_positive_scaling(rng):
    F = rng.standard_normal((D, 5, 3))
    M = np.ones((5, 3), bool)
    w = {"pool/w_s": rng.standard_normal(D)}
    _, a1 = attention_pool(F, M, w, return_weights=True)
    _, a2 = attention_pool(2.5 * F, M, w, return_weights=True)
    assert np.argmax(a1) == np.argmax(a2)


def test_empty_pool_raises():
    with pytest.raises(EmptyPoolError):
        attention_pool(np.ones((D, 2, 2)), np.zeros((2, 2), bool), {"pool/w_s": np.zeros(D)})


def test_batched_pool_matches_single(rng):
    F = rng.standard_normal((4, D, 3, 3))
    M = rng.random((4, 3, 3)) > 0.3
    M[:, 0, 0] = True
    w = {"pool/w_s": rng.standard_normal(D)}
    batched = attention_pool(F, M, w)
    for b in range(4):
        np.testing.assert_allclose(batched[b], attention_pool(F[b], M[b], w), rtol=1e-14)


# -- head ---------------------------------------------------------------------

def test_head_constant_output(rng):
    p = head_params(rng)
    p["head/hr/fc1/W"][...] = 0
    p["head/hr/fc1/b"][...] = 0
    p["head/hr/fc2/b"][...] = 4.2
    assert regress(rng.standard_normal(D), p, "hr") == 4.2


def test_head_zero_output_weights(rng):
    p = head_params(rng)
    p["head/hr/fc2/w"][...] = 0
    assert regress(rng.standard_normal(D) * 50, p, "hr") == 0.3


def _naive_head(p, params, target="hr"):
    pre = f"head/{target}/"
    mu = math.fsum(p) / len(p)
    var = math.fsum((x - mu) ** 2 for x in p) / len(p)
    ln = [(x - mu) / math.sqrt(var + 1e-6) * g + b
          for x, g, b in zip(p, params[pre + "ln/g"], params[pre + "ln/b"])]
    W1, b1 = params[pre + "fc1/W"], params[pre + "fc1/b"]
    out = []
    for j in range(W1.shape[1]):
        a = math.fsum(ln[i] * W1[i, j] for i in range(len(ln))) + b1[j]
        out.append(0.5 * a * (1 + math.erf(a / math.sqrt(2))))
    return math.fsum(o * w for o, w in zip(out, params[pre + "fc2/w"])) + float(params[pre + "fc2/b"])


def test_head_against_naive(rng):
    for _ in range(10):
        params = head_params(rng)
        p = rng.standard_normal(D) * 2
        assert abs(regress(p, params, "hr") - _naive_head(p, params)) < 1e-10


def test_head_nonfinite_names_layer(rng):
    params = head_params(rng)
    params["head/hr/fc1/W"][0, 0] = np.inf
    with pytest.raises(NumericError, match="fc1"):
        regress(rng.standard_normal(D), params, "hr")


def test_pool_head_gradients(rng):
    params = head_params(rng)
    params["pool/w_s"] = rng.standard_normal(D)
    feats = rng.standard_normal((4, 6, D))
    mask = rng.random((4, 6)) > 0.3
    mask[:, 0] = True
    t = rng.standard_normal(4)
    arrays = dict(params, feats=feats)

    def loss():
        p, _ = pool_tokens(feats, mask, params["pool/w_s"])
        y, _ = head_forward(p, params, "hr")
        return float(np.mean(np.abs(y - t)))

    p, alpha = pool_tokens(feats, mask, params["pool/w_s"])
    y, hc = head_forward(p, params, "hr")
    dp, grads = head_backward(np.sign(y - t) / 4, hc, params, "hr")
    grads["feats"], grads["pool/w_s"] = pool_backward(dp, feats, alpha, params["pool/w_s"])
    assert np.all(grads["feats"][~mask] == 0)
    worst, where = check(loss, arrays, grads, list(arrays), rng, per_array=20)
    assert worst < 1e-4, where
