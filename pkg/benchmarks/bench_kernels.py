"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 20]

Both backends are checked for agreement before timing. The numba row
excludes JIT compilation (one warm-up call per case).
"""
import argparse
import time

import numpy as np

from ppgvit import _accel, kernels
from ppgvit.imagify import make_image
from ppgvit.model import VitRegressor
from ppgvit.tensorize import get_profile, image_to_patches


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    v240, v1200 = rng.standard_normal(240), rng.standard_normal(1200)
    x = rng.standard_normal(1200)
    win = np.hanning(128)
    att = rng.standard_normal((32, 4, 20, 20))
    att_mask = np.ones((32, 1, 1, 20), bool)
    att_mask[::2, ..., -3:] = False
    pool = rng.standard_normal((32, 15))
    pool_mask = rng.random((32, 15)) > 0.2
    pool_mask[:, 0] = True
    sig = rng.standard_normal(1200)

    prof = get_profile("dinov3_like", "tiny")
    model = VitRegressor(prof, "hr", seed=0)
    ps = image_to_patches(make_image(sig, "stft"), prof)
    U = np.repeat(ps.patches[None], 32, axis=0)
    M = np.repeat(ps.patch_mask[None], 32, axis=0)

    def train_step():
        y, cache = model.forward(U, M, ps.grid[:2])
        model.backward(np.sign(y), cache)

    return [
        ("recurrence K=240", lambda: kernels.gaussian_recurrence(v240, 1.0)),
        ("recurrence K=1200", lambda: kernels.gaussian_recurrence(v1200, 1.0)),
        ("frame 1200 / 128 / 32", lambda: kernels.frame_signal(x, win, 32)),
        ("softmax attn 32x4x20x20", lambda: kernels.masked_softmax(att, att_mask)),
        ("softmax pool 32x15", lambda: kernels.masked_softmax(pool, pool_mask)),
        ("imagify recurrence", lambda: make_image(sig, "recurrence")),
        ("imagify stft", lambda: make_image(sig, "stft")),
        ("train step tiny B=32", train_step),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    prev = _accel.backend()
    rng = np.random.default_rng(0)
    rows = []
    for name, fn in cases(rng):
        out = {}
        times = {}
        for b in ("numpy", "numba"):
            _accel.set_backend(b)
            out[b] = fn()
            times[b] = best_of(fn, args.repeat)
        a, b = (np.asarray(getattr(o, "channels", o)) for o in (out["numpy"], out["numba"]))
        if out["numpy"] is not None and not np.array_equal(a, b):
            diff = np.max(np.abs(a - b))
            name += f" (max diff {diff:.1e})"
        rows.append((name, times["numpy"], times["numba"]))
    _accel.set_backend(prev)
    width = max(len(r[0]) for r in rows)
    print(f"{'case':<{width}} | {'numpy ms':>9} | {'numba ms':>9} | speedup")
    print("-" * (width + 36))
    for name, t_np, t_nb in rows:
        print(f"{name:<{width}} | {t_np * 1e3:9.3f} | {t_nb * 1e3:9.3f} | {t_np / t_nb:6.2f}x")


if __name__ == "__main__":
    main()
