"""Time the numba and numpy kernels on the default model's layer shapes.

    python3 benchmarks/bench_kernels.py [--repeats N] [--batch B] [--channels C]

Also times one full ELBO training step per backend. Both backends must
agree to 1e-12 on every kernel or the script exits non-zero.
"""
import argparse
import statistics
import sys
import time

import numpy as np

from scadavae import kernels, training, vae


def timeit(fn, repeats):
    fn()  # warm-up, includes JIT compilation for numba
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cases(batch, channels, window):
    rng = np.random.default_rng(0)
    c_in, T = channels, window
    for k, n in vae.VaeConfig().conv_specs:
        x = rng.standard_normal((batch, c_in, T))
        w = rng.standard_normal((n, c_in, k))
        b = np.zeros(n)
        gy = rng.standard_normal((batch, n, T))
        yield f"conv fwd {x.shape}->{n}", lambda x=x, w=w, b=b: kernels.conv1d_forward(x, w, b)
        yield f"conv bwd {x.shape}->{n}", lambda x=x, w=w, gy=gy: kernels.conv1d_backward(x, w, gy)
        p = rng.standard_normal((batch, n, T))
        yield f"pool fwd {p.shape}", lambda p=p: kernels.maxpool1d_forward(p, 2)
        _, idx = kernels.maxpool1d_forward(p, 2)
        g = rng.standard_normal((batch, n, T // 2))
        yield f"pool bwd {p.shape}", lambda g=g, idx=idx: kernels.maxpool1d_backward(g, idx, 2)
        c_in, T = n, T // 2


def train_step(batch, channels, window):
    model = vae.VaeModel(vae.VaeConfig(channels=channels, window_hours=window))
    x = np.random.default_rng(1).standard_normal((batch, channels, window))
    cfg = training.TrainConfig(epochs=1, batch_size=batch)
    return lambda: training.fit(model, x, config=cfg, seed=0)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--channels", type=int, default=12)
    ap.add_argument("--window", type=int, default=24)
    args = ap.parse_args(argv)

    rows, ok = [], True
    shape = (args.batch, args.channels, args.window)
    for name, _ in cases(*shape):
        res = {}
        for backend in ("numpy", "numba"):
            kernels.set_backend(backend)
            fn = dict(cases(*shape))[name]
            res[backend] = (timeit(fn, args.repeats), fn())
        a, b = res["numpy"][1], res["numba"][1]
        a, b = (a if isinstance(a, tuple) else (a,)), (b if isinstance(b, tuple) else (b,))
        ok &= all(np.allclose(u, v, rtol=0, atol=1e-12) for u, v in zip(a, b))
        rows.append((name, res["numpy"][0], res["numba"][0]))
    for backend in ("numpy", "numba"):
        kernels.set_backend(backend)
        res[backend] = timeit(train_step(*shape), max(args.repeats // 5, 2))
    rows.append((f"train step batch {args.batch}", res["numpy"], res["numba"]))

    print(f"{'kernel':40s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, t_np, t_nb in rows:
        print(f"{name:40s} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:8.2f}")
    if not ok:
        print("backends disagree beyond 1e-12", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
