"""Time the numba kernels against the numpy fallback.

The backend is fixed at import, so each backend runs in its own child process
(``GPCIRCUITS_DISABLE_NUMBA=1`` selects numpy). Usage:

    python benchmarks/bench_kernels.py [--repeat 20]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit


def _cases():
    import numpy as np

    from gpcircuits.numerics import kernels as K

    rng = np.random.default_rng(0)
    B, T, d, F = 64, 16, 128, 1024
    x = rng.normal(size=(B, T, d))
    g = rng.normal(size=(B, T, d))
    gamma, beta = rng.normal(size=d), rng.normal(size=d)
    s = rng.normal(size=(B, 4, T, T))
    p = K.causal_softmax_forward(s)
    gp = rng.normal(size=p.shape)
    h = rng.normal(size=(B, T, 4 * d))
    gh = rng.normal(size=h.shape)
    w_e = rng.normal(size=(F, d)) / np.sqrt(d)
    b_e = rng.normal(size=F) - 2.0  # mostly inactive codes, as in a trained SAE
    b_d = rng.normal(size=d)
    f = K.sae_encode(x, w_e, b_e, b_d)
    w_d = rng.normal(size=(d, F)) / np.sqrt(F)
    gf = rng.normal(size=(B, T, d))
    return {
        "layernorm_forward": lambda: K.layernorm_forward(x, gamma, beta),
        "layernorm_backward": lambda: K.layernorm_backward(g, x, gamma),
        "causal_softmax_forward": lambda: K.causal_softmax_forward(s),
        "softmax_backward": lambda: K.softmax_backward(gp, p),
        "gelu_forward": lambda: K.gelu_forward(h),
        "gelu_backward": lambda: K.gelu_backward(gh, h),
        "sae_decode": lambda: K.sae_decode(f, w_d, b_d),
        "sae_decode_backward_masked": lambda: K.masked_matmul(gf, w_d, f),
    }, float((f > 0).mean())


def child(repeat: int) -> None:
    from gpcircuits.numerics import kernels as K

    cases, density = _cases()
    out = {"backend": K.backend(), "code_density": density, "seconds": {}}
    for name, fn in cases.items():
        fn()  # compile / warm caches
        out["seconds"][name] = min(timeit.repeat(fn, number=1, repeat=repeat))
    print(json.dumps(out))


def run_backend(disable: bool, repeat: int) -> dict:
    env = dict(os.environ, GPCIRCUITS_DISABLE_NUMBA="1" if disable else "0")
    res = subprocess.run(
        [sys.executable, __file__, "--child", "--repeat", str(repeat)],
        env=env,
        check=True,
        capture_output=True,
        text=True,
    )
    return json.loads(res.stdout.strip().splitlines()[-1])


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.child:
        child(args.repeat)
        return
    nb = run_backend(False, args.repeat)
    npy = run_backend(True, args.repeat)
    if nb["backend"] != "numba":
        print("numba unavailable; only the numpy path was timed")
    print(f"SAE code density {nb['code_density']:.3f}")
    print(f"{'kernel':30s} {'numpy ms':>10s} {nb['backend'] + ' ms':>10s} {'speedup':>8s}")
    for name in npy["seconds"]:
        a, b = npy["seconds"][name] * 1e3, nb["seconds"][name] * 1e3
        print(f"{name:30s} {a:10.3f} {b:10.3f} {a / b:8.2f}")


if __name__ == "__main__":
    main()
