"""Finite-difference check of the three training losses on a tiny encoder.

    python demos/gradients.py [episodes]
"""
import sys
import time

from fskws.gradcheck import run_gradcheck

n = int(sys.argv[1]) if len(sys.argv) > 1 else 10
t0 = time.time()
worst = run_gradcheck(n_episodes=n, seed=0)
for name, err in worst.items():
    print(f"{name:<10} max relative error {err:.2e}  {'ok' if err < 1e-4 else 'FAIL'}")
print(f"{n} episodes in {time.time() - t0:.1f}s")
