"""Tabulate the contraction factor A_k and noise accumulator B_k.

For alpha_k = beta/(k+sigma), A_k decays like k^(-beta*l) and
(k+1+sigma)*B_k tends to beta^2/(beta*l - 1). A fixed step instead leaves
B_k at alpha/l, which is why constant stepsizes plateau.

    python3 demos/bounds_table.py
"""

import numpy as np

from gradfree.analysis import BoundParams, B_limit_constant, bound_A, bound_B, fixed_step_B, fixed_step_B_limit

beta, sigma, l = 2.0, 59.0, 1.0
print(f"Robbins-Monro beta={beta} sigma={sigma} l={l}; (k+1+sigma) B_k -> {B_limit_constant(BoundParams(beta, sigma, l)):g}")
print(f"{'k':>9}  {'A_k':>12}  {'A_k k^2':>10}  {'B_k':>12}  {'(k+1+sigma) B_k':>16}")
for k in np.logspace(0, 6, 7).astype(int):
    p = BoundParams(beta, sigma, l, int(k))
    A, B = bound_A(p), bound_B(p)
    print(f"{k:>9}  {A:>12.4e}  {A * k**2:>10.4f}  {B:>12.4e}  {(k + 1 + sigma) * B:>16.4f}")

alpha = 0.1
print(f"\nfixed alpha={alpha}: B_k -> alpha/l = {fixed_step_B_limit(alpha, l):g}")
for k in (1, 10, 100, 1000):
    print(f"{k:>9}  {fixed_step_B(alpha, l, k):.6f}")
