"""Prior number of mixture components under a DP with concentration alpha.

Prints the exact distribution of the number of occupied components for a
few data sizes, the exact and logarithmic mean, and a CRP simulation check.
"""

import numpy as np

from nhnn import dpgmm as dp

for alpha in (0.1, 1.0, 10.0):
    for n in (5, 10, 25):
        p = dp.component_count_pmf(n, alpha)
        exact, approx = dp.expected_components(n, alpha)
        mode = int(np.argmax(p)) + 1
        print(f"alpha={alpha:<5} n={n:<3} E[k]={exact:7.3f}  approx={approx:7.3f}  mode={mode}")

n, alpha = 8, 1.0
sim = dp.crp_simulate(n, alpha, 100_000, seed=0)
pmf = dp.component_count_pmf(n, alpha)
print("\nk  exact    CRP simulation")
for k, (a, b) in enumerate(zip(pmf, sim), start=1):
    print(f"{k}  {a:.5f}  {b:.5f}")
print(f"total variation {0.5 * np.abs(pmf - sim).sum():.4f}")
print(f"E[k] for n=100, alpha=1: {dp.expected_components(100, 1.0)[0]:.4f} "
      f"(log approximation {dp.expected_components(100, 1.0)[1]:.4f})")
