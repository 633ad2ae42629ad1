"""Closed-form pair weights vs brute-force minimization.

For both regularizers the weight update has an exact solution; here we
check it against a dense grid search of w*l + R_gamma(w) over [0, 1].
"""
import numpy as np

from spcl import optimal_weight, regularizer_value

rng = np.random.default_rng(0)
grid = np.linspace(0.0, 1.0, 10001)

print(f"{'regularizer':8s} {'loss':>6s} {'gamma':>6s} {'closed form':>11s} {'grid':>8s}")
for regularizer in ("hard", "linear"):
    for _ in range(5):
        l, g = float(rng.uniform(0, 6)), float(rng.uniform(0.5, 6))
        w_star = optimal_weight(l, g, regularizer)
        obj = grid * l + regularizer_value(grid, g, regularizer)
        w_grid = grid[np.argmin(obj)]
        print(f"{regularizer:8s} {l:6.3f} {g:6.3f} {w_star:11.4f} {w_grid:8.4f}")

# the familiar shapes: hard thresholds, linear ramps
print("\nweight as the loss grows (gamma = 2):")
losses = np.linspace(0, 4, 9)
print("loss  :", " ".join(f"{l:5.2f}" for l in losses))
for regularizer in ("hard", "linear"):
    w = optimal_weight(losses, 2.0, regularizer)
    print(f"{regularizer:6s}:", " ".join(f"{v:5.2f}" for v in w))
