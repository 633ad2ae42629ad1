"""Pace schedule and the weights it admits on a frozen model.

gamma runs from its lower bound to its upper bound as (epoch/max)^p; small p
raises the pace early, so more pairs get weight sooner.
"""
from spcl.config import ExperimentConfig
from spcl.pace_report import pace_report

rows = pace_report(ExperimentConfig(), max_epoch=10)
print("linear regularizer, mean pair weight by epoch:")
print("epoch:", " ".join(f"{e:5d}" for e in range(11)))
for p in (0.5, 1.0, 2.0):
    w = [r.mean_w for r in rows if r.regularizer == "linear" and r.p == p]
    print(f"p={p:3.1f}:", " ".join(f"{v:5.2f}" for v in w))
print("\ngamma curve for p=1/2:")
g = [r.gamma for r in rows if r.regularizer == "linear" and r.p == 0.5]
print("      ", " ".join(f"{v:5.1f}" for v in g))
