"""The finite-difference oracle over the package's differentiable losses."""
import numpy as np

from spcl import Tensor, finite_diff_check
from spcl.verify import check_gradients

rng = np.random.default_rng(0)
w = Tensor(rng.standard_normal((4, 3)), requires_grad=True, name="w")
x = Tensor(rng.standard_normal((5, 4)))

report = finite_diff_check(lambda q: ((x @ q).exp() + 1.0).log().mean(), [w])
print("toy composite:", report)

family = check_gradients(configs=3)
print("loss suite   :", "PASS" if family.passed else "FAIL", "-", family.detail)
