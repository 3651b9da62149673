"""
Reverse-mode autodiff on the float64 tensor core
================================================

Every gradient in this package flows through a small tape: ops record a
closure that maps the output gradient back onto their inputs, and backward()
walks the tape in reverse. This script builds a few expressions by hand and
checks the machinery against central finite differences.
"""

import numpy as np

from memseg import tensor as T
from memseg.tensor import Tensor

rng = np.random.default_rng(0)

# A scalar expression: f(x) = sum(relu(x @ w + b) ** 2).
x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
b = Tensor(np.zeros(2), requires_grad=True)

tape = T.GradTape()
with T.use_tape(tape):
    h = T.relu(T.add(T.matmul(x, w), b))
    f = T.mul(h, h).sum()
    T.backward(f, tape)

print("f value:", f.item())
print("df/dw:")
print(w.grad)

# The analytic gradient for this f is 2 * x^T (relu'(xw+b) * relu(xw+b)):
mask = (x.data @ w.data + b.data) > 0
manual = 2.0 * x.data.T @ (mask * np.maximum(x.data @ w.data + b.data, 0.0))
print("max |tape - manual|:", np.abs(w.grad - manual).max())

# finite_diff_check perturbs every entry of the probe tensor with a central
# difference and reports the worst relative error of the tape gradient.
# 1e-7-ish is typical for float64 at h=1e-5; the test suite enforces <= 1e-4.
def loss_fn(xs):
    h = T.relu(T.add(T.matmul(xs, w), b))
    return T.mul(h, h).sum()

err = T.finite_diff_check(loss_fn, x)
print("finite-difference max relative error:", err)

# no_grad() turns recording off: nothing is taped, so backward has nothing
# to do and data flows through at plain numpy speed.
with T.no_grad():
    silent = T.matmul(x, w)
print("recorded under no_grad:", silent.requires_grad)

# Gradients accumulate across backward calls until zeroed, which is what a
# batch loop relies on: run two backwards of the same scalar and the stored
# gradient doubles.
x.grad = None
tape = T.GradTape()
with T.use_tape(tape):
    g = T.mul(x, x).sum()
    T.backward(g, tape)
    first = x.grad.copy()
    T.backward(g, tape)
print("second backward doubled the gradient:",
      bool(np.allclose(x.grad, 2.0 * first)))
