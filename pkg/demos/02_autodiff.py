#!/usr/bin/env python3
"""Tour of the reverse-mode tensor engine that powers the whole model."""

import numpy as np

from mwpgen.autodiff import (
    Tape,
    Tensor,
    grad_check,
    matmul,
    numeric_gradient,
    reduce_sum,
    sigmoid,
    softmax,
    tanh,
)

# tensors wrap float64 arrays; requires_grad opts them into the tape
W = Tensor(np.array([[0.5, -1.0], [2.0, 0.3]]), requires_grad=True, name="W")
x = Tensor(np.array([[1.0, -2.0]]))

# ops compose like numpy expressions; the tape records the graph
with Tape() as tape:
    h = tanh(matmul(x, W))
    y = reduce_sum(h * h)
tape.backward(y)
print("analytic dy/dW:\n", W.grad)

# central finite differences agree to ~1e-9
def f(t):
    h = tanh(matmul(x, t))
    return reduce_sum(h * h)

numeric = numeric_gradient(f, W)
print("numeric  dy/dW:\n", numeric)
print("max abs gap:", np.abs(W.grad - numeric).max())

# grad_check bundles the comparison into one relative-error number
err = grad_check(lambda t: reduce_sum(sigmoid(t) * tanh(t)),
                 Tensor(np.linspace(-2, 2, 8).reshape(2, 4)))
print("grad_check rel err:", err)

# softmax rows sum to one and stay stable for large inputs
s = softmax(Tensor(np.array([[1000.0, 1001.0, 999.0]])))
print("softmax of huge logits:", s.data.round(4), "sum:", s.data.sum())
