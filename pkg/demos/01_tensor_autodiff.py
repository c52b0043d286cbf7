"""A tour of the tensor engine and its gradient checker.

Builds a few small computations, runs reverse-mode backward over the
recorded tape, and confirms every analytic gradient against central
finite differences.
"""

import numpy as np

from dpdenoise import Tensor, backward, grad_check, gru_sequence, matmul, softmax
from dpdenoise.tensor import GRUParams, Tape

# The classic warm-up: d/dx x^2 at x = 3.
x = Tensor(np.array([3.0]), requires_grad=True)
y = (x * x).sum()
backward(y)
print("d/dx x^2 at 3        ->", x.grad[0])

# The tape behind that computation, in topological order.
print("tape ops             ->", [r.op for r in Tape.trace(y).records])

# A matrix chain with a softmax, checked against finite differences.
rng = np.random.default_rng(0)
a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
b = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
readout = Tensor(rng.normal(size=(4, 5)))

def scalar_chain():
    return (softmax(matmul(a, b), axis=-1) * readout).sum()

err = grad_check(scalar_chain, [a, b])
print(f"softmax-chain error  -> {err:.2e}  (central differences, step 1e-5)")

# Backprop through time: a GRU over 6 steps.
params = GRUParams(
    Tensor(rng.normal(size=(3, 12), scale=0.5), requires_grad=True),
    Tensor(rng.normal(size=(4, 12), scale=0.5), requires_grad=True),
    Tensor(np.zeros(12), requires_grad=True),
)
seq = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
weights = Tensor(rng.normal(size=(6, 4)))

def gru_chain():
    return (gru_sequence(seq, params) * weights).sum()

err = grad_check(gru_chain, [seq, params.w_x, params.w_h, params.b])
print(f"GRU-BPTT error       -> {err:.2e}")

# Gradients accumulate across backward calls.
x = Tensor(np.array([2.0]), requires_grad=True)
loss = (x * x).sum()
backward(loss)
backward(loss)
print("two backward calls   ->", x.grad[0], "(= 2 * d/dx x^2 at 2)")
