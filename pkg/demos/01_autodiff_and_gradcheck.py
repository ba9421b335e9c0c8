"""
Reverse-mode autodiff on numpy arrays
=====================================

Build a tiny two-layer network from tensor ops, backpropagate, and compare
every gradient with central finite differences.
"""

import numpy as np

from dualssl import tensor as T
from dualssl.gradcheck import OP_CASES, check_op, op_gradient_error
from dualssl.rng import CounterRNG

rng = CounterRNG(0)
x = T.Tensor(rng.normal((5, 4)))
w1 = T.Tensor(rng.normal((4, 8)) * 0.5, requires_grad=True)
w2 = T.Tensor(rng.normal((8, 3)) * 0.5, requires_grad=True)

# forward: gelu MLP followed by a log-softmax
logp = T.log_softmax(T.gelu(x @ w1) @ w2, axis=-1)
loss = -logp[:, 0].mean()
loss.backward()
print("loss", loss.item())
print("|dL/dw1|", np.linalg.norm(w1.grad), " |dL/dw2|", np.linalg.norm(w2.grad))

# the same network as a function, checked against finite differences
def mlp(a, b, c):
    return T.log_softmax(T.gelu(a @ b) @ c, axis=-1)

print("mlp relative error", check_op(mlp, [x.data, w1.data, w2.data]))

# every registered op, 20 random trials each
for name in sorted(OP_CASES):
    print(f"{name:>18s}  {op_gradient_error(name, trials=20):.2e}")
