"""A tour of the tensor engine: build a small graph, backprop, check against finite differences."""
import numpy as np

from vdpp import tensor as tn
from vdpp.tensor import Tensor

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(4, 3)))
w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)

# a tiny two-layer expression
h = tn.tanh(tn.matmul(x, w))
loss = tn.sum_(tn.softmax_lastdim(tn.mul(h, 2.0)) * h)
tn.backward(loss)
print("loss", loss.item())
print("dL/dw\n", w.grad)

# the tape replays every node once, newest first
print("nodes on the tape:", len(tn.GradTape(loss)))

err = tn.grad_check(lambda t: tn.sum_(tn.gelu(tn.matmul(x, t))), w)
print(f"max relative error vs central differences: {err:.2e}")
