"""
Reverse-mode gradients and optimizers
=====================================

A two-layer ReLU network written directly against the tensor engine,
checked against central differences, then fitted with Adam on a cosine
schedule.
"""
import numpy as np

from progdistill import engine as E
from progdistill.engine import Tensor

rng = np.random.default_rng(0)
W1 = Tensor(rng.normal(0, 0.5, (16, 3)), requires_grad=True)
b1 = Tensor(np.zeros(16), requires_grad=True)
W2 = Tensor(rng.normal(0, 0.5, (1, 16)), requires_grad=True)
params = [W1, b1, W2]

x = rng.normal(size=(64, 3))
y = np.sin(x[:, 0]) + 0.5 * x[:, 1] * x[:, 2]


def loss():
    h = E.relu(E.matmul(Tensor(x), W1.T) + b1)
    pred = E.matmul(h, W2.T).reshape(-1)
    err = pred - y
    return (err * err).mean()


# %%
# One entry of the analytic gradient against a finite difference
E.zero_grad(params)
E.backward(loss())
i, j, h = 2, 1, 1e-5
W1.data[i, j] += h
up = loss().item()
W1.data[i, j] -= 2 * h
down = loss().item()
W1.data[i, j] += h
print("analytic", W1.grad[i, j], "numeric", (up - down) / (2 * h))

# %%
# Adam with warmup and cosine decay
opt = E.Adam(params)
steps = 600
for t in range(steps):
    E.zero_grad(params)
    value = loss()
    E.backward(value)
    opt.step(E.cosine_lr(t, steps, peak=0.02, floor=0.001, warmup=50))
    if t % 150 == 0:
        print(f"step {t:4d}  mse {value.item():.4f}")
print(f"final mse {loss().item():.4f}")
