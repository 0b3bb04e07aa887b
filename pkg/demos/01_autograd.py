"""Reverse-mode gradients on numpy arrays, and how to check them."""

import numpy as np

from csranet.tensor import Tensor, backward, batchnorm2d, conv2d, grad_check, relu

# %% a tiny graph: L = sum(relu(x) * w)
x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
w = Tensor(np.array([0.5, 0.5, -1.0]), requires_grad=True)
loss = (relu(x) * w).sum()
grads = backward(loss, [x, w])
print("loss", loss.item())
print("dL/dx", grads[x])  # zero where relu is off
print("dL/dw", grads[w])

# %% convolution gradients against central differences
rng = np.random.default_rng(0)
image = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
kernel = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
target = rng.normal(size=(1, 3, 3, 3))

report = grad_check(lambda: (conv2d(image, kernel, stride=2, padding=1) * target).sum(), [image, kernel], n_samples=30)
print(report.summary())

# %% batch norm in training mode normalises each channel over the batch
batch = Tensor(rng.normal(3.0, 2.0, size=(4, 2, 3, 3)))
gamma, beta = Tensor(np.ones(2)), Tensor(np.zeros(2))
running_mean, running_var = np.zeros(2), np.ones(2)
out = batchnorm2d(batch, gamma, beta, running_mean, running_var, training=True)
print("per-channel mean", out.data.mean(axis=(0, 2, 3)).round(12))
print("per-channel var ", out.data.var(axis=(0, 2, 3)).round(4))
print("running mean after one step", running_mean)
