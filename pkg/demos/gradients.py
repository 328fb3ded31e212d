"""The autodiff engine in a few lines, and how the gradient checks work.

    python demos/gradients.py
"""

import numpy as np

from cstn import tensor as T
from cstn.gradcheck import check, check_network

# a tiny expression: y = sum(gelu(x @ w) * x @ w)
rng = np.random.default_rng(0)
x = T.Tensor(rng.standard_normal((3, 4)).astype(np.float32))
w = T.Tensor(rng.standard_normal((4, 4)).astype(np.float32), requires_grad=True)
h = T.matmul(x, w)
y = T.tsum(T.gelu(h) * h)
T.backward(y, [w])
print("dy/dw row 0:", np.round(w.grad[0], 4))

# same gradient against central differences (float64 reference)
r = check("gelu_quadratic", lambda x, w: T.gelu(T.matmul(x, w)) * T.matmul(x, w),
          [x.data.astype(np.float64), w.data.astype(np.float64)])
print(r.line())

# the whole network at toy size: 32x32, embed 16, two residual Swin blocks
print(check_network(seed=0, entries_per_tensor=2).line())
