"""
Trusting the gradients
======================

The networks run on a small reverse-mode autodiff engine. This script
compares its gradients to central differences and shows the
straight-through estimator on a two-code toy problem.
"""

# %%
import numpy as np

from zsunits import grad as G
from zsunits import vq
from zsunits.diagnostics import gradcheck_suite

for name, report in gradcheck_suite(seed=0).items():
    print(f"{name:26s} max rel err {report.max_error:.2e}  {'ok' if report.passed else 'FAIL'}")

# %%
# Two encoder frames, two codes. Quantization snaps frame 0 to code 0 and
# frame 1 to code 1; the decoder input copies its gradient to the encoder.
z = G.tensor([[0.9, 0.2], [-0.1, 1.2]], requires_grad=True)
book = G.tensor(np.eye(2), requires_grad=True)
codes, _ = vq.quantize(z.data, book.data)
e = G.take_rows(book, codes.indices)
decoder_in = z + G.stop_gradient(e - z)
target = np.array([[[0.3, 0.1], [0.2, -0.4]]])
total, recon, codebook_term, commitment = vq.vq_loss(target, decoder_in.reshape(1, 2, 2), z, e, gamma=0.25)
total.backward()
print("codes:", codes.indices)
print("encoder gradient:\n", z.grad)
print("codebook gradient (all of it from the codebook term):\n", book.grad)
