"""
Convolutional sparse coding with the LCA
========================================

Encode a few MFCC-sized maps with a random unit-norm dictionary, watch the
energy fall as the dynamics settle, then trade reconstruction for sparsity by
raising the threshold. Finally, a few unsupervised dictionary steps.
"""

import numpy as np

from lcanetpp import lca
from lcanetpp.lca import Dictionary, LcaConfig

rng = np.random.default_rng(0)
x = rng.standard_normal((2, 1, 20, 98)).astype(np.float32)
d = Dictionary.random(16, 1, 5, rng)  # 16 features, 5x5, padded to keep 20x98
print("dictionary", d.phi.shape, "norms", np.round(d.norms()[:4], 6), "...")

# Energy along the trajectory: each extra iteration should only lower it.
for n_iter in (1, 5, 20, 80, 150):
    code = lca.lca_encode(x, d, LcaConfig(lam=0.5, n_iter=n_iter)).value
    e = lca.reconstruction_loss(x, code, d, 0.5)
    print(f"n_iter={n_iter:4d}  energy={e:10.1f}  active={np.mean(code > 0):.3f}")

# Larger lambda -> sparser codes and worse reconstructions.
for lam in (0.1, 0.5, 1.0, 2.0):
    code = lca.lca_encode(x, d, LcaConfig(lam=lam, n_iter=150)).value
    resid = x - lca.reconstruct(code, d, x.shape[2:])
    print(f"lambda={lam:3.1f}  active={np.mean(code > 0):.3f}  "
          f"relative residual={np.linalg.norm(resid) / np.linalg.norm(x):.3f}")

# Dictionary learning on structured data: maps built from 3 hidden atoms.
atoms = rng.standard_normal((3, 1, 5, 5))
spikes = (rng.random((8, 3, 20, 98)) < 0.01) * rng.uniform(1, 3, (8, 3, 20, 98))
data = np.stack([sum(np.real(np.fft.ifft2(np.fft.fft2(spikes[i, k], (20, 98))
                                          * np.fft.fft2(atoms[k, 0], (20, 98))))
                     for k in range(3))[None] for i in range(8)]).astype(np.float32)
cfg = LcaConfig(lam=0.2, n_iter=60)
d = Dictionary.random(8, 1, 5, rng)
for step in range(21):
    code = lca.lca_encode(data, d, cfg).value
    if step % 5 == 0:
        print(f"dict step {step:2d}  energy/sample={lca.reconstruction_loss(data, code, d, 0.2) / 8:.2f}")
    d = lca.dict_update(d, data, code, lr_dict=0.005, rng=rng)
print("norms stay at one:", np.allclose(d.norms(), 1.0, atol=1e-5))
