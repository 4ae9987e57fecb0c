"""
Exact and sparse GP regression
==============================

The completion step regresses latent codes on neighbour features with one RBF
GP per coordinate.  Small problems use the exact posterior; large ones use
inducing points and a collapsed variational bound.
"""
import time

import numpy as np

from lccvae.gp import gp_fit_exact, gp_fit_sparse, gp_predict, log_marginal_likelihood, sparse_elbo

rng = np.random.default_rng(0)
X = rng.uniform(-3, 3, (1500, 2))
f = lambda A: np.sin(A[:, 0]) * np.cos(0.5 * A[:, 1])
t = f(X) + 0.1 * rng.standard_normal(len(X))
Xs = rng.uniform(-3, 3, (500, 2))

t0 = time.perf_counter()
exact = gp_fit_exact(X, t, steps=50)
m_e, v_e = gp_predict(exact, Xs)
print(f"exact   rmse {np.sqrt(np.mean((m_e - f(Xs)) ** 2)):.4f}  ({time.perf_counter() - t0:.1f}s)")

for m in (8, 32, 128):
    t0 = time.perf_counter()
    sp = gp_fit_sparse(X, t, m, seed=0, steps=100)
    m_s, v_s = gp_predict(sp, Xs)
    print(f"sparse m={m:3d} rmse {np.sqrt(np.mean((m_s - f(Xs)) ** 2)):.4f}  ({time.perf_counter() - t0:.1f}s)")

# The bound never exceeds the exact evidence; the gap is the trace term plus
# the low-rank error, and it shrinks as inducing points are added.
theta = exact.params.log_params
lml = log_marginal_likelihood(X[:300], t[:300], theta)[0]
for m in (5, 20, 80, 300):
    bound, trace, _, _ = sparse_elbo(X[:300], t[:300], X[:m], theta, with_grad=False)
    print(f"m={m:3d}  bound {bound:9.2f}  exact {lml:9.2f}  trace {trace:8.3f}")
