"""Iterative ridge solver used as an independent check on the closed form."""
import numpy as np


def ridge_by_descent(target, basis, lam, tol=1e-13, max_iter=2_000_000):
    """Minimise ||target - W basis||^2 + lam ||W||^2 by accelerated gradient descent."""
    gram = basis @ basis.T
    top = np.linalg.norm(gram, 2)
    smooth = 2 * (top + lam)
    strong = 2 * lam
    kappa = smooth / strong
    beta = (np.sqrt(kappa) - 1) / (np.sqrt(kappa) + 1)
    w = np.zeros((target.shape[0], basis.shape[0]))
    prev = w.copy()
    for _ in range(max_iter):
        look = w + beta * (w - prev)
        grad = -2 * (target - look @ basis) @ basis.T + 2 * lam * look
        prev, w = w, look - grad / smooth
        if np.abs(grad).max() < tol:
            break
    recon = w @ basis
    return w, recon, np.mean((target - recon) ** 2)
