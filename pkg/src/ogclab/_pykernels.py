"""Numpy versions of the compiled kernels, same signatures and semantics."""
import numpy as np


def _estep(x, mu, var, w):
    with np.errstate(divide="ignore"):
        logw = np.log(w)
    a = logw[:, None] - 0.5 * np.log(2.0 * np.pi * var)[:, None] - (x[None, :] - mu[:, None]) ** 2 / (
        2.0 * var[:, None]
    )
    m = a.max(axis=0)
    lse = m + np.log(np.exp(a[0] - m) + np.exp(a[1] - m))
    return float(lse.sum()), np.exp(a[0] - lse)


def _mstep(x, r0, mu, var, w, var_floor):
    r = np.vstack([r0, 1.0 - r0])
    nk = r.sum(axis=1)
    mu = np.where(nk > 0, (r @ x) / np.where(nk > 0, nk, 1.0), mu)
    sq = (r * (x[None, :] - mu[:, None]) ** 2).sum(axis=1)
    var = np.where(nk > 0, sq / np.where(nk > 0, nk, 1.0), var)
    var = np.maximum(var, var_floor)
    return mu, var, nk / x.size


def em_fit(x, mu_init, var_init, w_init, max_iters, tol, var_floor):
    """Run EM from the given start; returns (mu, var, w, loglik_trace, n_iter)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    mu = np.array(mu_init, dtype=np.float64)
    var = np.array(var_init, dtype=np.float64)
    w = np.array(w_init, dtype=np.float64)
    trace = []
    prev = -np.inf
    for it in range(max_iters):
        ll, r0 = _estep(x, mu, var, w)
        trace.append(ll)
        if it > 0 and abs(ll - prev) <= tol:
            break
        prev = ll
        mu, var, w = _mstep(x, r0, mu, var, w, var_floor)
    else:
        trace.append(_estep(x, mu, var, w)[0])
    return mu, var, w, np.array(trace), len(trace)


def clipped_ratio(g, w_clean, w_noise, tau):
    """Ratio of the w_noise- and w_clean-weighted means of min(g, tau)."""
    c = np.minimum(g, tau)
    den = float(np.dot(w_clean, c))
    mn = float(np.sum(w_noise))
    if den <= 0 or mn <= 0:
        raise ZeroDivisionError("clean integral vanished")
    return (float(np.dot(w_noise, c)) / mn) / (den / float(np.sum(w_clean)))


def clipped_ratios(g, w_clean, w_noise, taus):
    """clipped_ratio evaluated at every entry of ``taus``."""
    c = np.minimum(np.asarray(g)[None, :], np.asarray(taus)[:, None])
    mn, mc = float(np.sum(w_noise)), float(np.sum(w_clean))
    if mn <= 0 or mc <= 0:
        raise ZeroDivisionError("clean integral vanished")
    return (c @ w_noise / mn) / (c @ w_clean / mc)
