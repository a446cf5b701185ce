"""Independent reference implementations used as test oracles.

Each one is written from the defining formula with plain loops or dense
linear algebra, sharing no code with the package beyond data containers.
"""

import math
import statistics

import numpy as np
from scipy import optimize, stats
from scipy.spatial import cKDTree


# -- CFAR ---------------------------------------------------------------------


def soca_pfa_integral(alpha, n):
    """P(X > alpha * min(S1, S2) / n) for X ~ Exp(1), S1, S2 ~ Gamma(n, 1) by quadrature."""
    T = alpha / n
    g = stats.gamma(n)

    # composite 64-point Gauss-Legendre over [0, 10n + 100], graded near 0 where exp(-T s) is sharp
    nodes, weights = np.polynomial.legendre.leggauss(64)
    edges = np.concatenate([[0.0], np.geomspace(1e-7, 1.0, 40), np.linspace(1.0, 10.0 * n + 100.0, 101)[1:]])
    half = np.diff(edges)[:, None] / 2.0
    s = (edges[:-1, None] + half * (nodes[None, :] + 1.0)).ravel()
    w = (half * weights[None, :]).ravel()
    return float(np.sum(w * 2.0 * g.pdf(s) * g.sf(s) * np.exp(-T * s)))


def soca_alpha_integral(pfa, n):
    return optimize.brentq(lambda a: soca_pfa_integral(a, n) - pfa, 1e-6, 1e7, xtol=1e-13)


def ca_alpha_closed(pfa, n):
    # (1 + alpha/n)^-n = pfa
    return n * (pfa ** (-1.0 / n) - 1.0)


def naive_cfar(img, train, guard, pfa):
    """Per-cell loop; returns the set of detected (range_bin, bearing_bin)."""
    a_so = soca_alpha_integral(pfa, train)
    a_ca = ca_alpha_closed(pfa, train)
    R, B = img.shape
    hits = set()
    for b in range(B):
        for i in range(R):
            lead_idx = list(range(i - guard - train, i - guard))
            lag_idx = list(range(i + guard + 1, i + guard + train + 1))
            lead_ok = lead_idx[0] >= 0
            lag_ok = lag_idx[-1] <= R - 1
            lead = sum(img[j, b] for j in lead_idx) / train if lead_ok else math.inf
            lag = sum(img[j, b] for j in lag_idx) / train if lag_ok else math.inf
            alpha = a_so if (lead_ok and lag_ok) else a_ca
            if img[i, b] > alpha * min(lead, lag):
                hits.add((i, b))
    return hits


# -- stereo pairing -------------------------------------------------------------


def brute_force_pairs(Fv, Fh, rig, tol):
    """All (v, h) index pairs satisfying the range and companion-aperture predicate."""
    R = rig.v_to_h.rotation
    out = []
    for i in range(len(Fv)):
        tv = Fv.theta[i]
        dir_v_in_h = R @ np.array([math.cos(tv), math.sin(tv), 0.0])
        elev_v = math.asin(max(-1.0, min(1.0, dir_v_in_h[2])))
        ok_v = rig.sonar_h.phi_min <= elev_v <= rig.sonar_h.phi_max
        for j in range(len(Fh)):
            th = Fh.theta[j]
            dir_h_in_v = R.T @ np.array([math.cos(th), math.sin(th), 0.0])
            elev_h = math.asin(max(-1.0, min(1.0, dir_h_in_v[2])))
            ok_h = rig.sonar_v.phi_min <= elev_h <= rig.sonar_v.phi_max
            if ok_v and ok_h and abs(Fv.r[i] - Fh.r[j]) <= tol:
                out.append((i, j))
    return out


# -- Gaussian process -------------------------------------------------------------


def matern32_scalar(d, sigma_f2, length):
    s = math.sqrt(3.0) * d / length
    return sigma_f2 * (1.0 + s) * math.exp(-s)


def dense_gp(X, y, noise, Q, sigma_f2, length):
    """Posterior mean / variance via an explicit dense solve of (K + diag(noise))."""
    N, M = len(X), len(Q)
    K = np.empty((N, N))
    for i in range(N):
        for j in range(N):
            K[i, j] = matern32_scalar(float(np.linalg.norm(X[i] - X[j])), sigma_f2, length)
    Ks = np.empty((N, M))
    for i in range(N):
        for j in range(M):
            Ks[i, j] = matern32_scalar(float(np.linalg.norm(X[i] - Q[j])), sigma_f2, length)
    A = K + np.diag(noise)
    mu = Ks.T @ np.linalg.solve(A, y)
    var = sigma_f2 - np.sum(Ks * np.linalg.solve(A, Ks), axis=0)
    return mu, var


# -- geometry ----------------------------------------------------------------------


def cylinder_surface_samples(center, axis, radius, half_height, pitch):
    """Dense surface samples of a closed finite cylinder, spacing <= pitch."""
    axis = np.asarray(axis, float) / np.linalg.norm(axis)
    ref = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(axis, ref)
    u /= np.linalg.norm(u)
    v = np.cross(axis, u)
    pts = []
    n_ang = int(math.ceil(2 * math.pi * radius / pitch)) + 1
    for h in np.linspace(-half_height, half_height, int(math.ceil(2 * half_height / pitch)) + 1):
        for a in np.linspace(0, 2 * math.pi, n_ang, endpoint=False):
            pts.append(center + h * axis + radius * (math.cos(a) * u + math.sin(a) * v))
    for rr in np.linspace(0, radius, int(math.ceil(radius / pitch)) + 1):
        m = max(1, int(math.ceil(2 * math.pi * rr / pitch)))
        for a in np.linspace(0, 2 * math.pi, m, endpoint=False):
            for s in (-1, 1):
                pts.append(center + s * half_height * axis + rr * (math.cos(a) * u + math.sin(a) * v))
    return np.array(pts)


def mesh_distance(samples, P):
    """Nearest-sample distance; overestimates the true surface distance by at most the pitch."""
    return cKDTree(samples).query(P)[0]


# -- statistics -------------------------------------------------------------------


def stats_oracle(d, threshold):
    d = [float(x) for x in d]
    mae = statistics.fmean(d)
    rmse = math.sqrt(math.fsum(x * x for x in d) / len(d))
    sd = statistics.pstdev(d)
    inl = sum(1 for x in d if x <= threshold)
    return 100 * mae, 100 * rmse, 100 * sd, 100.0 * inl / len(d), inl
