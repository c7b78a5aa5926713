"""Independent reference implementations used by the tests.

These are deliberately naive (scalar loops, brute force) and share no code
with the package beyond plain numpy.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def conv2d_loops(x, w, b=None, stride=1, pad=0, dil=1):
    """Nested-loop zero-padded convolution (cross-correlation), float64."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * pad - ((kh - 1) * dil + 1)) // stride + 1
    wo = (wd + 2 * pad - ((kw - 1) * dil + 1)) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for bi in range(n):
        for o in range(cout):
            for r in range(ho):
                for c in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for ci in range(cin):
                        for i in range(kh):
                            for j in range(kw):
                                rr = r * stride - pad + i * dil
                                cc = c * stride - pad + j * dil
                                if 0 <= rr < h and 0 <= cc < wd:
                                    acc += x[bi, ci, rr, cc] * w[o, ci, i, j]
                    out[bi, o, r, c] = acc
    return out


# neighbour whose value a shift in each direction moves into a pixel
_SRC = {"up": (1, 0), "right": (0, -1), "down": (-1, 0), "left": (0, 1)}
_ORDER = ("up", "right", "down", "left")


def mean_field_loops(psi_u, k, mu, iterations=5, init="softmax"):
    """Scalar-loop mean field for one P×h×w instance, same update order as the layers."""
    psi_u = np.asarray(psi_u, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    p, h, w = psi_u.shape

    def softmax_site(v):
        m = max(v)
        e = [math.exp(x - m) for x in v]
        s = sum(e)
        return [x / s for x in e]

    q = np.zeros_like(psi_u)
    if init == "softmax":
        for r in range(h):
            for c in range(w):
                q[:, r, c] = softmax_site([-psi_u[l, r, c] for l in range(p)])
    else:
        q = psi_u.copy()
    for _ in range(iterations):
        new = np.zeros_like(q)
        for r in range(h):
            for c in range(w):
                msg = [0.0] * p
                for d, name in enumerate(_ORDER):
                    dr, dc = _SRC[name]
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < h and 0 <= cc < w:
                        for l in range(p):
                            msg[l] += q[l, rr, cc] * k[d, r, c]
                comp = [sum(mu[l, m] * msg[m] for m in range(p)) for l in range(p)]
                new[:, r, c] = softmax_site([-psi_u[l, r, c] - comp[l] for l in range(p)])
        q = new
    return q


def energy_loops(labeling, psi_u, k, mu):
    """Gibbs energy with each undirected 4-neighbour edge counted once.

    Vertical edge (r,c)-(r+1,c) reads the 'up' kernel at (r,c); horizontal edge
    (r,c)-(r,c+1) reads the 'left' kernel at (r,c).
    """
    x = np.asarray(labeling)
    p, h, w = psi_u.shape
    e = 0.0
    for r in range(h):
        for c in range(w):
            e += psi_u[x[r, c], r, c]
            if r + 1 < h:
                e += mu[x[r, c], x[r + 1, c]] * k[0, r, c]
            if c + 1 < w:
                e += mu[x[r, c], x[r, c + 1]] * k[3, r, c]
    return e


def marginals_loops(psi_u, k, mu):
    p, h, w = psi_u.shape
    marg = np.zeros((p, h, w))
    z = 0.0
    for flat in itertools.product(range(p), repeat=h * w):
        lab = np.array(flat).reshape(h, w)
        wgt = math.exp(-energy_loops(lab, psi_u, k, mu))
        z += wgt
        for r in range(h):
            for c in range(w):
                marg[lab[r, c], r, c] += wgt
    return marg / z


def point_in_polygon(px, py, verts):
    """Even-odd crossing test with half-open edge rule (y0 <= py < y1)."""
    inside = False
    n = len(verts)
    for i in range(n):
        x0, y0 = verts[i]
        x1, y1 = verts[(i + 1) % n]
        if (y0 <= py < y1) or (y1 <= py < y0):
            xc = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
            if px < xc:
                inside = not inside
    return inside


def fill_polygon_oracle(verts, shape):
    h, w = shape
    out = np.zeros(shape, dtype=np.uint8)
    for r in range(h):
        for c in range(w):
            if point_in_polygon(float(c), float(r), verts):
                out[r, c] = 1
    return out


def similarity_grid_search(src, dst, center, span, iters=6, steps=9):
    """Brute-force least squares over (s, theta, tx, ty) by iterated grid refinement."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    best = np.asarray(center, dtype=np.float64)
    span = np.asarray(span, dtype=np.float64)

    def residual(prm):
        s, th, tx, ty = prm
        c, si = math.cos(th), math.sin(th)
        pred = np.stack([s * (c * src[:, 0] - si * src[:, 1]) + tx, s * (si * src[:, 0] + c * src[:, 1]) + ty], 1)
        return float(((pred - dst) ** 2).sum())

    for _ in range(iters):
        axes = [np.linspace(b - sp, b + sp, steps) for b, sp in zip(best, span)]
        cands = [np.array(v) for v in itertools.product(*axes) if v[0] > 0]
        best = min(cands, key=residual)
        span = span * 2.0 / (steps - 1)
    return best, residual(best)


def coverage_oracle(h, w, crop):
    """Count, per pixel, how many of the 10 oversampling passes cover it."""
    ch, cw = crop
    origins = [((h - ch) // 2, (w - cw) // 2), (0, 0), (0, w - cw), (h - ch, 0), (h - ch, w - cw)]
    cover = np.zeros((h, w), dtype=np.int64)
    for r in range(h):
        for c in range(w):
            for orow, ocol in origins:
                if orow <= r < orow + ch and ocol <= c < ocol + cw:
                    cover[r, c] += 2
    return cover
