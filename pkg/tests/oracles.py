"""Independent reference implementations for the test suite.

Nothing here imports uaspk.  The oracles are written the slow, obvious way
(python loops, mpmath at 50 digits, exact fractions) so that agreement with
the vectorized torch code is meaningful.
"""
import math
from fractions import Fraction

import mpmath

mpmath.mp.dps = 50


# -- numerics ---------------------------------------------------------------

def mp_softmax(v):
    e = [mpmath.e ** mpmath.mpf(x) for x in v]
    tot = mpmath.fsum(e)
    return [float(x / tot) for x in e]


def mp_log_sum_exp(v):
    return float(mpmath.log(mpmath.fsum(mpmath.e ** mpmath.mpf(x) for x in v)))


def mp_softplus(x):
    return float(mpmath.log(1 + mpmath.e ** mpmath.mpf(x)))


def mp_cross_entropy(logits, label):
    lse = mpmath.log(mpmath.fsum(mpmath.e ** mpmath.mpf(x) for x in logits))
    return float(lse - mpmath.mpf(logits[label]))


def norm_rel(a, b):
    """Norm-wise relative difference max|a-b| / max(max|a|, max|b|) for flat lists."""
    a, b = [float(x) for x in a], [float(x) for x in b]
    diff = max(abs(x - y) for x, y in zip(a, b))
    scale = max(max(abs(x) for x in a), max(abs(y) for y in b))
    return 0.0 if diff == 0 else diff / scale


# -- pooling -----------------------------------------------------------------

def sequential_posterior(z, L, z_p, L_p):
    """Multiply the prior by each frame likelihood in turn (per dimension, mpmath).

    z, L are T x d nested lists, z_p, L_p length-d lists.  Returns
    (phi, prec) as lists of floats.
    """
    d = len(z_p)
    phi, prec = [], []
    for k in range(d):
        m, p = mpmath.mpf(z_p[k]), mpmath.mpf(L_p[k])
        for t in range(len(z)):
            lt, zt = mpmath.mpf(L[t][k]), mpmath.mpf(z[t][k])
            new_p = p + lt
            m = (p * m + lt * zt) / new_p
            p = new_p
        phi.append(float(m))
        prec.append(float(p))
    return phi, prec


# -- attention and the toy encoder -----------------------------------------

def _matvec(W, b, x):
    return [sum(W[i][j] * x[j] for j in range(len(x))) + b[i] for i in range(len(W))]


def banded_attention(x, Wq, bq, Wk, bk, Wv, bv, n_heads):
    """Per-head outputs [h][t][c] of band-limited attention, head h seeing 2**(h+1)+1 frames."""
    T, D = len(x), len(x[0])
    dh = D // n_heads
    q = [_matvec(Wq, bq, r) for r in x]
    k = [_matvec(Wk, bk, r) for r in x]
    v = [_matvec(Wv, bv, r) for r in x]
    out = []
    for h in range(n_heads):
        radius = (2 ** (h + 1)) // 2
        sl = slice(h * dh, (h + 1) * dh)
        rows = []
        for i in range(T):
            keys = [j for j in range(T) if abs(i - j) <= radius]
            scores = [sum(a * b for a, b in zip(q[i][sl], k[j][sl])) / math.sqrt(dh) for j in keys]
            top = max(scores)
            w = [math.exp(s - top) for s in scores]
            tot = sum(w)
            rows.append([sum(w[n] * v[j][sl][c] for n, j in enumerate(keys)) / tot for c in range(dh)])
        out.append(rows)
    return out


def layer_norm(x, g, b, eps=1e-5):
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    return [(v - mu) / math.sqrt(var + eps) * gi + bi for v, gi, bi in zip(x, g, b)]


def encoder_forward(features, p, n_heads):
    """Toy encoder with a one-layer relu trunk and one pre-norm MVA block.

    ``p`` maps parameter names (as in the torch state dict) to nested lists.
    Returns (z, logit) as T x embed lists.
    """
    h = [[max(0.0, v) for v in _matvec(p["trunk.0.weight"], p["trunk.0.bias"], r)] for r in features]
    z = [_matvec(p["mean_head.weight"], p["mean_head.bias"], r) for r in h]
    n1 = [layer_norm(r, p["blocks.0.norm1.weight"], p["blocks.0.norm1.bias"]) for r in h]
    heads = banded_attention(n1, p["blocks.0.attn.q.weight"], p["blocks.0.attn.q.bias"],
                             p["blocks.0.attn.k.weight"], p["blocks.0.attn.k.bias"],
                             p["blocks.0.attn.v.weight"], p["blocks.0.attn.v.bias"], n_heads)
    u = []
    for t in range(len(h)):
        cat = [c for hh in range(n_heads) for c in heads[hh][t]]
        att = _matvec(p["blocks.0.attn.out.weight"], p["blocks.0.attn.out.bias"], cat)
        r = [a + b for a, b in zip(h[t], att)]
        n2 = layer_norm(r, p["blocks.0.norm2.weight"], p["blocks.0.norm2.bias"])
        ff = _matvec(p["blocks.0.ff2.weight"], p["blocks.0.ff2.bias"],
                     [max(0.0, v) for v in _matvec(p["blocks.0.ff1.weight"], p["blocks.0.ff1.bias"], n2)])
        u.append([a + b for a, b in zip(r, ff)])
    logit = [_matvec(p["precision_head.weight"], p["precision_head.bias"], r) for r in u]
    return z, logit


# -- losses ------------------------------------------------------------------

def mp_uaam(phi, sigma, W, label, s, m, lam):
    """UAAM loss of one sample with scalar Lambda, every step in mpmath."""
    phi = [mpmath.mpf(v) for v in phi]
    nphi = mpmath.sqrt(mpmath.fsum(v * v for v in phi))
    cos = []
    for row in W:
        row = [mpmath.mpf(v) for v in row]
        cos.append(mpmath.fsum(a * b for a, b in zip(phi, row)) / (nphi * mpmath.sqrt(mpmath.fsum(v * v for v in row))))
    q = mpmath.fsum(v * v * (mpmath.mpf(lam) + mpmath.mpf(sg)) for v, sg in zip(phi, sigma))
    s_u = nphi / mpmath.sqrt(q)
    theta = mpmath.acos(cos[label])
    logits = [s * s_u * (mpmath.cos(theta + m) if j == label else c) for j, c in enumerate(cos)]
    lse = mpmath.log(mpmath.fsum(mpmath.e ** x for x in logits))
    return float(lse - logits[label])


def mp_delta_cos(phi, W, label):
    phi = [mpmath.mpf(v) for v in phi]
    nphi = mpmath.sqrt(mpmath.fsum(v * v for v in phi))
    cos = [mpmath.fsum(a * mpmath.mpf(b) for a, b in zip(phi, row))
           / (nphi * mpmath.sqrt(mpmath.fsum(mpmath.mpf(b) ** 2 for b in row))) for row in W]
    return cos[label] - max(c for j, c in enumerate(cos) if j != label)


# -- metrics -------------------------------------------------------------------

def _threshold_positions(scores):
    """All 2n+1 threshold positions: below everything, at each score, between neighbours, above."""
    u = sorted(set(scores))
    pos = [-math.inf]
    for i, s in enumerate(u):
        pos.append(s)
        if i + 1 < len(u):
            pos.append((Fraction(s) + Fraction(u[i + 1])) / 2)
    pos.append(math.inf)
    return pos


def operating_points(scores, labels):
    """(FAR, FRR) as Fractions at every threshold position, accept iff score >= t."""
    n_tar = sum(1 for y in labels if y)
    n_non = len(labels) - n_tar
    pts = []
    for t in _threshold_positions(scores):
        fa = sum(1 for s, y in zip(scores, labels) if not y and Fraction(s) >= t) if t != math.inf else 0
        if t == -math.inf:
            fa = n_non
        miss = sum(1 for s, y in zip(scores, labels) if y and (t != -math.inf and (t == math.inf or Fraction(s) < t)))
        pts.append((Fraction(fa, n_non), Fraction(miss, n_tar)))
    return pts


def brute_eer(scores, labels):
    """First crossing FRR >= FAR along increasing thresholds, linear in between."""
    pts = []
    for p in operating_points(scores, labels):
        if not pts or pts[-1] != p:
            pts.append(p)
    for k, (far, frr) in enumerate(pts):
        if frr >= far:
            if k == 0 or frr == far:
                return float(far)
            far0, frr0 = pts[k - 1]
            d0, d1 = frr0 - far0, frr - far
            t = d0 / (d0 - d1)
            return float(far0 + t * (far - far0))
    raise AssertionError("FRR never reaches FAR")


def brute_min_dcf(scores, labels, p_target=0.01, c_miss=1.0, c_fa=1.0):
    pt, cm, cf = Fraction(p_target), Fraction(c_miss), Fraction(c_fa)
    best = min(cm * pt * frr + cf * (1 - pt) * far for far, frr in operating_points(scores, labels))
    return float(best / min(cm * pt, cf * (1 - pt)))
