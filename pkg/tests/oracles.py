"""Scalar-loop reference implementations used as test oracles.

Written without numpy vector ops on purpose so that they share no code path
with the package.
"""

import math


def matmul(a, b):
    return [[sum(a[i][k] * b[k][j] for k in range(len(b))) for j in range(len(b[0]))] for i in range(len(a))]


def attention(Q, K, V, causal=False, valid=None):
    T, dk = len(Q), len(Q[0])
    att = []
    for i in range(T):
        scores = []
        for j in range(T):
            allowed = (not causal or j <= i) and (valid is None or valid[j])
            scores.append(sum(Q[i][k] * K[j][k] for k in range(dk)) / math.sqrt(dk) if allowed else None)
        top = max(s for s in scores if s is not None)
        ex = [0.0 if s is None else math.exp(s - top) for s in scores]
        z = sum(ex)
        att.append([e / z for e in ex])
    out = [[sum(att[i][j] * V[j][k] for j in range(T)) for k in range(len(V[0]))] for i in range(T)]
    return att, out


def two_stream_layer(M, D, w, causal=False):
    """Straight-line layer for streams M and D; ``w`` maps names like 'M.q' to nested lists."""
    proj = {}
    for name, X in (("M", M), ("D", D)):
        for p in "qkv":
            proj[name + p] = matmul(X, w[f"{name}.{p}"])
    a_mm, o_mm = attention(proj["Mq"], proj["Mk"], proj["Mv"], causal)
    a_md, o_md = attention(proj["Mq"], proj["Dk"], proj["Dv"], causal)
    a_dd, o_dd = attention(proj["Dq"], proj["Dk"], proj["Dv"], causal)
    cat_m = [o_mm[t] + o_md[t] for t in range(len(M))]
    cat_d = [o_dd[t] + o_md[t] for t in range(len(D))]
    m_hat = [[v + w["M.b"][0][j] for j, v in enumerate(row)] for row in matmul(cat_m, w["M.W"])]
    d_hat = [[v + w["D.b"][0][j] for j, v in enumerate(row)] for row in matmul(cat_d, w["D.W"])]
    return m_hat, d_hat, {"MM": (a_mm, o_mm), "MD": (a_md, o_md), "DD": (a_dd, o_dd)}
