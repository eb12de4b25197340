"""Independent reference implementations used as test oracles.

Nothing here imports the tensor library; each function recomputes a
quantity with plain loops or numpy so the library can be checked against it.
"""

import math

import numpy as np


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def direct_conv1d(x, w):
    """out[b, o, t] = sum_c sum_k w[o, c, k] * x[b, c, t + k]"""
    B, C, L = x.shape
    O, _, K = w.shape
    out = np.zeros((B, O, L - K + 1))
    for b in range(B):
        for o in range(O):
            for t in range(L - K + 1):
                s = 0.0
                for c in range(C):
                    for k in range(K):
                        s += w[o, c, k] * x[b, c, t + k]
                out[b, o, t] = s
    return out


def scalar_gru(x, params, name, layers, H):
    """Loop-over-scalars GRU: x [B, steps, F] -> top-layer last state [B, H]."""
    B, steps, _ = x.shape
    seq = [[list(x[b, t]) for t in range(steps)] for b in range(B)]
    for layer in range(layers):
        w_ih = params[f"{name}.l{layer}.w_ih"].data
        w_hh = params[f"{name}.l{layer}.w_hh"].data
        b_ih = params[f"{name}.l{layer}.b_ih"].data
        b_hh = params[f"{name}.l{layer}.b_hh"].data
        new_seq = []
        for b in range(B):
            h = [0.0] * H
            outs = []
            for t in range(steps):
                xt = seq[b][t]

                def gate(row, v, w, bias):
                    return sum(w[row, i] * v[i] for i in range(len(v))) + bias[row]

                nh = []
                for u in range(H):
                    r = sigmoid(gate(u, xt, w_ih, b_ih) + gate(u, h, w_hh, b_hh))
                    z = sigmoid(gate(H + u, xt, w_ih, b_ih) + gate(H + u, h, w_hh, b_hh))
                    n = math.tanh(gate(2 * H + u, xt, w_ih, b_ih) + r * gate(2 * H + u, h, w_hh, b_hh))
                    nh.append((1 - z) * n + z * h[u])
                h = nh
                outs.append(h)
            new_seq.append(outs)
        seq = new_seq
    return np.array([seq[b][-1] for b in range(B)])


def explicit_attention(x, params, name, heads):
    """Per-sample, per-head softmax(Q K^T / sqrt(dh)) V with explicit loops."""
    B, J, d = x.shape
    dh = d // heads

    def lin(v, proj):
        w = params[f"{name}.{proj}.w"].data
        b = params[f"{name}.{proj}.b"].data if f"{name}.{proj}.b" in params else np.zeros(w.shape[0])
        return w @ v + b

    out = np.zeros_like(x)
    for bi in range(B):
        q = np.array([lin(x[bi, j], "q") for j in range(J)])
        k = np.array([lin(x[bi, j], "k") for j in range(J)])
        v = np.array([lin(x[bi, j], "v") for j in range(J)])
        ctx = np.zeros((J, d))
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            for i in range(J):
                s = np.array([q[i, sl] @ k[j, sl] / math.sqrt(dh) for j in range(J)])
                a = np.exp(s - s.max())
                a /= a.sum()
                ctx[i, sl] = sum(a[j] * v[j, sl] for j in range(J))
        out[bi] = np.array([lin(ctx[i], "o") for i in range(J)])
    return out


def scalar_adam_trace(x0, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Adam on f(x) = x^2 with plain floats."""
    x, m, v = x0, 0.0, 0.0
    out = []
    for t in range(1, steps + 1):
        g = 2.0 * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        x = x - lr * mhat / (math.sqrt(vhat) + eps)
        out.append(x)
    return out


def cosine(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(a @ b) / (math.sqrt(float(a @ a)) * math.sqrt(float(b @ b)))


def contrastive_oracle(glb, loc, tau):
    """Batch mean of the InfoNCE sum over ordered device pairs, enumerated term by term.

    glb, loc: arrays [batch, J, ...] of per-device features.
    """
    B, J = glb.shape[:2]
    total = 0.0
    for b in range(B):
        neg = sum(math.exp(cosine(glb[b, k], loc[b, k]) / tau) for k in range(J))
        neg += sum(math.exp(cosine(loc[b, k], loc[b, m]) / tau) for k in range(J) for m in range(J) if k != m)
        for i in range(J):
            for j in range(J):
                if i == j:
                    continue
                s = math.exp(cosine(glb[b, i], glb[b, j]) / tau)
                total += -math.log(s / (s + neg))
    return total / B


def orthogonality_oracle(glb, loc):
    B, J = glb.shape[:2]
    total = 0.0
    for b in range(B):
        total += sum(cosine(loc[b, i], loc[b, j]) for i in range(J) for j in range(J) if i != j)
        total += sum(cosine(glb[b, j], loc[b, j]) for j in range(J))
    return total / B


def quality_weight_oracle(e, lambda_a, lambda_b, lambda_c_w):
    """Rescaled sigmoid scores and their normalization, one scalar at a time."""
    e = np.asarray(e, dtype=float)
    tilde = np.zeros_like(e)
    for idx in np.ndindex(e.shape):
        z = e[idx] / lambda_b
        s = 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))
        tilde[idx] = lambda_a * s + lambda_c_w
    return tilde, tilde / tilde.sum(axis=-1, keepdims=True)


def rmse_of_distances(p, q):
    d = [math.hypot(a[0] - b[0], a[1] - b[1]) for a, b in zip(p, q)]
    return math.sqrt(sum(x * x for x in d) / len(d))


def empirical_cdf(errors):
    """Sort-and-rank CDF: one point per distinct value with the fraction at or below it."""
    xs = sorted(float(x) for x in errors)
    n = len(xs)
    out = []
    for rank, x in enumerate(xs, start=1):
        if out and out[-1][0] == x:
            out[-1] = (x, rank / n)
        else:
            out.append((x, rank / n))
    return out
