"""Numpy forward/backward kernels for the three fixed architectures.

Every network works on a flat parameter vector ``theta`` and a batch of
flattened inputs ``X`` of shape (n, dim).  ``backward`` takes the gradient of
the (summed) objective with respect to the logits and returns either the
summed parameter gradient or one gradient row per sample, plus optionally the
gradient with respect to the inputs.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(z):
    return np.exp(_log_softmax(z))


class LinearNet:
    """Multinomial logistic regression, theta = [W (C x d) row-major, b (C)]."""

    def __init__(self, dim, num_classes):
        self.dim = dim
        self.num_classes = num_classes
        self.n_params = num_classes * dim + num_classes

    def init(self, rng):
        # convex model: start at the origin so the optimum is init independent
        return np.zeros(self.n_params)

    def unpack(self, theta):
        C, d = self.num_classes, self.dim
        return theta[: C * d].reshape(C, d), theta[C * d :]

    def forward(self, theta, X):
        W, b = self.unpack(theta)
        return X @ W.T + b, (X,)

    def backward(self, theta, cache, dz, per_sample=False, need_x=False):
        (X,) = cache
        W, _ = self.unpack(theta)
        if per_sample:
            gW = (dz[:, :, None] * X[:, None, :]).reshape(len(X), -1)
            g = np.concatenate([gW, dz], axis=1)
        else:
            g = np.concatenate([(dz.T @ X).ravel(), dz.sum(axis=0)])
        gx = dz @ W if need_x else None
        return g, gx

    def hessian(self, theta, X, weights):
        """Exact Hessian of sum_i w_i * CE_i (no regularization)."""
        z, _ = self.forward(theta, X)
        p = softmax(z)
        Xt = np.concatenate([X, np.ones((len(X), 1))], axis=1)
        C, d1 = self.num_classes, self.dim + 1
        # per-sample block (diag(p) - p p^T) kron (x x^T)
        A = np.einsum("n,nc,ce->nce", weights, p, np.eye(C)) - np.einsum(
            "n,nc,ne->nce", weights, p, p
        )
        H = np.empty((C, d1, C, d1))
        for c in range(C):
            for e in range(c, C):
                blk = (Xt * A[:, c, e, None]).T @ Xt
                H[c, :, e, :] = blk
                H[e, :, c, :] = blk.T
        H = H.reshape(C * d1, C * d1)
        # reorder from (class, feature-with-bias) to theta layout [W, b]
        order = np.concatenate(
            [np.arange(C * d1).reshape(C, d1)[:, : self.dim].ravel(), np.arange(C) * d1 + self.dim]
        )
        return H[np.ix_(order, order)]


class MLPNet:
    """Fully connected network with tanh hidden units."""

    def __init__(self, dim, num_classes, hidden):
        self.dim = dim
        self.num_classes = num_classes
        self.sizes = [dim, *hidden, num_classes]
        self.shapes = [(o, i) for i, o in zip(self.sizes[:-1], self.sizes[1:])]
        self.n_params = sum(o * i + o for o, i in self.shapes)

    def init(self, rng):
        parts = []
        for o, i in self.shapes:
            bound = 1.0 / np.sqrt(i)
            parts.append(rng.uniform(-bound, bound, size=o * i))
            parts.append(rng.uniform(-bound, bound, size=o))
        return np.concatenate(parts)

    def unpack(self, theta):
        layers, pos = [], 0
        for o, i in self.shapes:
            W = theta[pos : pos + o * i].reshape(o, i)
            pos += o * i
            b = theta[pos : pos + o]
            pos += o
            layers.append((W, b))
        return layers

    def forward(self, theta, X):
        layers = self.unpack(theta)
        acts = [X]
        h = X
        for k, (W, b) in enumerate(layers):
            h = h @ W.T + b
            if k < len(layers) - 1:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def backward(self, theta, cache, dz, per_sample=False, need_x=False):
        layers = self.unpack(theta)
        acts = cache
        grads = []
        delta = dz
        for k in range(len(layers) - 1, -1, -1):
            W, _ = layers[k]
            inp = acts[k]
            if per_sample:
                grads.append(delta)
                grads.append((delta[:, :, None] * inp[:, None, :]).reshape(len(inp), -1))
            else:
                grads.append(delta.sum(axis=0))
                grads.append((delta.T @ inp).ravel())
            if k > 0 or need_x:
                delta = delta @ W
                if k > 0:
                    delta = delta * (1.0 - acts[k] ** 2)
        gx = delta if need_x else None
        g = np.concatenate(grads[::-1], axis=1 if per_sample else 0)
        return g, gx


def _im2col(x):
    """(n, c, s, s) -> (n, s*s, c*9) patches of a 3x3 stride-1 pad-1 conv."""
    n, c, s, _ = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # n, c, s, s, 3, 3
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, s * s, c * 9)


def _col2im(cols, c, s):
    n = cols.shape[0]
    cols = cols.reshape(n, s, s, c, 3, 3)
    out = np.zeros((n, c, s + 2, s + 2))
    for di in range(3):
        for dj in range(3):
            out[:, :, di : di + s, dj : dj + s] += cols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    return out[:, :, 1:-1, 1:-1]


def _pool_forward(x):
    n, c, s, _ = x.shape
    r = x.reshape(n, c, s // 2, 2, s // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, s // 2, s // 2, 4)
    idx = r.argmax(axis=-1)
    return np.take_along_axis(r, idx[..., None], axis=-1)[..., 0], idx


def _pool_backward(dout, idx, s):
    n, c = dout.shape[:2]
    r = np.zeros((n, c, s // 2, s // 2, 4))
    np.put_along_axis(r, idx[..., None], dout[..., None], axis=-1)
    return r.reshape(n, c, s // 2, s // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, s, s)


class ConvNet:
    """conv3x3(c1)-relu-pool2, conv3x3(c2)-relu-pool2, dense(h)-relu, dense(C)."""

    def __init__(self, dim, num_classes, filters=(8, 16), dense=32):
        side = int(round(np.sqrt(dim)))
        if side * side != dim or side % 4:
            raise ValueError(f"CNN needs a square input with side divisible by 4, got dim={dim}")
        self.dim = dim
        self.side = side
        self.num_classes = num_classes
        c1, c2 = filters
        flat = c2 * (side // 4) ** 2
        self.shapes = [
            ("conv", (c1, 1 * 9)),
            ("conv", (c2, c1 * 9)),
            ("dense", (dense, flat)),
            ("dense", (num_classes, dense)),
        ]
        self.n_params = sum(o * i + o for _, (o, i) in self.shapes)

    def init(self, rng):
        parts = []
        for _, (o, i) in self.shapes:
            bound = 1.0 / np.sqrt(i)
            parts.append(rng.uniform(-bound, bound, size=o * i))
            parts.append(rng.uniform(-bound, bound, size=o))
        return np.concatenate(parts)

    def unpack(self, theta):
        out, pos = [], 0
        for _, (o, i) in self.shapes:
            W = theta[pos : pos + o * i].reshape(o, i)
            pos += o * i
            out.append((W, theta[pos : pos + o]))
            pos += o
        return out

    def forward(self, theta, X):
        (W1, b1), (W2, b2), (W3, b3), (W4, b4) = self.unpack(theta)
        n, s = len(X), self.side
        x0 = X.reshape(n, 1, s, s)
        cols1 = _im2col(x0)
        a1 = (cols1 @ W1.T + b1).transpose(0, 2, 1).reshape(n, -1, s, s)
        r1 = np.maximum(a1, 0.0)
        p1, i1 = _pool_forward(r1)
        cols2 = _im2col(p1)
        a2 = (cols2 @ W2.T + b2).transpose(0, 2, 1).reshape(n, -1, s // 2, s // 2)
        r2 = np.maximum(a2, 0.0)
        p2, i2 = _pool_forward(r2)
        f = p2.reshape(n, -1)
        a3 = f @ W3.T + b3
        r3 = np.maximum(a3, 0.0)
        z = r3 @ W4.T + b4
        return z, (cols1, a1, i1, p1, cols2, a2, i2, f, a3, r3)

    def backward(self, theta, cache, dz, per_sample=False, need_x=False):
        (W1, _), (W2, _), (W3, _), (W4, _) = self.unpack(theta)
        cols1, a1, i1, p1, cols2, a2, i2, f, a3, r3 = cache
        n, s = len(dz), self.side

        def dense_grads(delta, inp):
            if per_sample:
                return (delta[:, :, None] * inp[:, None, :]).reshape(n, -1), delta
            return (delta.T @ inp).ravel(), delta.sum(axis=0)

        def conv_grads(dout, cols):
            # dout: (n, s*s, cout)
            if per_sample:
                return np.einsum("npo,npk->nok", dout, cols).reshape(n, -1), dout.sum(axis=1)
            return np.einsum("npo,npk->ok", dout, cols).ravel(), dout.sum(axis=(0, 1))

        gW4, gb4 = dense_grads(dz, r3)
        d3 = (dz @ W4) * (a3 > 0)
        gW3, gb3 = dense_grads(d3, f)
        df = d3 @ W3
        c2 = a2.shape[1]
        dr2 = _pool_backward(df.reshape(n, c2, s // 4, s // 4), i2, s // 2)
        da2 = dr2 * (a2 > 0)
        dout2 = da2.reshape(n, c2, -1).transpose(0, 2, 1)
        gW2, gb2 = conv_grads(dout2, cols2)
        c1 = a1.shape[1]
        dp1 = _col2im(dout2 @ W2, c1, s // 2)
        dr1 = _pool_backward(dp1, i1, s)
        da1 = dr1 * (a1 > 0)
        dout1 = da1.reshape(n, c1, -1).transpose(0, 2, 1)
        gW1, gb1 = conv_grads(dout1, cols1)
        axis = 1 if per_sample else 0
        g = np.concatenate([gW1, gb1, gW2, gb2, gW3, gb3, gW4, gb4], axis=axis)
        gx = _col2im(dout1 @ W1, 1, s).reshape(n, -1) if need_x else None
        return g, gx
