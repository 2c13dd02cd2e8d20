"""Small numpy neural-network engine: dense layers, batch norm, dropout, Adam.

Hidden blocks are ``affine -> batchnorm -> ReLU -> dropout``; the output layer
is a plain affine map.  Gradients are hand-written reverse mode and are checked
against central differences in the test suite.
"""

from __future__ import annotations

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Mlp:
    def __init__(self, in_dim: int, hidden: list[int], out_dim: int, *,
                 batchnorm: bool = True, dropout_p: float = 0.0,
                 dtype=np.float32, seed: int = 0, out_scale: float = 1.0):
        self.in_dim = int(in_dim)
        self.hidden = [int(h) for h in hidden]
        self.out_dim = int(out_dim)
        self.batchnorm = bool(batchnorm)
        self.dropout_p = float(dropout_p)
        self.dtype = np.dtype(dtype)
        self.training = True
        rng = np.random.default_rng(seed)
        dims = [self.in_dim] + self.hidden + [self.out_dim]
        self.layers = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            std = np.sqrt((1.0 if last else 2.0) / fan_in) * (out_scale if last else 1.0)
            layer = {
                "W": rng.normal(0.0, std, (fan_in, fan_out)).astype(self.dtype),
                "b": np.zeros(fan_out, dtype=self.dtype),
            }
            if self.batchnorm and not last:
                layer["gamma"] = np.ones(fan_out, dtype=self.dtype)
                layer["beta"] = np.zeros(fan_out, dtype=self.dtype)
                layer["running_mean"] = np.zeros(fan_out, dtype=self.dtype)
                layer["running_var"] = np.ones(fan_out, dtype=self.dtype)
            self.layers.append(layer)

    # parameters ----------------------------------------------------------

    TRAINABLE = ("W", "b", "gamma", "beta")

    def param_keys(self) -> list[tuple[int, str]]:
        return [(i, k) for i, layer in enumerate(self.layers) for k in self.TRAINABLE if k in layer]

    def params(self) -> list[np.ndarray]:
        return [self.layers[i][k] for i, k in self.param_keys()]

    def state_keys(self) -> list[tuple[int, str]]:
        order = self.TRAINABLE + ("running_mean", "running_var")
        return [(i, k) for i, layer in enumerate(self.layers) for k in order if k in layer]

    def astype(self, dtype) -> "Mlp":
        self.dtype = np.dtype(dtype)
        for layer in self.layers:
            for k in layer:
                layer[k] = layer[k].astype(self.dtype)
        return self

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def copy(self) -> "Mlp":
        new = object.__new__(Mlp)
        new.__dict__.update(self.__dict__)
        new.hidden = list(self.hidden)
        new.layers = [{k: v.copy() for k, v in layer.items()} for layer in self.layers]
        return new

    # forward / backward --------------------------------------------------

    def forward(self, x: np.ndarray, rng: np.random.Generator | None = None,
                update_stats: bool = True):
        """Return ``(out, cache)``.  In training mode batch statistics are used
        and (when ``update_stats``) folded into the running averages."""
        h = np.asarray(x, dtype=self.dtype)
        cache = []
        n_layers = len(self.layers)
        for i, layer in enumerate(self.layers):
            inp = h
            a = inp @ layer["W"] + layer["b"]
            if i == n_layers - 1:
                cache.append({"inp": inp})
                return a, cache
            c = {"inp": inp}
            if self.batchnorm:
                if self.training:
                    mu = a.mean(axis=0)
                    var = a.var(axis=0)
                    if update_stats:
                        n = a.shape[0]
                        unbiased = var * (n / max(n - 1, 1))
                        layer["running_mean"] *= 1 - BN_MOMENTUM
                        layer["running_mean"] += BN_MOMENTUM * mu.astype(self.dtype)
                        layer["running_var"] *= 1 - BN_MOMENTUM
                        layer["running_var"] += BN_MOMENTUM * unbiased.astype(self.dtype)
                else:
                    mu = layer["running_mean"]
                    var = layer["running_var"]
                inv = 1.0 / np.sqrt(var + BN_EPS)
                xhat = (a - mu) * inv
                c["xhat"] = xhat
                c["inv"] = inv
                a = xhat * layer["gamma"] + layer["beta"]
            c["pre"] = a
            h = np.maximum(a, 0)
            if self.training and self.dropout_p > 0.0:
                if rng is None:
                    raise ValueError("training-mode dropout needs an rng")
                keep = (rng.random(h.shape, dtype=self.dtype) >= self.dtype.type(self.dropout_p)).astype(self.dtype)
                keep /= 1.0 - self.dropout_p
                c["mask"] = keep
                h = h * keep
            cache.append(c)
        raise AssertionError("unreachable")

    def __call__(self, x, rng=None):
        return self.forward(x, rng)[0]

    def backward(self, cache, dout: np.ndarray, param_grads: bool = True):
        """Reverse pass.  Returns ``(grads, dx)``; ``grads`` follows
        :meth:`param_keys` order (``None`` when ``param_grads`` is false)."""
        g = np.asarray(dout, dtype=self.dtype)
        grads = {}
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            c = cache[i]
            if i < len(self.layers) - 1:
                if "mask" in c:
                    g = g * c["mask"]
                g = g * (c["pre"] > 0)
                if self.batchnorm:
                    xhat = c["xhat"]
                    if param_grads:
                        grads[(i, "gamma")] = np.sum(g * xhat, axis=0)
                        grads[(i, "beta")] = g.sum(axis=0)
                    gx = g * layer["gamma"]
                    if self.training:
                        n = gx.shape[0]
                        g = (c["inv"] / n) * (n * gx - gx.sum(axis=0) - xhat * np.sum(gx * xhat, axis=0))
                    else:
                        g = gx * c["inv"]
            if param_grads:
                grads[(i, "W")] = c["inp"].T @ g
                grads[(i, "b")] = g.sum(axis=0)
            g = g @ layer["W"].T
        if not param_grads:
            return None, g
        return [grads[key] for key in self.param_keys()], g

    def calibrate_bn(self, x, chunk: int = 65536):
        """Reset running statistics to the population statistics of ``x``.

        ``x`` is an input array or a zero-argument callable yielding input
        chunks (so large datasets never have to be materialised at once).

        Layers are calibrated front to back, each seeing the eval-mode
        (dropout-free, running-statistic) output of the ones before it, so the
        eval network matches what it was fit on rather than the dropout-noised
        activations seen in training.
        """
        if not self.batchnorm:
            return self
        if callable(x):
            chunks = x
        else:
            arr = np.asarray(x)
            chunks = lambda: (arr[s:s + chunk] for s in range(0, len(arr), chunk))  # noqa: E731
        was_training = self.training
        self.training = False
        for i in range(len(self.layers) - 1):
            total = np.zeros(self.layers[i]["W"].shape[1])
            total2 = np.zeros_like(total)
            n = 0
            for block in chunks():
                h = np.asarray(block, dtype=self.dtype)
                n += len(h)
                for j in range(i):
                    h = self._eval_block(j, h)
                a = (h @ self.layers[i]["W"] + self.layers[i]["b"]).astype(np.float64)
                total += a.sum(axis=0)
                total2 += (a * a).sum(axis=0)
            mean = total / n
            var = np.maximum(total2 / n - mean * mean, 0.0) * (n / max(n - 1, 1))
            self.layers[i]["running_mean"] = mean.astype(self.dtype)
            self.layers[i]["running_var"] = var.astype(self.dtype)
        self.training = was_training
        return self

    def _eval_block(self, i: int, h: np.ndarray) -> np.ndarray:
        layer = self.layers[i]
        a = h @ layer["W"] + layer["b"]
        if self.batchnorm:
            a = (a - layer["running_mean"]) / np.sqrt(layer["running_var"] + BN_EPS) * layer["gamma"] + layer["beta"]
        return np.maximum(a, 0)

    def fused_eval(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Eval-mode affine maps with batch norm folded in (for fast inference)."""
        out = []
        for i, layer in enumerate(self.layers):
            W = layer["W"].astype(np.float64)
            b = layer["b"].astype(np.float64)
            if self.batchnorm and i < len(self.layers) - 1:
                scale = layer["gamma"] / np.sqrt(layer["running_var"].astype(np.float64) + BN_EPS)
                b = (b - layer["running_mean"]) * scale + layer["beta"]
                W = W * scale
            out.append((W, b))
        return out


class Adam:
    """Adam over a list of arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray], lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


class RowAdam:
    """Adam on selected rows of a table; untouched rows keep their state."""

    def __init__(self, table: np.ndarray, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.table = table
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros_like(table)
        self.v = np.zeros_like(table)
        self.t = np.zeros(len(table), dtype=np.int64)

    def step(self, rows: np.ndarray, grads: np.ndarray, lr: float):
        b1, b2 = self.beta1, self.beta2
        self.t[rows] += 1
        t = self.t[rows][:, None]
        self.m[rows] = b1 * self.m[rows] + (1 - b1) * grads
        self.v[rows] = b2 * self.v[rows] + (1 - b2) * grads * grads
        mhat = self.m[rows] / (1 - b1 ** t)
        vhat = self.v[rows] / (1 - b2 ** t)
        self.table[rows] -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(self.table.dtype)


def step_lr(lr0: float, step: int, halve_every: int) -> float:
    """Learning rate after ``step`` optimizer steps: halved every ``halve_every``."""
    return lr0 * 0.5 ** (step // halve_every)
