"""Dense float64 tensor ops with reverse-mode autodiff on a per-sentence tape.

Every model in this package (LSTM LM, RNNG, probes) is expressed with the
small op set below.  Graphs are rebuilt from scratch for each sentence, so
the tape is an append-only list that is discarded after the backward pass.
All values are float64; any non-finite forward output is an error.
"""

from __future__ import annotations

import numpy as np

# Additive log-domain mask for illegal choices.  exp(NEG_MASK - anything
# reasonable) underflows to exactly 0.0, so renormalisation is exact while
# every stored value stays finite.
NEG_MASK = -1e30


class ShapeMismatch(ValueError):
    pass


class NonFiniteValue(FloatingPointError):
    pass


class Node:
    """One entry of the tape: an output value plus its local backward rule."""

    __slots__ = ("value", "parents", "backward_fn", "grad", "param_key")

    def __init__(self, value, parents=(), backward_fn=None, param_key=None):
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.grad = None
        self.param_key = param_key


def _accum(node, g):
    if node.grad is None:
        node.grad = np.zeros_like(node.value)
    node.grad += g


class Tape:
    """Append-only computation graph; topological by construction."""

    def __init__(self):
        self.nodes = []

    def _push(self, value, parents=(), backward_fn=None, param_key=None,
              op_name="op", check_finite=True):
        value = np.asarray(value, dtype=np.float64)
        if check_finite and not np.isfinite(value).all():
            raise NonFiniteValue(f"non-finite output of {op_name}")
        node = Node(value, parents, backward_fn, param_key)
        self.nodes.append(node)
        return node

    # -- graph entry points ------------------------------------------------

    def constant(self, value):
        return self._push(np.asarray(value, dtype=np.float64), op_name="constant")

    def param(self, store, name):
        """Leaf backed by a ParameterStore entry; backward accumulates there."""
        return self._push(store.params[name], param_key=(store, name),
                          op_name="param")

    # -- ops ---------------------------------------------------------------

    def add(self, a, b):
        if a.value.shape != b.value.shape:
            raise ShapeMismatch(f"add: {a.value.shape} vs {b.value.shape}")

        def bwd(g):
            _accum(a, g)
            _accum(b, g)
        return self._push(a.value + b.value, (a, b), bwd, op_name="add")

    def mul(self, a, b):
        if a.value.shape != b.value.shape:
            raise ShapeMismatch(f"mul: {a.value.shape} vs {b.value.shape}")
        av, bv = a.value, b.value

        def bwd(g):
            _accum(a, g * bv)
            _accum(b, g * av)
        return self._push(av * bv, (a, b), bwd, op_name="mul")

    def matvec(self, w, x):
        if w.value.ndim != 2 or x.value.ndim != 1 or w.value.shape[1] != x.value.shape[0]:
            raise ShapeMismatch(f"matvec: {w.value.shape} vs {x.value.shape}")
        wv, xv = w.value, x.value

        def bwd(g):
            _accum(w, np.outer(g, xv))
            _accum(x, wv.T @ g)
        return self._push(wv @ xv, (w, x), bwd, op_name="matvec")

    def concat(self, parts):
        parts = list(parts)
        sizes = [p.value.shape[0] for p in parts]

        def bwd(g):
            off = 0
            for p, n in zip(parts, sizes):
                _accum(p, g[off:off + n])
                off += n
        return self._push(np.concatenate([p.value for p in parts]),
                          tuple(parts), bwd, op_name="concat")

    def narrow(self, x, start, length):
        if start < 0 or start + length > x.value.shape[0]:
            raise ShapeMismatch(
                f"narrow: [{start}:{start + length}] of {x.value.shape}")

        def bwd(g):
            if x.grad is None:
                x.grad = np.zeros_like(x.value)
            x.grad[start:start + length] += g
        return self._push(x.value[start:start + length], (x,), bwd,
                          op_name="narrow")

    def sigmoid(self, x):
        y = 1.0 / (1.0 + np.exp(-x.value))

        def bwd(g):
            _accum(x, g * y * (1.0 - y))
        return self._push(y, (x,), bwd, op_name="sigmoid")

    def tanh(self, x):
        y = np.tanh(x.value)

        def bwd(g):
            _accum(x, g * (1.0 - y * y))
        return self._push(y, (x,), bwd, op_name="tanh")

    def log_softmax(self, x):
        v = x.value
        m = v.max()
        z = v - m
        lse = np.log(np.exp(z).sum())
        y = z - lse
        p = np.exp(y)

        def bwd(g):
            _accum(x, g - p * g.sum())
        return self._push(y, (x,), bwd, op_name="log_softmax")

    def masked_log_softmax(self, x, legal):
        """Log-softmax renormalised over entries where ``legal`` is True.

        Illegal entries receive NEG_MASK in the output and zero gradient.
        """
        legal = np.asarray(legal, dtype=bool)
        if legal.shape != x.value.shape:
            raise ShapeMismatch(f"mask {legal.shape} vs {x.value.shape}")
        if not legal.any():
            raise ValueError("masked_log_softmax: empty legal set")
        v = np.where(legal, x.value, NEG_MASK)
        m = v.max()
        z = v - m
        lse = np.log(np.exp(z).sum())
        y = z - lse
        p = np.where(legal, np.exp(y), 0.0)

        def bwd(g):
            g = np.where(legal, g, 0.0)
            _accum(x, g - p * g.sum())
        return self._push(y, (x,), bwd, op_name="masked_log_softmax")

    def pick(self, x, i):
        if not (0 <= i < x.value.shape[0]):
            raise ShapeMismatch(f"pick: index {i} of {x.value.shape}")

        def bwd(g):
            if x.grad is None:
                x.grad = np.zeros_like(x.value)
            x.grad[i] += g
        return self._push(x.value[i], (x,), bwd, op_name="pick")

    def row(self, w, i):
        if w.value.ndim != 2 or not (0 <= i < w.value.shape[0]):
            raise ShapeMismatch(f"row: index {i} of {w.value.shape}")

        def bwd(g):
            if w.grad is None:
                w.grad = np.zeros_like(w.value)
            w.grad[i] += g
        return self._push(w.value[i].copy(), (w,), bwd, op_name="row")

    def weighted_sum(self, x, weights):
        """Scalar dot product with a constant weight vector."""
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != x.value.shape:
            raise ShapeMismatch(f"weighted_sum: {weights.shape} vs {x.value.shape}")

        def bwd(g):
            _accum(x, g * weights)
        return self._push(np.dot(weights, x.value), (x,), bwd,
                          op_name="weighted_sum")

    def scale(self, x, c):
        c = float(c)

        def bwd(g):
            _accum(x, g * c)
        return self._push(x.value * c, (x,), bwd, op_name="scale")

    def apply_mask(self, x, mask):
        """Elementwise product with a constant mask (inverted dropout)."""
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != x.value.shape:
            raise ShapeMismatch(f"apply_mask: {mask.shape} vs {x.value.shape}")

        def bwd(g):
            _accum(x, g * mask)
        return self._push(x.value * mask, (x,), bwd, op_name="apply_mask")

    def sum(self, x):
        n = x.value.shape

        def bwd(g):
            _accum(x, np.broadcast_to(g, n).astype(np.float64))
        return self._push(x.value.sum(), (x,), bwd, op_name="sum")

    def add_n(self, nodes):
        out = nodes[0]
        for n in nodes[1:]:
            out = self.add(out, n)
        return out

    # -- backward ----------------------------------------------------------

    def backward(self, loss):
        """Reverse sweep from a scalar loss; accumulates into parameter stores."""
        if loss.value.shape != ():
            raise ShapeMismatch(f"backward: loss has shape {loss.value.shape}")
        for n in self.nodes:
            n.grad = None
        loss.grad = np.ones(())
        for node in reversed(self.nodes):
            if node.grad is None:
                continue
            if node.backward_fn is not None:
                node.backward_fn(node.grad)
            elif node.param_key is not None:
                store, name = node.param_key
                store.grads[name] += node.grad


class ParameterStore:
    """Named float64 parameters with matching gradient accumulators."""

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.step = 0

    def add(self, name, shape, rng=None, init_scale=0.1):
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        if rng is None:
            value = np.zeros(shape, dtype=np.float64)
        else:
            value = rng.uniform(-init_scale, init_scale, size=shape)
        self.params[name] = np.asarray(value, dtype=np.float64)
        self.grads[name] = np.zeros(shape, dtype=np.float64)
        return self.params[name]

    def zero_grads(self):
        for g in self.grads.values():
            g.fill(0.0)

    def grad_norm(self):
        total = 0.0
        for g in self.grads.values():
            total += float(np.dot(g.ravel(), g.ravel()))
        return np.sqrt(total)

    def clip_grads(self, max_norm=5.0):
        norm = self.grad_norm()
        if norm > max_norm:
            factor = max_norm / norm
            for g in self.grads.values():
                g *= factor
        return norm

    def sgd_step(self, lr):
        for name, p in self.params.items():
            p -= lr * self.grads[name]
        self.step += 1

    def snapshot(self):
        return {name: p.copy() for name, p in self.params.items()}

    def load(self, params):
        for name, p in params.items():
            self.params[name][...] = p

    def n_scalars(self):
        return sum(p.size for p in self.params.values())


def finite_diff_check(loss_fn, store, eps=1e-5):
    """Max relative error between analytic gradients and central differences.

    ``loss_fn`` builds a fresh tape from the store's current parameters and
    returns the scalar loss node (its tape is reachable through the closure
    or via ``loss_fn`` returning ``(tape, node)``).  Two evaluations must
    agree exactly, otherwise the loss is non-deterministic and the check
    aborts.
    """

    def run():
        out = loss_fn()
        if isinstance(out, tuple):
            return out
        raise TypeError("loss_fn must return (tape, loss_node)")

    tape, loss = run()
    tape2, loss2 = run()
    if float(loss.value) != float(loss2.value):
        raise RuntimeError("finite_diff_check: loss_fn is non-deterministic")

    store.zero_grads()
    tape.backward(loss)
    analytic = {name: g.copy() for name, g in store.grads.items()}

    worst = 0.0
    for name, p in store.params.items():
        flat = p.ravel()
        aflat = analytic[name].ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(run()[1].value)
            flat[i] = orig - eps
            f_minus = float(run()[1].value)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            # floored denominator: components with near-zero gradient are
            # dominated by central-difference round-off, not by real error
            err = abs(aflat[i] - numeric) / max(1e-3, abs(aflat[i]),
                                                abs(numeric))
            if err > worst:
                worst = err
    return worst


def sample_dropout_mask(rng, shape, rate):
    """Inverted-dropout mask: Bernoulli keep mask scaled by 1/(1-rate)."""
    if rate <= 0.0:
        return np.ones(shape, dtype=np.float64)
    keep = rng.random(shape) >= rate
    return keep.astype(np.float64) / (1.0 - rate)
