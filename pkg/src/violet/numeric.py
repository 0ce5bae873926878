"""Dense float64 primitives, hand-written backward rules, AdamW and a
finite-difference gradient checker.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  Every
differentiable primitive comes as a ``*_forward`` returning ``(out, cache)``
and a matching ``*_backward`` consuming the upstream gradient and the cache.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    pass


class UndefinedLossError(ValueError):
    pass


class EvaluationError(RuntimeError):
    pass


def as_tensor(x):
    return np.asarray(x, dtype=np.float64)


# --------------------------------------------------------------------------
# products and shape plumbing


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def concat_features(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"row mismatch: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1)


# --------------------------------------------------------------------------
# nonlinearities


def softmax_rows(x):
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {x.shape}")
    return _kernels.softmax_rows(np.ascontiguousarray(x))


def softmax_rows_backward(p, dp):
    """Gradient w.r.t. the softmax input given the output ``p``."""
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


def sigmoid(x):
    x = as_tensor(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gelu_forward(x):
    return _kernels.gelu_fwd(x), x


def gelu_backward(dy, cache):
    return _kernels.gelu_bwd(cache, dy)


def layer_norm_forward(x, gain, bias, eps=1e-5):
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.ascontiguousarray(as_tensor(x))
    y, xhat, rstd = _kernels.layer_norm_fwd(x, as_tensor(gain), as_tensor(bias), float(eps))
    return y, (xhat, rstd, gain)


def layer_norm_backward(dy, cache):
    xhat, rstd, gain = cache
    return _kernels.layer_norm_bwd(np.ascontiguousarray(dy), xhat, rstd, as_tensor(gain))


def layer_norm(x, gain, bias, eps=1e-5):
    return layer_norm_forward(x, gain, bias, eps)[0]


def linear_forward(x, w, b=None):
    y = matmul(x, w)
    if b is not None:
        y = y + b
    return y, x


def linear_backward(dy, x, w, with_bias=True):
    """Returns ``(dx, dw, db)``; ``db`` is None when ``with_bias`` is false."""
    dx = dy @ w.T
    dw = x.T @ dy
    db = dy.sum(axis=0) if with_bias else None
    return dx, dw, db


# --------------------------------------------------------------------------
# loss


def _ce_parts(logits, targets, ignore_id):
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} vs targets {targets.shape}")
    keep = targets != ignore_id
    n = int(keep.sum())
    if n == 0:
        raise UndefinedLossError("every target position is ignored")
    if np.any((targets[keep] < 0) | (targets[keep] >= logits.shape[1])):
        raise ValueError("target id out of range")
    z = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    return logp, targets, keep, n


def cross_entropy(logits, targets, ignore_id=-100):
    """Mean negative log-likelihood over the non-ignored positions."""
    logp, targets, keep, n = _ce_parts(logits, targets, ignore_id)
    rows = np.nonzero(keep)[0]
    return float(-logp[rows, targets[rows]].sum() / n)


def cross_entropy_forward(logits, targets, ignore_id=-100):
    logp, targets, keep, n = _ce_parts(logits, targets, ignore_id)
    rows = np.nonzero(keep)[0]
    loss = float(-logp[rows, targets[rows]].sum() / n)
    return loss, (logp, targets, rows, n)


def cross_entropy_backward(cache, scale=1.0):
    logp, targets, rows, n = cache
    d = np.zeros_like(logp)
    d[rows] = np.exp(logp[rows])
    d[rows, targets[rows]] -= 1.0
    return d * (scale / n)


# --------------------------------------------------------------------------
# parameters and optimizer


@dataclass
class ParamEntry:
    value: np.ndarray
    grad: np.ndarray
    frozen: bool = False
    m: np.ndarray = None
    v: np.ndarray = None
    step: int = 0

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros_like(self.value)
        if self.v is None:
            self.v = np.zeros_like(self.value)


class ParamStore:
    """Named parameters with gradient accumulators, freeze flags and AdamW moments.

    Insertion order is preserved and is the canonical order for
    serialization and reductions.
    """

    def __init__(self):
        self.entries = {}

    def add(self, name, value, frozen=False):
        if name in self.entries:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        self.entries[name] = ParamEntry(value=value, grad=np.zeros_like(value), frozen=frozen)
        return value

    def __getitem__(self, name):
        return self.entries[name].value

    def __contains__(self, name):
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def names(self, prefix="", trainable_only=False):
        return [
            k
            for k, e in self.entries.items()
            if k.startswith(prefix) and not (trainable_only and e.frozen)
        ]

    def set_frozen(self, prefix, frozen=True):
        for k in self.names(prefix):
            self.entries[k].frozen = frozen

    def frozen_names(self):
        return [k for k, e in self.entries.items() if e.frozen]

    def accumulate(self, grads, scale=1.0):
        for k, g in grads.items():
            e = self.entries[k]
            if g.shape != e.value.shape:
                raise ShapeError(f"gradient for {k} has shape {g.shape}, expected {e.value.shape}")
            e.grad += scale * g

    def zero_grad(self):
        for e in self.entries.values():
            e.grad.fill(0.0)

    def num_params(self):
        return int(sum(e.value.size for e in self.entries.values()))

    def copy(self):
        out = ParamStore()
        for k, e in self.entries.items():
            out.entries[k] = ParamEntry(
                value=e.value.copy(),
                grad=e.grad.copy(),
                frozen=e.frozen,
                m=e.m.copy(),
                v=e.v.copy(),
                step=e.step,
            )
        return out


@dataclass(frozen=True)
class OptimHyper:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


def adamw_step(store, hyper):
    """One AdamW update over every non-frozen entry; clears all gradients."""
    lr = hyper.learning_rate
    for e in store.entries.values():
        if e.frozen:
            e.grad.fill(0.0)
            continue
        e.step += 1
        g = e.grad
        if hyper.weight_decay:
            e.value *= 1.0 - lr * hyper.weight_decay
        e.m *= hyper.beta1
        e.m += (1.0 - hyper.beta1) * g
        e.v *= hyper.beta2
        e.v += (1.0 - hyper.beta2) * g * g
        mhat = e.m / (1.0 - hyper.beta1**e.step)
        vhat = e.v / (1.0 - hyper.beta2**e.step)
        e.value -= lr * mhat / (np.sqrt(vhat) + hyper.epsilon)
        g.fill(0.0)
    return store


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    tol: float
    max_rel_error: dict = field(default_factory=dict)
    checked: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)

    @property
    def passed(self):
        return not self.failures

    def worst(self):
        if not self.max_rel_error:
            return 0.0
        return max(self.max_rel_error.values())

    def to_dict(self):
        return {
            "tol": self.tol,
            "passed": self.passed,
            "max_rel_error": dict(self.max_rel_error),
            "checked": dict(self.checked),
            "failures": {k: list(v) for k, v in self.failures.items()},
        }


def relative_error(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def grad_check(loss_and_grad, store, step_h=1e-5, tol=1e-4, names=None, max_entries=None, rng=None):
    """Compare analytic gradients against central differences.

    ``loss_and_grad()`` reads the current values in ``store`` and returns
    ``(loss, grads)`` with ``grads`` a dict keyed by parameter name.  Values
    are perturbed in place and restored exactly.  With ``max_entries`` set,
    at most that many elements per parameter are sampled using ``rng``.
    """
    loss, grads = loss_and_grad()
    if not np.isfinite(loss):
        raise EvaluationError(f"non-finite loss {loss}")
    if names is None:
        names = store.names(trainable_only=True)
    report = GradCheckReport(tol=tol)
    for name in names:
        value = store[name]
        analytic = grads.get(name)
        if analytic is None:
            analytic = np.zeros_like(value)
        flat = value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng if rng is not None else np.random.default_rng(0)
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        a_flat = analytic.reshape(-1)
        worst = 0.0
        bad = []
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step_h
            fp = loss_and_grad()[0]
            flat[i] = orig - step_h
            fm = loss_and_grad()[0]
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise EvaluationError(f"non-finite loss while perturbing {name}[{i}]")
            num = (fp - fm) / (2.0 * step_h)
            err = float(relative_error(a_flat[i], num))
            worst = max(worst, err)
            if err > tol:
                bad.append(int(i))
        report.max_rel_error[name] = worst
        report.checked[name] = int(len(idx))
        if bad:
            report.failures[name] = bad
    return report
