"""Parameter containers, the backprop entry point and finite-difference checks."""

from collections.abc import MutableMapping
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, StateError


class ParamSet(MutableMapping):
    """Name -> array mapping that always iterates in sorted-name order."""

    def __init__(self, items=None):
        self._data = {}
        if items:
            for k, v in dict(items).items():
                self[k] = v

    def __getitem__(self, key):
        return self._data[key]

    def __setitem__(self, key, value):
        self._data[key] = np.asarray(value)

    def __delitem__(self, key):
        del self._data[key]

    def __iter__(self):
        return iter(sorted(self._data))

    def __len__(self):
        return len(self._data)

    def __repr__(self):
        inner = ", ".join(f"{k}: {self._data[k].shape}" for k in self)
        return f"ParamSet({{{inner}}})"

    def copy(self):
        return ParamSet({k: v.copy() for k, v in self.items()})

    def zeros_like(self):
        return ParamSet({k: np.zeros_like(v) for k, v in self.items()})

    def all_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.values())

    def validate(self):
        bad = [k for k, v in self.items() if not np.all(np.isfinite(v))]
        if bad:
            raise NumericalError(f"non-finite values in parameters: {', '.join(bad)}")

    def astype(self, dtype):
        return ParamSet({k: v.astype(dtype) for k, v in self.items()})


def backprop(state, cotangent=1.0):
    """Gradients of ``cotangent * final_loss`` w.r.t. every parameter.

    ``state`` is the forward state returned by ``TeSNet.forward``.
    """
    if state is None or getattr(state, "caches", None) is None:
        raise StateError("backprop needs a completed forward pass with cached intermediates")
    return state.network.backward(state, cotangent)


def rel_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.longdouble)
    b = np.asarray(b, dtype=np.longdouble)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@dataclass
class FDReport:
    max_rel_err: dict = field(default_factory=dict)
    tol: float = 1e-5

    @property
    def passed(self):
        return all(v < self.tol for v in self.max_rel_err.values())

    @property
    def worst(self):
        return max(self.max_rel_err.values(), default=0.0)

    def lines(self):
        out = []
        for name, err in self.max_rel_err.items():
            out.append(f"{name:<16s} max_rel_err={err:.3e} {'PASS' if err < self.tol else 'FAIL'}")
        out.append("PASS" if self.passed else "FAIL")
        return out


def numerical_grad(f, p, h=1e-5, oracle_dtype=None):
    """Central differences of scalar ``f(ParamSet)`` for every entry of ``p``.

    ``oracle_dtype`` (e.g. ``np.longdouble``) evaluates ``f`` at a wider
    precision than ``p`` so that round-off does not swamp small components.
    """
    if not h > 0:
        raise NumericalError(f"finite-difference step must be > 0, got {h}")
    work = p.copy() if oracle_dtype is None else p.astype(oracle_dtype)
    out = ParamSet()
    for name in work:
        arr = work[name]
        g = np.zeros(arr.shape, dtype=arr.dtype)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(work)
            flat[i] = orig - h
            fm = f(work)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericalError(f"objective is not finite while perturbing {name}[{i}]")
            g.reshape(-1)[i] = (fp - fm) / (2.0 * h)
        out[name] = g
    return out


def fd_check(f, p, grads, h=1e-5, tol=1e-5, oracle_dtype=None):
    """Compare analytic ``grads`` against central differences of ``f`` at ``p``.

    Relative error per entry is ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    numeric = numerical_grad(f, p, h, oracle_dtype)
    report = FDReport(tol=tol)
    for name in p:
        err = rel_error(numeric[name], grads[name])
        report.max_rel_err[name] = float(err.max()) if err.size else 0.0
    return report
