"""Parameter registry, Adam, and the finite-difference gradient verifier."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, backward, no_grad
from .errors import MissingGradient, NonFiniteLoss, ShapeMismatch


class ParamRegistry:
    """Ordered map from dotted parameter name to (Tensor, trainable flag).

    Iteration is always lexicographic by name so every consumer sees the
    same deterministic order.
    """

    def __init__(self):
        self._params = {}
        self._trainable = {}

    def add(self, name, tensor, trainable):
        if name in self._params:
            raise ValueError(f"duplicate parameter name '{name}'")
        tensor.requires_grad = bool(trainable)
        self._params[name] = tensor
        self._trainable[name] = bool(trainable)

    def remove(self, name):
        del self._params[name]
        del self._trainable[name]

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name):
        return self._params[name]

    def __len__(self):
        return len(self._params)

    def is_trainable(self, name):
        return self._trainable[name]

    def names(self):
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name], self._trainable[name]

    def trainable_items(self):
        for name, t, tr in self.items():
            if tr:
                yield name, t

    def zero_grad(self):
        for _, t, _ in self.items():
            t.grad = None


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.lr > 0 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1
                and self.eps > 0):
            raise ValueError("invalid Adam hyperparameters")


def adam_step(registry, state):
    """One bias-corrected Adam update over the trainable parameters.

    Requires every trainable parameter to hold a gradient; clears gradients
    afterwards.  Frozen parameters are untouched.
    """
    updates = []
    for name, p in registry.trainable_items():
        if p.grad is None:
            raise MissingGradient(f"no gradient for trainable parameter '{name}'")
        if p.grad.shape != p.data.shape:
            raise ShapeMismatch(f"gradient shape for '{name}'")
        updates.append((name, p))

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in updates:
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.grad = None


@dataclass
class CheckReport:
    max_rel_err: dict
    tol: float

    @property
    def passed(self):
        return all(e < self.tol for e in self.max_rel_err.values())

    def worst(self):
        if not self.max_rel_err:
            return None, 0.0
        name = max(self.max_rel_err, key=self.max_rel_err.get)
        return name, self.max_rel_err[name]


def finite_diff_check(loss_fn, registry, h=1e-5, tol=1e-4, seed=0,
                      max_coords=32, param_names=None):
    """Compare analytic gradients against central finite differences.

    `loss_fn` must be a deterministic function of the registry's current
    parameter values returning a scalar Tensor.  Per trainable parameter,
    min(max_coords, numel) coordinates are sampled with a seeded RNG and
    perturbed by +/-h.  Relative error uses max(|analytic|, |numeric|, 1)
    as the denominator so near-zero gradients compare absolutely.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    registry.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise NonFiniteLoss("loss_fn returned a non-finite value")
    backward(loss)

    rng = np.random.default_rng(seed)
    report = {}
    names = list(param_names) if param_names is not None else \
        [n for n, _ in registry.trainable_items()]
    for name in names:
        p = registry[name]
        flat = p.data.reshape(-1)
        analytic = (p.grad if p.grad is not None
                    else np.zeros_like(p.data)).reshape(-1)
        n = flat.size
        coords = rng.choice(n, size=min(max_coords, n), replace=False)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            with no_grad():
                lp = loss_fn().item()
            flat[c] = orig - h
            with no_grad():
                lm = loss_fn().item()
            flat[c] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NonFiniteLoss(f"non-finite loss while perturbing '{name}'")
            fd = (lp - lm) / (2.0 * h)
            a = analytic[c]
            err = abs(a - fd) / max(abs(a), abs(fd), 1.0)
            worst = max(worst, err)
        report[name] = worst
    return CheckReport(max_rel_err=report, tol=tol)
