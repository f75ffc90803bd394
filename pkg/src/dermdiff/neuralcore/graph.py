"""Taped forward/backward composition, parameter store, SGD and gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from dermdiff.neuralcore.ops import ShapeError, primitive_backward, primitive_forward


class ParameterSet:
    """Named parameters with same-shaped additive gradient accumulators."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> None:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already exists")
        v = np.asarray(value, dtype=np.float64)
        if not np.isfinite(v).all():
            raise ValueError(f"parameter {name!r}: non-finite initial value")
        self.params[name] = v
        self.grads[name] = np.zeros_like(v)

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        if name not in self.params:
            raise KeyError(f"unknown parameter {name!r}")
        if grad.shape != self.params[name].shape:
            raise ShapeError(
                f"gradient shape {grad.shape} != parameter {name!r} shape {self.params[name].shape}"
            )
        self.grads[name] += grad

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def names(self) -> list[str]:
        return sorted(self.params)

    def copy(self) -> "ParameterSet":
        other = ParameterSet()
        for name in self.names():
            other.add(name, self.params[name].copy())
        return other

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        """Overwrite existing parameters in place from a name -> array mapping."""
        for name in self.names():
            if name not in values:
                raise KeyError(f"missing value for parameter {name!r}")
            v = np.asarray(values[name], dtype=np.float64)
            if v.shape != self.params[name].shape:
                raise ShapeError(f"value shape {v.shape} != parameter {name!r} shape")
            self.params[name][...] = v

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)


class SgdState:
    """SGD-with-momentum state: one velocity buffer per parameter."""

    def __init__(self, pset: ParameterSet, learning_rate: float, momentum: float = 0.9):
        if learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {learning_rate}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)
        self.velocity = {name: np.zeros_like(p) for name, p in pset.params.items()}


def sgd_step(pset: ParameterSet, state: SgdState) -> None:
    """v' = momentum*v + g; theta' = theta - lr*v'; gradients zeroed afterwards."""
    for name in pset.names():
        g = pset.grads[name]
        if not np.isfinite(g).all():
            raise RuntimeError(f"non-finite gradient for parameter {name!r}")
        v = state.velocity[name]
        v *= state.momentum
        v += g
        pset.params[name] -= state.learning_rate * v
    pset.zero_grads()


def init_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    """Uniform in [-sqrt(1/fan_in), +sqrt(1/fan_in)]."""
    bound = float(np.sqrt(1.0 / max(fan_in, 1)))
    return rng.uniform(-bound, bound, size=shape)


class Var:
    """A value on the tape."""

    __slots__ = ("value", "index", "requires_grad", "grad")

    def __init__(self, value: np.ndarray, index: int, requires_grad: bool = False):
        self.value = value
        self.index = index
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.value.shape


class _Record:
    __slots__ = ("op", "ctx", "backward_fn", "input_indices", "param_names", "out_index")

    def __init__(self, op, ctx, backward_fn, input_indices, param_names, out_index):
        self.op = op
        self.ctx = ctx
        self.backward_fn = backward_fn
        self.input_indices = input_indices
        self.param_names = param_names
        self.out_index = out_index


class Tape:
    """Sequential record of primitive applications with reverse-mode backward.

    Values produced on the tape are treated as immutable; fan-out (a value
    consumed by several later ops) is handled by additive gradient
    accumulation during the reverse sweep.
    """

    def __init__(self, pset: ParameterSet | None = None):
        self.pset = pset
        self._records: list[_Record] = []
        self._vars: list[Var] = []

    def input(self, value, requires_grad: bool = False) -> Var:
        v = np.asarray(value, dtype=np.float64)
        if not np.isfinite(v).all():
            raise ValueError("tape input contains non-finite values")
        var = Var(v, len(self._vars), requires_grad)
        self._vars.append(var)
        return var

    def _param_arrays(self, names: Sequence[str]) -> list[np.ndarray]:
        if names and self.pset is None:
            raise ValueError("tape has no ParameterSet but parameters were requested")
        return [self.pset.params[n] for n in names]

    def apply(self, op: str, inputs, params: Sequence[str] = (), **attrs) -> Var:
        if isinstance(inputs, Var):
            inputs = [inputs]
        if isinstance(params, str):
            params = (params,)
        values = [v.value for v in inputs]
        out, ctx = primitive_forward(op, values, self._param_arrays(params), **attrs)
        var = Var(out, len(self._vars))
        self._vars.append(var)
        self._records.append(
            _Record(op, ctx, None, [v.index for v in inputs], tuple(params), var.index)
        )
        return var

    def custom(
        self,
        inputs: Sequence[Var],
        value: np.ndarray,
        backward: Callable[[np.ndarray], Sequence[np.ndarray]],
        param_names: Sequence[str] = (),
        param_backward: Callable[[np.ndarray], Sequence[np.ndarray]] | None = None,
    ) -> Var:
        """Record a non-primitive step with a hand-written backward closure.

        `backward(gy)` returns one gradient per input; `param_backward(gy)`,
        when given, returns one gradient per entry of `param_names`.
        """
        v = np.asarray(value, dtype=np.float64)
        if not np.isfinite(v).all():
            raise ValueError("custom step produced non-finite values")
        var = Var(v, len(self._vars))
        self._vars.append(var)

        def bwd(gy):
            in_grads = list(backward(gy))
            p_grads = list(param_backward(gy)) if param_backward is not None else []
            return in_grads, p_grads

        self._records.append(
            _Record("custom", None, bwd, [x.index for x in inputs], tuple(param_names), var.index)
        )
        return var

    def backward(self, out: Var, seed=1.0) -> None:
        """Reverse sweep from `out`; accumulates into pset.grads and input .grad."""
        seed_arr = np.asarray(seed, dtype=np.float64)
        if seed_arr.shape != out.value.shape:
            if seed_arr.ndim == 0:
                seed_arr = np.full(out.value.shape, float(seed_arr))
            else:
                raise ShapeError(f"seed shape {seed_arr.shape} != output shape {out.value.shape}")
        grad_map: dict[int, np.ndarray] = {out.index: seed_arr}
        for rec in reversed(self._records):
            gy = grad_map.pop(rec.out_index, None)
            if gy is None:
                continue
            if rec.backward_fn is not None:
                in_grads, p_grads = rec.backward_fn(gy)
            else:
                in_grads, p_grads = primitive_backward(rec.op, rec.ctx, gy)
            for idx, g in zip(rec.input_indices, in_grads):
                if g is None:
                    continue
                if idx in grad_map:
                    grad_map[idx] = grad_map[idx] + g
                else:
                    grad_map[idx] = g
            for name, g in zip(rec.param_names, p_grads):
                self.pset.accumulate(name, g)
        for var in self._vars:
            if var.requires_grad and var.index in grad_map:
                var.grad = grad_map[var.index] if var.grad is None else var.grad + grad_map[var.index]


class GradientCheckReport:
    """Per-parameter max relative error of reverse-mode vs central differences."""

    def __init__(self, tolerance: float):
        self.tolerance = float(tolerance)
        self.entries: dict[str, float] = {}

    def record(self, name: str, err: float) -> None:
        self.entries[name] = max(err, self.entries.get(name, 0.0))

    @property
    def max_rel_err(self) -> float:
        return max(self.entries.values()) if self.entries else 0.0

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.entries.items() if v >= self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def __repr__(self) -> str:
        worst = sorted(self.entries.items(), key=lambda kv: -kv[1])[:4]
        body = ", ".join(f"{k}={v:.3g}" for k, v in worst)
        return f"GradientCheckReport(max={self.max_rel_err:.3g}, tol={self.tolerance:g}, worst: {body})"


def _rel_err(a: float, f: float) -> float:
    return abs(a - f) / max(abs(a), abs(f), 1.0)


def gradient_check(
    fragment: Callable,
    pset: ParameterSet,
    inputs: Sequence[np.ndarray],
    tolerance: float = 1e-6,
    h: float = 1e-5,
) -> GradientCheckReport:
    """Compare analytic gradients of a scalar-valued fragment to central differences.

    `fragment(pset, inputs)` must return (loss, param_grads, input_grads) where
    param_grads maps parameter names to arrays and input_grads is one array per
    input.  Every parameter and input coordinate is perturbed, so keep
    fragments small.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    _, param_grads, input_grads = fragment(pset, inputs)
    report = GradientCheckReport(tolerance)

    def loss_only():
        value, _, _ = fragment(pset, inputs)
        return float(value)

    for name in pset.names():
        p = pset.params[name]
        analytic = param_grads.get(name)
        if analytic is None:
            raise KeyError(f"fragment returned no gradient for parameter {name!r}")
        flat = p.reshape(-1)
        aflat = np.asarray(analytic, dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = loss_only()
            flat[i] = keep - h
            down = loss_only()
            flat[i] = keep
            report.record(name, _rel_err(aflat[i], (up - down) / (2 * h)))
    for j, x in enumerate(inputs):
        flat = x.reshape(-1)
        aflat = np.asarray(input_grads[j], dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = loss_only()
            flat[i] = keep - h
            down = loss_only()
            flat[i] = keep
            report.record(f"input[{j}]", _rel_err(aflat[i], (up - down) / (2 * h)))
    return report
