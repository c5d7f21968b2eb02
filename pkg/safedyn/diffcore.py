"""
Minimal reverse-mode automatic differentiation over dense float64 arrays.

A Tape is built once (define-then-run): inputs are registered by name and shape,
operations append nodes in topological order. `forward` binds values to the inputs and
evaluates every node, `backward` sweeps the node list in reverse and returns the gradient
of a scalar output with respect to every registered input.

Broadcasting is limited to scalar operands and row-vector operands against matrices
(bias addition).
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import BackwardError, BindingError, DomainError, ShapeError
from .utils import DTYPE

logger = logging.getLogger(__name__)

OP_KINDS = ("input", "const", "add", "sub", "mul", "matmul", "tanh", "exp", "log", "sum", "max",
            "affine", "gaussian_logpdf", "softplus", "sigmoid", "clip")

_LOG_2PI = np.log(2.0 * np.pi)


class Node:
    """
    One vertex of a tape.

    Attributes:
        kind (str): Op kind, one of OP_KINDS.
        operands (tuple): Operand nodes, all earlier on the same tape.
        shape (tuple): Shape of the forward value, fixed at construction.
        value (np.ndarray): Cached forward value, None before the first forward pass.
        adjoint (np.ndarray): Cached adjoint, None until a backward pass reached the node.
    """

    __slots__ = ("tape", "index", "kind", "operands", "shape", "attrs", "name", "value", "adjoint", "requires_grad")

    # keeps numpy from broadcasting `ndarray + node` into an object array
    __array_ufunc__ = None

    def __init__(self, tape, index, kind, operands, shape, attrs=None, name=None):
        self.tape = tape
        self.index = index
        self.kind = kind
        self.operands = tuple(operands)
        self.shape = tuple(shape)
        self.attrs = attrs or {}
        self.name = name
        self.value = None
        self.adjoint = None
        self.requires_grad = kind == "input" or any(op.requires_grad for op in self.operands)

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Node({self.index}:{self.kind}{label} shape={self.shape})"

    # Operator sugar; plain numbers and arrays become constants on the same tape.
    def __add__(self, other):
        return self.tape.add(self, other)

    def __radd__(self, other):
        return self.tape.add(other, self)

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.sub(other, self)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    def __rmul__(self, other):
        return self.tape.mul(other, self)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)


def _broadcast_shape(kind, a, b):
    if a == b:
        return a
    if a == ():
        return b
    if b == ():
        return a
    if len(a) == 2 and len(b) == 1 and a[1] == b[0]:
        return a
    if len(b) == 2 and len(a) == 1 and b[1] == a[0]:
        return b
    raise ShapeError(f"{kind}: cannot combine shapes {a} and {b}")


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    return grad.sum(axis=0)


def _matmul_shape(a, b):
    if len(a) == 2 and len(b) == 2 and a[1] == b[0]:
        return (a[0], b[1])
    if len(a) == 2 and len(b) == 1 and a[1] == b[0]:
        return (a[0],)
    if len(a) == 1 and len(b) == 2 and a[0] == b[0]:
        return (b[1],)
    raise ShapeError(f"matmul: incompatible shapes {a} and {b}")


def _matmul_vjp(g, a, b, needs):
    ga = gb = None
    if a.ndim == 2 and b.ndim == 2:
        if needs[0]:
            ga = g @ b.T
        if needs[1]:
            gb = a.T @ g
    elif a.ndim == 2:
        if needs[0]:
            ga = np.outer(g, b)
        if needs[1]:
            gb = a.T @ g
    else:
        if needs[0]:
            ga = b @ g
        if needs[1]:
            gb = np.outer(a, g)
    return ga, gb


def _forward_log(node, x):
    if np.any(x <= 0.0):
        raise DomainError(f"log evaluated at non-positive value (min {np.min(x)!r}) in {node!r}")
    return np.log(x)


def _forward_gaussian_logpdf(node, x, mean, logvar):
    diff = x - mean
    return np.asarray(-0.5 * np.sum(_LOG_2PI + logvar + diff * diff * np.exp(-logvar)))


def _vjp_gaussian_logpdf(node, g, needs, x, mean, logvar):
    diff = x - mean
    inv_var = np.exp(-logvar)
    gx = -diff * inv_var * g
    gl = -0.5 * (1.0 - diff * diff * inv_var) * g if needs[2] else None
    return (gx if needs[0] else None, -gx if needs[1] else None, gl)


def _vjp_max(node, g, needs, a, b):
    # ties route the full adjoint to the first operand
    first = a >= b
    ga = _unbroadcast(np.where(first, g, 0.0), a.shape) if needs[0] else None
    gb = _unbroadcast(np.where(first, 0.0, g), b.shape) if needs[1] else None
    return ga, gb


def _vjp_affine(node, g, needs, x, w, b):
    gx, gw = _matmul_vjp(g, x, w, needs[:2])
    gb = _unbroadcast(g, b.shape) if needs[2] else None
    return gx, gw, gb


_FORWARD = {
    "add": lambda node, a, b: a + b,
    "sub": lambda node, a, b: a - b,
    "mul": lambda node, a, b: a * b,
    "matmul": lambda node, a, b: a @ b,
    "tanh": lambda node, x: np.tanh(x),
    "exp": lambda node, x: np.exp(x),
    "log": _forward_log,
    "sum": lambda node, x: np.asarray(np.sum(x)),
    "max": lambda node, a, b: np.maximum(a, b),
    "affine": lambda node, x, w, b: x @ w + b,
    "gaussian_logpdf": _forward_gaussian_logpdf,
    "softplus": lambda node, x: np.logaddexp(0.0, x),
    "sigmoid": lambda node, x: expit(x),
    "clip": lambda node, x: np.clip(x, node.attrs["lo"], node.attrs["hi"]),
}

# Vector-Jacobian products: (node, upstream adjoint, needs, *operand values) -> operand adjoints.
_VJP = {
    "add": lambda node, g, needs, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    "sub": lambda node, g, needs, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    "mul": lambda node, g, needs, a, b: (_unbroadcast(g * b, a.shape) if needs[0] else None,
                                         _unbroadcast(g * a, b.shape) if needs[1] else None),
    "matmul": lambda node, g, needs, a, b: _matmul_vjp(g, a, b, needs),
    "tanh": lambda node, g, needs, x: (g * (1.0 - node.value * node.value),),
    "exp": lambda node, g, needs, x: (g * node.value,),
    "log": lambda node, g, needs, x: (g / x,),
    "sum": lambda node, g, needs, x: (np.full(x.shape, g, dtype=DTYPE),),
    "max": _vjp_max,
    "affine": _vjp_affine,
    "gaussian_logpdf": _vjp_gaussian_logpdf,
    "softplus": lambda node, g, needs, x: (g * expit(x),),
    "sigmoid": lambda node, g, needs, x: (g * node.value * (1.0 - node.value),),
    "clip": lambda node, g, needs, x: (g * ((x >= node.attrs["lo"]) & (x <= node.attrs["hi"])),),
}


class Tape:
    """
    Topologically ordered computation graph with named inputs and named scalar outputs.

    Attributes:
        nodes (list): Nodes in construction order; every operand precedes its consumer.
        inputs (dict): Input name -> input node.
        outputs (dict): Output name -> node. `output` is the default one.
        meta (dict): Free-form annotations of the builder (e.g. per-step nodes of a rollout).
    """

    def __init__(self, name="tape"):
        self.name = name
        self.nodes = []
        self.inputs = {}
        self.outputs = {}
        self.output = None
        self.meta = {}
        self.evaluated = False

    def __len__(self):
        return len(self.nodes)

    def _push(self, kind, operands, shape, attrs=None, name=None):
        node = Node(self, len(self.nodes), kind, operands, shape, attrs, name)
        self.nodes.append(node)
        return node

    def _lift(self, x):
        if isinstance(x, Node):
            if x.tape is not self:
                raise ShapeError(f"operand {x!r} belongs to another tape")
            return x
        return self.const(x)

    def input(self, name, shape):
        if name in self.inputs:
            raise BindingError(f"input {name!r} registered twice on {self.name}")
        node = self._push("input", (), shape, name=name)
        self.inputs[name] = node
        return node

    def const(self, value, name=None):
        value = np.array(value, dtype=DTYPE)
        node = self._push("const", (), value.shape, name=name)
        node.value = value
        return node

    def _binary(self, kind, a, b):
        a, b = self._lift(a), self._lift(b)
        return self._push(kind, (a, b), _broadcast_shape(kind, a.shape, b.shape))

    def _unary(self, kind, x, attrs=None):
        x = self._lift(x)
        return self._push(kind, (x,), x.shape, attrs)

    def add(self, a, b):
        return self._binary("add", a, b)

    def sub(self, a, b):
        return self._binary("sub", a, b)

    def mul(self, a, b):
        return self._binary("mul", a, b)

    def max(self, a, b):
        return self._binary("max", a, b)

    def matmul(self, a, b):
        a, b = self._lift(a), self._lift(b)
        return self._push("matmul", (a, b), _matmul_shape(a.shape, b.shape))

    def affine(self, x, w, b):
        x, w, b = self._lift(x), self._lift(w), self._lift(b)
        shape = _matmul_shape(x.shape, w.shape)
        if b.shape != shape[-1:]:
            raise ShapeError(f"affine: bias shape {b.shape} does not match output columns {shape[-1:]}")
        return self._push("affine", (x, w, b), shape)

    def tanh(self, x):
        return self._unary("tanh", x)

    def exp(self, x):
        return self._unary("exp", x)

    def log(self, x):
        return self._unary("log", x)

    def softplus(self, x):
        return self._unary("softplus", x)

    def sigmoid(self, x):
        return self._unary("sigmoid", x)

    def clip(self, x, lo, hi):
        lo, hi = np.asarray(lo, dtype=DTYPE), np.asarray(hi, dtype=DTYPE)
        if np.any(lo >= hi):
            raise ShapeError("clip: lower bound must be below upper bound")
        return self._unary("clip", x, {"lo": lo, "hi": hi})

    def sum(self, x):
        x = self._lift(x)
        return self._push("sum", (x,), ())

    def gaussian_logpdf(self, x, mean, logvar):
        """Sum over all entries of log N(x; mean, exp(logvar)); operands share one shape."""
        x, mean, logvar = self._lift(x), self._lift(mean), self._lift(logvar)
        if not (x.shape == mean.shape == logvar.shape):
            raise ShapeError(f"gaussian_logpdf: shapes {x.shape}, {mean.shape}, {logvar.shape} differ")
        return self._push("gaussian_logpdf", (x, mean, logvar), ())

    def mark_output(self, node, name="output"):
        """Registers a named output; the first one marked becomes the default output."""
        self.outputs[name] = node
        if self.output is None:
            self.output = node
        return node

    def value(self, name="output"):
        """Cached forward value of a named output."""
        if not self.evaluated:
            raise BackwardError(f"{self.name} has not been evaluated")
        if name in self.outputs:
            return self.outputs[name].value
        if name == "output" and self.output is not None:
            return self.output.value
        raise KeyError(f"{self.name} has no output {name!r}")


def forward(tape, inputs):
    """
    Binds the inputs and evaluates every node of the tape.

    Args:
        tape (Tape): The tape to evaluate.
        inputs (dict): Input name -> array. Every registered input must be bound with its registered shape.

    Returns:
        np.ndarray: The value of the default output node (None if no output was marked).

    Raises:
        BindingError: Unbound, unknown or mis-shaped inputs.
        DomainError: log evaluated at x <= 0.
    """
    unknown = set(inputs) - set(tape.inputs)
    if unknown:
        raise BindingError(f"unknown inputs for {tape.name}: {sorted(unknown)}")
    for name, node in tape.inputs.items():
        if name not in inputs:
            raise BindingError(f"input {name!r} of {tape.name} is not bound")
        value = np.asarray(inputs[name], dtype=DTYPE)
        if value.shape != node.shape:
            raise BindingError(f"input {name!r} bound with shape {value.shape}, registered {node.shape}")
        node.value = value

    tape.evaluated = False
    for node in tape.nodes:
        if node.kind in ("input", "const"):
            continue
        node.value = _FORWARD[node.kind](node, *(op.value for op in node.operands))
    tape.evaluated = True
    return None if tape.output is None else tape.output.value


def backward(tape, output=None):
    """
    Reverse sweep from a scalar output.

    Args:
        tape (Tape): A tape evaluated by `forward` with the current bindings.
        output (str, optional): Name of the output to differentiate. Defaults to the tape's default output.

    Returns:
        dict: Input name -> gradient array (zeros for inputs the output does not depend on).

    Raises:
        BackwardError: If the tape was not evaluated or the output is not a scalar.
    """
    if not tape.evaluated:
        raise BackwardError(f"backward called before forward on {tape.name}")
    root = tape.output if output is None else tape.outputs.get(output)
    if root is None:
        raise BackwardError(f"{tape.name} has no output {output!r}")
    if root.shape != ():
        raise BackwardError(f"backward needs a scalar output, got shape {root.shape}")

    for node in tape.nodes:
        node.adjoint = None
    root.adjoint = np.asarray(1.0, dtype=DTYPE)

    for node in reversed(tape.nodes[:root.index + 1]):
        if node.adjoint is None or not node.operands:
            continue
        needs = tuple(op.requires_grad for op in node.operands)
        if not any(needs):
            continue
        grads = _VJP[node.kind](node, node.adjoint, needs, *(op.value for op in node.operands))
        for op, grad, need in zip(node.operands, grads, needs):
            if not need or grad is None:
                continue
            op.adjoint = grad if op.adjoint is None else op.adjoint + grad

    return {name: (np.zeros(node.shape, dtype=DTYPE) if node.adjoint is None else np.array(node.adjoint, dtype=DTYPE))
            for name, node in tape.inputs.items()}


@dataclass
class GradCheckReport:
    """
    Outcome of a finite-difference gradient check.

    Attributes:
        passed (bool): True if every coordinate is within tolerance.
        max_error (float): Largest relative error found.
        worst_input (str): Input holding the worst coordinate.
        worst_index (tuple): Index of the worst coordinate inside that input.
        checked (int): Number of coordinates compared.
    """
    passed: bool
    max_error: float
    worst_input: str
    worst_index: tuple
    checked: int


def grad_check(tape, inputs, h=1e-5, tol=1e-4, atol=1e-8, output=None):
    """
    Compares backward gradients against central finite differences, coordinate by coordinate.

    The relative error of a coordinate is |analytic - numeric| / max(|analytic|, |numeric|, atol).

    Returns:
        GradCheckReport: Failures are reported, never raised.
    """
    if h <= 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    inputs = {name: np.array(value, dtype=DTYPE) for name, value in inputs.items()}
    forward(tape, inputs)
    analytic = backward(tape, output)
    root = tape.output if output is None else tape.outputs[output]

    worst = (0.0, None, ())
    checked = 0
    for name, base in inputs.items():
        for idx in np.ndindex(base.shape):
            shifted_inputs = dict(inputs)
            shifted = base.copy()
            shifted[idx] = base[idx] + h
            shifted_inputs[name] = shifted
            forward(tape, shifted_inputs)
            up = float(root.value)
            shifted[idx] = base[idx] - h
            forward(tape, shifted_inputs)
            down = float(root.value)
            numeric = (up - down) / (2.0 * h)
            exact = float(analytic[name][idx])
            err = abs(exact - numeric) / max(abs(exact), abs(numeric), atol)
            checked += 1
            if err > worst[0] or worst[1] is None:
                worst = (err, name, idx)

    # leave the tape evaluated at the caller's bindings
    forward(tape, inputs)
    report = GradCheckReport(passed=worst[0] <= tol, max_error=worst[0], worst_input=worst[1],
                             worst_index=worst[2], checked=checked)
    if not report.passed:
        logger.debug(f"grad_check failed on {tape.name}: {worst[1]}{list(worst[2])} error {worst[0]:.3e}")
    return report
