"""Reverse-mode differentiation over scalar expression graphs.

Every node denotes one real-valued quantity.  ``gradient`` does not run a
backward pass; it appends new nodes to the tape that compute the adjoints,
so the result is an ordinary graph that can be evaluated or differentiated
again (gradients of gradients, as needed when a loss contains ``d f / d x``).

Values bound to inputs may be numpy arrays instead of floats.  Elementwise
ops then evaluate the same scalar graph independently for every array entry
("lanes"), with numpy broadcasting between lane shapes.  Three bookkeeping
ops move data between lane shapes: ``lane_sum`` reduces along a lane axis,
``sum_to`` reduces an array to the shape of another node, and ``expand``
broadcasts to the shape of another node.  Parameters are usually scalars
shared by all lanes, so their adjoints are summed over lanes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence, Union

import numpy as np
from scipy.special import expit

Value = Union[float, np.ndarray]

SMOOTH_ABS_DELTA = 1e-6

LEAF_OPS = ("constant", "parameter", "input")
# ops whose second operand only supplies a shape
SHAPE_OPS = ("sum_to", "expand")


class GraphError(ValueError):
    """Malformed graph, binding or gradient request."""


class NonFiniteError(FloatingPointError):
    def __init__(self, node_index: int, op: str):
        super().__init__(f"non-finite value at node {node_index} ({op})")
        self.node_index = node_index
        self.op = op


def _sum_to(value, like):
    shape = np.shape(like)
    vshape = np.shape(value)
    if vshape == shape:
        return value
    if not shape:
        return np.sum(value)
    lead = len(vshape) - len(shape)
    if lead < 0:
        return np.broadcast_to(value, shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and vshape[lead + i] != 1
    )
    return np.sum(value, axis=axes, keepdims=True).reshape(shape)


def _dot_to(a, b, like):
    if not np.shape(like) and np.shape(a) == np.shape(b) and np.ndim(a):
        return np.vdot(a, b)
    return _sum_to(a * b, like)


def _expand(value, like):
    shape = np.shape(like)
    if np.shape(value) == shape:
        return value
    return np.broadcast_to(value, shape)


def _lane_sum(value, axis):
    if axis is None:
        return np.sum(value)
    return np.sum(value, axis=axis, keepdims=True)


def _nsum(*values):
    total = values[0]
    for v in values[1:]:
        total = total + v
    return total


def _abs_smooth(u, delta):
    return np.sqrt(u * u + delta * delta)


_KERNELS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "neg": np.negative,
    "tanh": np.tanh,
    "sigmoid": expit,
    "softplus": lambda u: np.logaddexp(0.0, u),
    "log": np.log,
    "exp": np.exp,
    "sum": _nsum,
    "sum_to": _sum_to,
    "expand": _expand,
}


def _kernel(node: "Node"):
    """Return ``f(*operand_values)`` for a non-leaf node."""
    op = node.op
    if op == "abs_smooth":
        delta = node.attr
        return lambda u: _abs_smooth(u, delta)
    if op == "power":
        c = node.attr
        if c == 2:
            return lambda u: u * u
        if c == 0.5:
            return np.sqrt
        return lambda u: np.power(u, c)
    if op == "lane_sum":
        axis = node.attr
        return lambda u: _lane_sum(u, axis)
    return _KERNELS[op]


class Node:
    __slots__ = ("tape", "op", "args", "attr", "index", "name", "value")

    def __init__(self, tape, op, args=(), attr=None, name=None):
        self.tape = tape
        self.op = op
        self.args = tuple(args)
        self.attr = attr
        self.name = name
        self.index = -1
        self.value = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.index}, {self.op}{label})"

    # arithmetic sugar; constants are lifted onto the tape
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

    def __truediv__(self, other):
        return self.tape.div(self, other)

    def __rtruediv__(self, other):
        return self.tape.div(other, self)

    def __neg__(self):
        return self.tape.neg(self)

    def __pow__(self, c):
        return self.tape.power(self, c)

    @property
    def is_constant(self):
        return self.op == "constant"


class Tape:
    """Ordered node list plus named input and parameter slots.

    Creation order is a topological order: a node only references nodes
    created before it.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: dict[str, Node] = {}
        self.params: dict[str, Node] = {}
        self._consts: dict[float, Node] = {}

    def __len__(self):
        return len(self.nodes)

    # -- construction -------------------------------------------------

    def _push(self, node: Node) -> Node:
        node.index = len(self.nodes)
        self.nodes.append(node)
        return node

    def _lift(self, x) -> Node:
        if isinstance(x, Node):
            if x.tape is not self:
                raise GraphError(f"{x!r} belongs to a different tape")
            return x
        return self.const(x)

    def const(self, value) -> Node:
        value = float(value)
        node = self._consts.get(value)
        if node is None:
            node = self._push(Node(self, "constant", attr=value))
            node.value = value
            self._consts[value] = node
        return node

    def input(self, name: str) -> Node:
        if name in self.inputs or name in self.params:
            raise GraphError(f"duplicate slot name {name!r}")
        node = self._push(Node(self, "input", name=name))
        self.inputs[name] = node
        return node

    def param(self, name: str) -> Node:
        if name in self.inputs or name in self.params:
            raise GraphError(f"duplicate slot name {name!r}")
        node = self._push(Node(self, "parameter", name=name))
        self.params[name] = node
        return node

    def _op(self, op, args, attr=None) -> Node:
        if args and all(a.op == "constant" for a in args) and op not in SHAPE_OPS:
            if op == "lane_sum":
                return args[0]
            node = Node(self, op, args, attr)
            return self.const(_kernel(node)(*(a.attr for a in args)))
        return self._push(Node(self, op, args, attr))

    def add(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        if b.op == "constant" and b.attr == 0.0:
            return a
        if a.op == "constant" and a.attr == 0.0:
            return b
        return self._op("add", (a, b))

    def sub(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        if b.op == "constant" and b.attr == 0.0:
            return a
        if a.op == "constant" and a.attr == 0.0:
            return self.neg(b)
        return self._op("sub", (a, b))

    def mul(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        if b.op == "constant" and b.attr == 1.0:
            return a
        if a.op == "constant" and a.attr == 1.0:
            return b
        if a.op == "constant" and a.attr == -1.0:
            return self.neg(b)
        if b.op == "constant" and b.attr == -1.0:
            return self.neg(a)
        return self._op("mul", (a, b))

    def div(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        if b.op == "constant" and b.attr == 1.0:
            return a
        return self._op("div", (a, b))

    def neg(self, a) -> Node:
        a = self._lift(a)
        if a.op == "neg":
            return a.args[0]
        return self._op("neg", (a,))

    def tanh(self, a) -> Node:
        return self._op("tanh", (self._lift(a),))

    def sigmoid(self, a) -> Node:
        return self._op("sigmoid", (self._lift(a),))

    def softplus(self, a) -> Node:
        return self._op("softplus", (self._lift(a),))

    def log(self, a) -> Node:
        return self._op("log", (self._lift(a),))

    def exp(self, a) -> Node:
        return self._op("exp", (self._lift(a),))

    def abs_smooth(self, a, delta: float = SMOOTH_ABS_DELTA) -> Node:
        """sqrt(a^2 + delta^2): a differentiable stand-in for |a|."""
        if delta <= 0:
            raise GraphError("abs_smooth needs delta > 0")
        return self._op("abs_smooth", (self._lift(a),), float(delta))

    def power(self, a, c: float) -> Node:
        c = float(c)
        a = self._lift(a)
        if c == 1.0:
            return a
        return self._op("power", (a,), c)

    def sum(self, terms: Iterable) -> Node:
        terms = [self._lift(t) for t in terms]
        terms = [t for t in terms if not (t.op == "constant" and t.attr == 0.0)]
        if not terms:
            return self.const(0.0)
        if len(terms) == 1:
            return terms[0]
        return self._op("sum", tuple(terms))

    def lane_sum(self, a, axis: int | None = None) -> Node:
        """Sum over one lane axis (kept with size 1), or over all lanes."""
        return self._op("lane_sum", (self._lift(a),), axis)

    def sum_to(self, a, like) -> Node:
        return self._op("sum_to", (self._lift(a), self._lift(like)))

    def expand(self, a, like) -> Node:
        return self._op("expand", (self._lift(a), self._lift(like)))

    # -- differentiation ----------------------------------------------

    def _local(self, node: Node, adj: Node, k: int) -> Node:
        """Adjoint contribution of ``node`` to its k-th operand, as graph ops."""
        op, args = node.op, node.args
        if op in ("add", "sum"):
            return adj
        if op == "sub":
            return adj if k == 0 else self.neg(adj)
        if op == "mul":
            return self.mul(adj, args[1 - k])
        if op == "div":
            if k == 0:
                return self.div(adj, args[1])
            return self.neg(self.div(self.mul(adj, node), args[1]))
        if op == "neg":
            return self.neg(adj)
        if op == "tanh":
            return self.mul(adj, self.sub(1.0, self.mul(node, node)))
        if op == "sigmoid":
            return self.mul(adj, self.mul(node, self.sub(1.0, node)))
        if op == "softplus":
            return self.mul(adj, self.sigmoid(args[0]))
        if op == "log":
            return self.div(adj, args[0])
        if op == "exp":
            return self.mul(adj, node)
        if op == "abs_smooth":
            return self.mul(adj, self.div(args[0], node))
        if op == "power":
            c = node.attr
            return self.mul(adj, self.mul(c, self.power(args[0], c - 1.0)))
        if op in ("lane_sum", "sum_to"):
            return self.expand(adj, args[0])
        if op == "expand":
            return self.sum_to(adj, args[0])
        raise GraphError(f"no derivative rule for {op!r}")

    def _resolve(self, ref) -> Node:
        if isinstance(ref, str):
            if ref in self.inputs:
                return self.inputs[ref]
            if ref in self.params:
                return self.params[ref]
            raise GraphError(f"slot {ref!r} not present in graph")
        if not isinstance(ref, Node) or ref.tape is not self:
            raise GraphError(f"{ref!r} is not a node of this tape")
        return ref

    def gradient(self, output: Node, wrt: Sequence) -> list[Node]:
        """Append nodes computing d output / d w for every w in ``wrt``.

        ``wrt`` may hold slot names or nodes of this tape.  With lane-valued
        bindings the result is the per-lane derivative, reduced to the lane
        shape of each ``w``.
        """
        if not isinstance(output, Node):
            raise GraphError("gradient needs a single scalar output node")
        output = self._resolve(output)
        targets = [self._resolve(w) for w in wrt]
        top = output.index
        nodes = self.nodes

        # nodes downstream of some target and upstream of the output
        depends = bytearray(top + 1)
        lo = top + 1
        for w in targets:
            if w.index <= top:
                depends[w.index] = 1
                lo = min(lo, w.index)
        for i in range(lo, top + 1):
            node = nodes[i]
            if depends[i] or node.op in LEAF_OPS:
                continue
            dargs = node.args[:1] if node.op in SHAPE_OPS else node.args
            for a in dargs:
                if depends[a.index]:
                    depends[i] = 1
                    break

        contribs: dict[int, list[Node]] = {}
        adjoint: dict[int, Node] = {}
        if depends[top]:
            contribs[top] = [self.expand(1.0, output)]
        for i in range(top, lo - 1, -1):
            cs = contribs.pop(i, None)
            if cs is None:
                continue
            adj = cs[0] if len(cs) == 1 else self.sum(cs)
            adjoint[i] = adj
            node = nodes[i]
            if node.op in LEAF_OPS:
                continue
            dargs = node.args[:1] if node.op in SHAPE_OPS else node.args
            for k, a in enumerate(dargs):
                if not depends[a.index]:
                    continue
                c = self._local(node, adj, k)
                if node.op not in ("lane_sum", "sum_to", "expand"):
                    c = self.sum_to(c, a)
                contribs.setdefault(a.index, []).append(c)

        out = []
        for w in targets:
            g = adjoint.get(w.index)
            out.append(g if g is not None else self.expand(0.0, w))
        return out

    # -- evaluation ---------------------------------------------------

    def compile(self, outputs: Sequence[Node]) -> "Program":
        return Program(self, list(outputs))

    def evaluate(self, outputs, inputs=None, params=None, check_finite=True):
        """Evaluate ``outputs`` (a node or a list of nodes) at a binding.

        Every visited node caches its value in ``node.value``.
        """
        single = isinstance(outputs, Node)
        outs = [outputs] if single else list(outputs)
        prog = Program(self, outs, keep_all=True)
        vals = prog.run(inputs, params, check="all" if check_finite else "none")
        for i in prog.order:
            self.nodes[i].value = prog.values[i]
        return vals[0] if single else vals


def _bind(slots: dict[str, Node], values, kind: str) -> list:
    if values is None:
        values = {}
    if isinstance(values, Mapping):
        unknown = set(values) - set(slots)
        if unknown:
            raise GraphError(f"unknown {kind} slot(s): {sorted(unknown)}")
        missing = [n for n in slots if n not in values]
        if missing:
            raise GraphError(f"missing {kind} value(s) for {missing[:5]}")
        return [values[n] for n in slots]
    values = list(values) if not isinstance(values, np.ndarray) else values
    if len(values) != len(slots):
        raise GraphError(
            f"shape mismatch: {len(values)} {kind} values for {len(slots)} slots"
        )
    return values


class Program:
    """A compiled evaluation schedule for a fixed set of output nodes.

    Intermediate values are released after their last use unless
    ``keep_all`` is set.
    """

    def __init__(self, tape: Tape, outputs: list[Node], keep_all: bool = False):
        for o in outputs:
            if not isinstance(o, Node) or o.tape is not tape:
                raise GraphError(f"{o!r} is not a node of this tape")
        self.tape = tape
        self.outputs = [o.index for o in outputs]
        nodes = tape.nodes
        need = bytearray(len(nodes))
        for i in self.outputs:
            need[i] = 1
        for i in range(max(self.outputs, default=-1), -1, -1):
            if need[i]:
                for a in nodes[i].args:
                    need[a.index] = 1
        self.order = [i for i in range(len(nodes)) if need[i]]
        self.input_idx = [n.index for n in tape.inputs.values()]
        self.param_idx = [n.index for n in tape.params.values()]
        self.consts = [(i, nodes[i].attr) for i in self.order if nodes[i].op == "constant"]

        # sum_to(mul(a, b)) with a single-use product becomes one dot product
        uses: dict[int, int] = {}
        for i in self.order:
            for a in nodes[i].args:
                uses[a.index] = uses.get(a.index, 0) + 1
        fused: dict[int, tuple] = {}
        for i in self.order if not keep_all else ():
            node = nodes[i]
            if node.op == "sum_to":
                m = node.args[0]
                if m.op == "mul" and uses[m.index] == 1 and m.index not in self.outputs:
                    fused[i] = (m.args[0].index, m.args[1].index, node.args[1].index)
        skip = {nodes[i].args[0].index for i in fused}
        steps = [i for i in self.order if nodes[i].op not in LEAF_OPS and i not in skip]

        def args_of(i):
            return fused[i] if i in fused else tuple(a.index for a in nodes[i].args)

        last_use: dict[int, int] = {}
        for pos, i in enumerate(steps):
            for a in args_of(i):
                last_use[a] = pos
        keep = set(self.outputs)
        frees: list[list[int]] = [[] for _ in steps]
        if not keep_all:
            for j, pos in last_use.items():
                if j not in keep and nodes[j].op not in LEAF_OPS:
                    frees[pos].append(j)
        self.steps = [
            (i, _dot_to if i in fused else _kernel(nodes[i]), args_of(i), tuple(frees[p]))
            for p, i in enumerate(steps)
        ]
        self.values: list = []

    def run(self, inputs=None, params=None, check: str = "output") -> list:
        """Evaluate; ``check`` is 'all', 'output' or 'none'."""
        tape = self.tape
        vals = [None] * len(tape.nodes)
        for i, v in zip(self.input_idx, _bind(tape.inputs, inputs, "input")):
            # numpy reductions round differently on strided views; copying to
            # C order makes results independent of how the caller sliced X
            vals[i] = np.ascontiguousarray(v, dtype=np.float64) if isinstance(v, np.ndarray) else v
        for i, v in zip(self.param_idx, _bind(tape.params, params, "parameter")):
            vals[i] = v
        for i, c in self.consts:
            vals[i] = c
        if check != "none":
            for i in self.input_idx + self.param_idx:
                if vals[i] is not None and not np.all(np.isfinite(vals[i])):
                    raise GraphError(f"non-finite binding for slot {tape.nodes[i].name!r}")
        every = check == "all"
        with np.errstate(all="ignore"):
            for i, fn, args, free in self.steps:
                if len(args) == 1:
                    v = fn(vals[args[0]])
                elif len(args) == 2:
                    v = fn(vals[args[0]], vals[args[1]])
                else:
                    v = fn(*[vals[a] for a in args])
                vals[i] = v
                if every and not np.all(np.isfinite(v)):
                    raise NonFiniteError(i, tape.nodes[i].op)
                for j in free:
                    vals[j] = None
        out = [vals[i] for i in self.outputs]
        if check == "output":
            for i, v in zip(self.outputs, out):
                if not np.all(np.isfinite(v)):
                    # rerun to name the first offending node
                    Program(tape, [tape.nodes[i] for i in self.outputs]).run(
                        inputs, params, check="all"
                    )
                    raise NonFiniteError(i, tape.nodes[i].op)
        self.values = vals
        return out


def evaluate(tape: Tape, outputs, inputs=None, params=None):
    return tape.evaluate(outputs, inputs, params)


def gradient(tape: Tape, output: Node, wrt: Sequence) -> list[Node]:
    return tape.gradient(output, wrt)


@dataclass
class SlotCheck:
    slot: str
    analytic: float
    numeric: float
    rel_error: float
    ok: bool


@dataclass
class GradientReport:
    checks: list[SlotCheck]
    tolerance: float

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    @property
    def max_rel_error(self) -> float:
        return max((c.rel_error for c in self.checks), default=0.0)

    def failures(self) -> list[SlotCheck]:
        return [c for c in self.checks if not c.ok]


def check_gradient(
    tape: Tape,
    output: Node,
    inputs=None,
    params=None,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    slots: Sequence[str] | None = None,
) -> GradientReport:
    """Compare graph gradients of a scalar output with central differences.

    Bindings must be plain floats.  The relative error uses the denominator
    max(|analytic|, |numeric|, 1e-12).
    """
    if step <= 0:
        raise GraphError("step must be positive")
    inputs = dict(inputs or {})
    params = dict(params or {})
    if slots is None:
        slots = list(tape.inputs) + list(tape.params)
    grads = tape.gradient(output, slots)
    prog = tape.compile([output] + grads)
    analytic = prog.run(inputs, params, check="none")[1:]
    f = tape.compile([output])
    checks = []
    for name, a in zip(slots, analytic):
        target = inputs if name in inputs else params
        x0 = target[name]
        target[name] = x0 + step
        up = f.run(inputs, params, check="none")[0]
        target[name] = x0 - step
        down = f.run(inputs, params, check="none")[0]
        target[name] = x0
        num = (up - down) / (2.0 * step)
        a = float(a)
        rel = abs(a - num) / max(abs(a), abs(num), 1e-12)
        checks.append(SlotCheck(name, a, float(num), rel, bool(rel <= tolerance)))
    return GradientReport(checks, tolerance)


# function-style aliases so model code reads like maths
def tanh(x: Node) -> Node:
    return x.tape.tanh(x)


def sigmoid(x: Node) -> Node:
    return x.tape.sigmoid(x)


def softplus(x: Node) -> Node:
    return x.tape.softplus(x)


def log(x: Node) -> Node:
    return x.tape.log(x)


def exp(x: Node) -> Node:
    return x.tape.exp(x)


def abs_smooth(x: Node, delta: float = SMOOTH_ABS_DELTA) -> Node:
    return x.tape.abs_smooth(x, delta)
