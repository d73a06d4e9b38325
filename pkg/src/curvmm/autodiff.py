"""Reverse-mode automatic differentiation on a small expression graph.

Expressions are immutable DAG nodes over float64 scalars, vectors and
matrices (shapes ``()``, ``(n,)``, ``(r, c)``; no broadcasting, no control
flow). A :class:`Tape` fixes a topological order once and can then be
re-evaluated cheaply under different variable bindings.

The same vector-Jacobian rule table is used in two modes:

* numerically, for fast first-order gradients (one forward sweep, one
  adjoint sweep over the tape), and
* symbolically, to build gradient *graphs* out of the same node set, which
  is what enables Hessian-vector products as reverse-over-reverse
  differentiation of the scalar ``grad(e)^T v``.

Second derivatives are the supported ceiling; differentiating a graph that
already contains second-order nodes is not supported.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .exceptions import EvaluationError, InvalidInputError, ShapeError

__all__ = [
    "Expr",
    "Tape",
    "HessianOperator",
    "const",
    "var",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "dot",
    "sum_",
    "norm2",
    "sqrt",
    "matvec",
    "outer",
    "softplus",
    "logistic",
    "clamp",
    "soft_relu",
    "norm1_smooth",
    "tanh",
    "evaluate",
    "gradient",
    "grad_graph",
    "hvp",
]

_NORM_FLOOR = 1e-12

_LEAF_OPS = ("const", "var")


class Expr:
    """One node of an expression DAG. Do not mutate."""

    __slots__ = ("op", "args", "shape", "payload")

    def __init__(self, op, args, shape, payload=None):
        self.op = op
        self.args = args
        self.shape = shape
        self.payload = payload

    def __repr__(self):
        if self.op == "var":
            return f"var({self.payload!r}, shape={self.shape})"
        return f"Expr({self.op}, shape={self.shape})"


# ---------------------------------------------------------------------------
# constructors


def _shape_of(value):
    return tuple(np.shape(value))


def const(value):
    """Wrap a float or ndarray as a constant node."""
    if isinstance(value, Expr):
        return value
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("constant contains non-finite entries")
    if arr.ndim == 0:
        return Expr("const", (), (), float(arr))
    if arr.ndim > 2:
        raise ShapeError(f"constants are at most 2-D, got ndim={arr.ndim}")
    arr = arr.copy()
    arr.flags.writeable = False
    return Expr("const", (), arr.shape, arr)


def var(name, shape):
    """A named leaf bound at evaluation time."""
    shape = tuple(int(d) for d in shape)
    if len(shape) > 2 or any(d < 1 for d in shape):
        raise ShapeError(f"invalid variable shape {shape}")
    return Expr("var", (), shape, str(name))


def _binary_same_shape(op, a, b):
    a, b = const(a), const(b)
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return Expr(op, (a, b), a.shape)


def add(a, b):
    return _binary_same_shape("add", a, b)


def sub(a, b):
    return _binary_same_shape("sub", a, b)


def mul(a, b):
    """Elementwise product of same-shape operands (scalars included)."""
    return _binary_same_shape("mul", a, b)


def div(a, b):
    """Elementwise quotient of same-shape operands."""
    return _binary_same_shape("div", a, b)


def scale(t, s):
    """Product of a tensor ``t`` with a scalar expression ``s``."""
    t, s = const(t), const(s)
    if s.shape != ():
        raise ShapeError(f"scale: scalar operand has shape {s.shape}")
    return Expr("scale", (t, s), t.shape)


def dot(a, b):
    """Full contraction of two same-shape tensors to a scalar."""
    a, b = const(a), const(b)
    if a.shape != b.shape:
        raise ShapeError(f"dot: shape mismatch {a.shape} vs {b.shape}")
    return Expr("dot", (a, b), ())


def sum_(v):
    """Sum of all entries."""
    return Expr("sum", (const(v),), ())


def norm2(v):
    """Euclidean (Frobenius) norm; evaluation errors below 1e-12."""
    return Expr("norm2", (const(v),), ())


def sqrt(v):
    """Elementwise square root."""
    v = const(v)
    return Expr("sqrt", (v,), v.shape)


def matvec(m, v, transpose=False):
    """``m @ v`` (or ``m.T @ v``) with a vector or matrix right operand."""
    m, v = const(m), const(v)
    if len(m.shape) != 2:
        raise ShapeError(f"matvec: left operand must be a matrix, got {m.shape}")
    rows, cols = m.shape
    inner = rows if transpose else cols
    lead = cols if transpose else rows
    if len(v.shape) == 1:
        if v.shape[0] != inner:
            raise ShapeError(f"matvec: {m.shape} (T={transpose}) @ {v.shape}")
        out_shape = (lead,)
    elif len(v.shape) == 2:
        if v.shape[0] != inner:
            raise ShapeError(f"matvec: {m.shape} (T={transpose}) @ {v.shape}")
        out_shape = (lead, v.shape[1])
    else:
        raise ShapeError(f"matvec: right operand has shape {v.shape}")
    return Expr("matvec_t" if transpose else "matvec", (m, v), out_shape)


def outer(a, b):
    """``a @ b.T`` with vectors treated as single columns; result is a matrix."""
    a, b = const(a), const(b)
    ka = a.shape[1] if len(a.shape) == 2 else 1 if len(a.shape) == 1 else None
    kb = b.shape[1] if len(b.shape) == 2 else 1 if len(b.shape) == 1 else None
    if ka is None or kb is None or ka != kb:
        raise ShapeError(f"outer: incompatible shapes {a.shape}, {b.shape}")
    return Expr("outer", (a, b), (a.shape[0], b.shape[0]))


def softplus(v):
    """Elementwise ``log(1 + exp(v))``."""
    v = const(v)
    return Expr("softplus", (v,), v.shape)


def logistic(v):
    """Elementwise ``1 / (1 + exp(-v))``."""
    v = const(v)
    return Expr("logistic", (v,), v.shape)


def clamp(v, lo, hi):
    """Elementwise clip to the scalar box ``[lo, hi]``.

    The derivative is 1 strictly inside the box (inclusive of the
    boundary) and 0 where the input was clipped; no derivative flows to
    the bounds.
    """
    v, lo, hi = const(v), const(lo), const(hi)
    if lo.shape != () or hi.shape != ():
        raise ShapeError("clamp bounds must be scalars")
    return Expr("clamp", (v, lo, hi), v.shape)


def _box_mask(v, lo, hi):
    return Expr("box_mask", (v, lo, hi), v.shape)


# composite builders ---------------------------------------------------------


def soft_relu(z, eps=0.1):
    """Smooth ramp ``0.5 * (z + sqrt(z^2 + eps^2))``, elementwise."""
    z = const(z)
    if not eps > 0:
        raise InvalidInputError(f"soft_relu eps must be positive, got {eps}")
    eps2 = const(np.full(z.shape, eps * eps)) if z.shape else const(eps * eps)
    return scale(add(z, sqrt(add(mul(z, z), eps2))), 0.5)


def norm1_smooth(v, eps=0.1):
    """Smoothed l1 norm ``sum(sqrt(v_i^2 + eps^2))``."""
    v = const(v)
    if not eps > 0:
        raise InvalidInputError(f"norm1_smooth eps must be positive, got {eps}")
    eps2 = const(np.full(v.shape, eps * eps)) if v.shape else const(eps * eps)
    return sum_(sqrt(add(mul(v, v), eps2)))


def tanh(z):
    """Elementwise tanh as ``2*logistic(2z) - 1``."""
    z = const(z)
    one = const(np.ones(z.shape)) if z.shape else const(1.0)
    return sub(scale(logistic(scale(z, 2.0)), 2.0), one)


# ---------------------------------------------------------------------------
# traversal


def topo_order(roots):
    """Children-before-parents ordering of the DAG under ``roots``."""
    seen = set()
    order = []
    stack = [(r, False) for r in roots]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for child in node.args:
            if id(child) not in seen:
                stack.append((child, False))
    return order


def _reaches(order, target_ids):
    """For each node, whether its subtree contains one of ``target_ids``."""
    needs = {}
    for node in order:
        hit = id(node) in target_ids
        if not hit:
            for child in node.args:
                if needs.get(id(child)):
                    hit = True
                    break
        needs[id(node)] = hit
    return needs


# ---------------------------------------------------------------------------
# vjp rules, written once against an abstract op namespace


class _GraphOps:
    """Adjoint arithmetic that builds new graph nodes."""

    add = staticmethod(add)
    sub = staticmethod(sub)
    mul = staticmethod(mul)
    div = staticmethod(div)
    scale = staticmethod(scale)
    dot = staticmethod(dot)
    matvec = staticmethod(matvec)
    outer = staticmethod(outer)
    logistic = staticmethod(logistic)
    box_mask = staticmethod(_box_mask)

    @staticmethod
    def matvec_t(m, v):
        return matvec(m, v, transpose=True)

    @staticmethod
    def neg(a):
        return scale(a, -1.0)

    @staticmethod
    def ones(shape):
        return const(np.ones(shape)) if shape else const(1.0)


class _NumericOps:
    """Adjoint arithmetic on plain values."""

    add = staticmethod(lambda a, b: a + b)
    sub = staticmethod(lambda a, b: a - b)
    mul = staticmethod(lambda a, b: a * b)
    div = staticmethod(lambda a, b: a / b)
    scale = staticmethod(lambda t, s: t * s)
    neg = staticmethod(lambda a: -a)
    logistic = staticmethod(expit)

    @staticmethod
    def dot(a, b):
        return float(np.multiply(a, b).sum())

    @staticmethod
    def matvec(m, v):
        return m @ v

    @staticmethod
    def matvec_t(m, v):
        return m.T @ v

    @staticmethod
    def outer(a, b):
        return np.reshape(a, (np.shape(a)[0], -1)) @ np.reshape(b, (np.shape(b)[0], -1)).T

    @staticmethod
    def box_mask(v, lo, hi):
        v = np.asarray(v)
        return ((v >= lo) & (v <= hi)).astype(np.float64)

    @staticmethod
    def ones(shape):
        return np.ones(shape) if shape else 1.0


def _vjp_contribs(node, abar, val, ops):
    """Adjoint contributions of ``node`` to its children.

    ``val`` maps a node to its value (numeric mode) or to itself
    (symbolic mode); ``abar`` is the adjoint of ``node`` in the same
    representation.
    """
    op = node.op
    a = node.args
    if op == "add":
        return ((a[0], abar), (a[1], abar))
    if op == "sub":
        return ((a[0], abar), (a[1], ops.neg(abar)))
    if op == "mul":
        return ((a[0], ops.mul(abar, val(a[1]))), (a[1], ops.mul(abar, val(a[0]))))
    if op == "div":
        d0 = ops.div(abar, val(a[1]))
        d1 = ops.neg(ops.div(ops.mul(abar, val(node)), val(a[1])))
        return ((a[0], d0), (a[1], d1))
    if op == "scale":
        return ((a[0], ops.scale(abar, val(a[1]))), (a[1], ops.dot(abar, val(a[0]))))
    if op == "dot":
        return ((a[0], ops.scale(val(a[1]), abar)), (a[1], ops.scale(val(a[0]), abar)))
    if op == "sum":
        return ((a[0], ops.scale(ops.ones(a[0].shape), abar)),)
    if op == "norm2":
        return ((a[0], ops.scale(val(a[0]), ops.div(abar, val(node)))),)
    if op == "sqrt":
        return ((a[0], ops.div(abar, ops.scale(val(node), 2.0))),)
    if op == "matvec":
        return ((a[0], ops.outer(abar, val(a[1]))), (a[1], ops.matvec_t(val(a[0]), abar)))
    if op == "matvec_t":
        return ((a[0], ops.outer(val(a[1]), abar)), (a[1], ops.matvec(val(a[0]), abar)))
    if op == "outer":
        return ((a[0], ops.matvec(abar, val(a[1]))), (a[1], ops.matvec_t(abar, val(a[0]))))
    if op == "softplus":
        return ((a[0], ops.mul(abar, ops.logistic(val(a[0])))),)
    if op == "logistic":
        out = val(node)
        return ((a[0], ops.mul(abar, ops.mul(out, ops.sub(ops.ones(node.shape), out)))),)
    if op == "clamp":
        mask = ops.box_mask(val(a[0]), val(a[1]), val(a[2]))
        return ((a[0], ops.mul(abar, mask)),)
    if op == "box_mask":
        # Piecewise-constant: zero derivative almost everywhere.
        return ()
    raise EvaluationError(f"no derivative rule for op {op!r}")


def _reverse_sweep(order, root, seed, target_ids, val, ops):
    """Shared adjoint accumulation for numeric and symbolic modes."""
    needs = _reaches(order, target_ids)
    adj = {id(root): seed}
    for node in reversed(order):
        abar = adj.get(id(node))
        if abar is None or node.op in _LEAF_OPS:
            continue
        for child, contrib in _vjp_contribs(node, abar, val, ops):
            if child.op == "const" or not needs.get(id(child)):
                continue
            prev = adj.get(id(child))
            adj[id(child)] = contrib if prev is None else ops.add(prev, contrib)
    return adj


# ---------------------------------------------------------------------------
# evaluation


class Tape:
    """A fixed topological ordering of a DAG, reusable across bindings.

    Holds the node list, a slot index per node, a primal value buffer
    template with constants pre-filled, and (lazily) adjoint buffers per
    backward call.
    """

    def __init__(self, outputs):
        self.outputs = list(outputs)
        self.nodes = topo_order(self.outputs)
        self.pos = {id(n): i for i, n in enumerate(self.nodes)}
        self._template = [None] * len(self.nodes)
        self._var_slots = {}
        for i, n in enumerate(self.nodes):
            if n.op == "const":
                self._template[i] = n.payload
            elif n.op == "var":
                self._var_slots.setdefault(n.payload, []).append(i)
        self._args_idx = [tuple(self.pos[id(c)] for c in n.args) for n in self.nodes]

    def forward(self, bindings):
        """Evaluate all nodes; returns the primal value buffer."""
        buf = self._template.copy()
        for name, slots in self._var_slots.items():
            if name not in bindings:
                raise EvaluationError(f"unbound variable {name!r}")
            value = np.asarray(bindings[name], dtype=np.float64)
            node = self.nodes[slots[0]]
            if tuple(value.shape) != node.shape:
                raise ShapeError(
                    f"binding for {name!r} has shape {value.shape}, expected {node.shape}"
                )
            if not np.all(np.isfinite(value)):
                raise InvalidInputError(f"binding for {name!r} is non-finite")
            v = float(value) if value.ndim == 0 else value
            for s in slots:
                buf[s] = v
        for i, node in enumerate(self.nodes):
            op = node.op
            if op == "const" or op == "var":
                continue
            ai = self._args_idx[i]
            if op == "add":
                buf[i] = buf[ai[0]] + buf[ai[1]]
            elif op == "sub":
                buf[i] = buf[ai[0]] - buf[ai[1]]
            elif op == "mul":
                buf[i] = buf[ai[0]] * buf[ai[1]]
            elif op == "scale":
                buf[i] = buf[ai[0]] * buf[ai[1]]
            elif op == "div":
                den = buf[ai[1]]
                if np.any(den == 0.0):
                    raise EvaluationError("division by zero in div node")
                buf[i] = buf[ai[0]] / den
            elif op == "matvec":
                buf[i] = buf[ai[0]] @ buf[ai[1]]
            elif op == "matvec_t":
                buf[i] = buf[ai[0]].T @ buf[ai[1]]
            elif op == "outer":
                va, vb = buf[ai[0]], buf[ai[1]]
                buf[i] = np.reshape(va, (va.shape[0], -1)) @ np.reshape(vb, (vb.shape[0], -1)).T
            elif op == "dot":
                buf[i] = float(np.multiply(buf[ai[0]], buf[ai[1]]).sum())
            elif op == "sum":
                buf[i] = float(np.sum(buf[ai[0]]))
            elif op == "norm2":
                n = float(np.linalg.norm(np.ravel(buf[ai[0]])))
                if n < _NORM_FLOOR:
                    raise EvaluationError(f"norm2 argument below {_NORM_FLOOR:g}")
                buf[i] = n
            elif op == "sqrt":
                v = buf[ai[0]]
                if np.any(np.asarray(v) < 0.0):
                    raise EvaluationError("sqrt of negative value")
                buf[i] = np.sqrt(v)
            elif op == "softplus":
                buf[i] = np.logaddexp(0.0, buf[ai[0]])
            elif op == "logistic":
                buf[i] = expit(buf[ai[0]])
            elif op == "clamp":
                buf[i] = np.clip(buf[ai[0]], buf[ai[1]], buf[ai[2]])
            elif op == "box_mask":
                v = buf[ai[0]]
                buf[i] = ((v >= buf[ai[1]]) & (v <= buf[ai[2]])).astype(np.float64)
            else:
                raise EvaluationError(f"cannot evaluate op {node.op!r}")
        return buf

    def value(self, buf, expr):
        return buf[self.pos[id(expr)]]

    def backward(self, buf, wrt, root=None):
        """Numeric adjoint sweep from a scalar ``root`` (default: first output).

        ``wrt`` is a variable name, a variable node, or a list of either;
        returns an ndarray for a single entry, else a dict name -> gradient.
        Variables the root does not depend on get zero gradients (a name
        with no node on the tape has an unknown shape and raises; pass the
        variable node instead).
        """
        root = self.outputs[0] if root is None else root
        if root.shape != ():
            raise ShapeError("backward root must be a scalar expression")
        single = isinstance(wrt, (str, Expr))
        entries = []
        target_ids = set()
        for w in [wrt] if single else list(wrt):
            if isinstance(w, Expr):
                if w.op != "var":
                    raise ShapeError("wrt entries must be variables")
                name, shape = w.payload, w.shape
            else:
                name = w
                slots = self._var_slots.get(name)
                if not slots:
                    raise EvaluationError(f"variable {name!r} not on tape")
                shape = self.nodes[slots[0]].shape
            nodes = [self.nodes[s] for s in self._var_slots.get(name, ())]
            entries.append((name, shape, nodes))
            target_ids.update(id(n) for n in nodes)
        adj = _reverse_sweep(
            self.nodes, root, 1.0, target_ids, lambda n: buf[self.pos[id(n)]], _NumericOps
        )
        out = {}
        for name, shape, nodes in entries:
            total = None
            for n in nodes:
                g = adj.get(id(n))
                if g is None:
                    continue
                total = g if total is None else total + g
            if total is None:
                total = np.zeros(shape) if shape else 0.0
            out[name] = np.asarray(total, dtype=np.float64) if shape else float(total)
        return next(iter(out.values())) if single else out


def evaluate(e, bindings=None):
    """Evaluate a single expression under ``bindings``."""
    tape = Tape([e])
    buf = tape.forward(bindings or {})
    return tape.value(buf, e)


def gradient(e, bindings, wrt):
    """Gradient of scalar ``e`` w.r.t. variables (names or nodes)."""
    tape = Tape([e])
    buf = tape.forward(bindings or {})
    return tape.backward(buf, wrt)


def grad_graph(e, wrt_nodes):
    """Symbolic gradients of scalar ``e`` w.r.t. expression nodes.

    Each target node is treated as an independent leaf (cut point); the
    returned expressions share subgraphs with ``e``. Targets that ``e``
    does not depend on yield zero constants.
    """
    single = isinstance(wrt_nodes, Expr)
    targets = [wrt_nodes] if single else list(wrt_nodes)
    if e.shape != ():
        raise ShapeError("grad_graph root must be a scalar expression")
    order = topo_order([e])
    adj = _reverse_sweep(
        order, e, const(1.0), {id(t) for t in targets}, lambda n: n, _GraphOps
    )
    out = []
    for t in targets:
        g = adj.get(id(t))
        if g is None:
            g = const(np.zeros(t.shape)) if t.shape else const(0.0)
        out.append(g)
    return out[0] if single else out


class HessianOperator:
    """Hessian-vector products of a scalar expression w.r.t. one variable.

    Builds the gradient graph once; each :meth:`apply` call evaluates
    ``d/dx [grad(e)^T v]`` by a numeric adjoint sweep (reverse over
    reverse), so the cost is a small constant factor over one gradient.
    """

    def __init__(self, e, x):
        if isinstance(x, str):
            hits = [n for n in topo_order([e])
                    if n.op == "var" and n.payload == x]
            if not hits:
                raise EvaluationError(f"no variable named {x!r} in expression")
            x = hits[0]
        if not isinstance(x, Expr) or x.op != "var":
            raise ShapeError("x must be a variable node or name")
        self.x = x
        g = grad_graph(e, x)
        self._v = var("__hvp_direction", x.shape)
        self._tape = Tape([dot(g, self._v)])

    def apply(self, bindings, v):
        v = np.asarray(v, dtype=np.float64)
        if tuple(v.shape) != self.x.shape:
            raise ShapeError(f"direction shape {v.shape} != {self.x.shape}")
        b = dict(bindings)
        b["__hvp_direction"] = v
        buf = self._tape.forward(b)
        return self._tape.backward(buf, self.x.payload)


def hvp(e, bindings, x, v):
    """One Hessian-vector product ``H(e, x) @ v``; see :class:`HessianOperator`."""
    return HessianOperator(e, x).apply(bindings, v)
