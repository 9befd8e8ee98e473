"""Reverse-mode tape: tensors, the computation record and gradient evaluation."""

from __future__ import annotations

import numpy as np


class Tensor:
    """Dense array that may be attached to a :class:`Tape`.

    A tensor created by an operator whose inputs require gradients carries a
    reference to its parents and a closure evaluating the vector-Jacobian
    product. Tensors are never mutated after construction.
    """

    __slots__ = ("data", "tape", "requires_grad", "parents", "vjp", "name")

    def __init__(self, data, tape=None, requires_grad=False, parents=(), vjp=None, name=None):
        self.data = np.asarray(data)
        self.tape = tape
        self.requires_grad = requires_grad
        self.parents = parents
        self.vjp = vjp
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other):
        from dceac.autodiff import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from dceac.autodiff import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from dceac.autodiff import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from dceac.autodiff import ops
        return ops.scale(self, -1.0)


def unwrap(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def record(data, parents, vjp):
    """Wrap an operator result, attaching it to the tape of its inputs.

    ``vjp(grad, needs)`` must return one gradient (or ``None``) per parent;
    ``needs[i]`` tells whether parent ``i`` requires one. When no parent
    requires gradients the result is a detached constant.
    """
    tape = None
    for p in parents:
        if isinstance(p, Tensor) and p.requires_grad:
            if tape is None:
                tape = p.tape
            elif p.tape is not tape:
                raise ValueError("operands belong to different tapes")
    if tape is None:
        return Tensor(data)
    out = Tensor(data, tape, True, tuple(parents), vjp)
    tape.nodes.append(out)
    return out


class Tape:
    """Ordered computation record.

    Leaves are registered by name with :meth:`watch`; every operator applied
    to a watched tensor (directly or transitively) appends its output here.
    Creation order is a valid topological order, so the backward sweep is a
    single reverse pass with deterministic accumulation order.
    """

    def __init__(self):
        self.nodes = []
        self.leaves = {}

    def watch(self, name, value):
        if name in self.leaves:
            raise ValueError(f"leaf {name!r} already watched")
        t = Tensor(np.array(unwrap(value), copy=True), self, True, (), None, name)
        self.leaves[name] = t
        return t

    def backward(self, loss, names=None, retain=False):
        """Gradients of scalar ``loss`` w.r.t. the watched leaves.

        Returns a dict keyed by leaf name. Leaves that do not influence the
        loss get zero arrays. Names that were never watched raise KeyError.
        Unless ``retain`` is set the recorded graph is released afterwards,
        which frees the saved activations without waiting for the cycle
        collector.
        """
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise ValueError("loss is not a node of this record")
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        if names is None:
            names = list(self.leaves)
        missing = [n for n in names if n not in self.leaves]
        if missing:
            raise KeyError(f"not in record: {', '.join(missing)}")

        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            needs = tuple(isinstance(p, Tensor) and p.requires_grad for p in node.parents)
            for p, gp in zip(node.parents, node.vjp(g, needs)):
                if gp is None or not (isinstance(p, Tensor) and p.requires_grad):
                    continue
                key = id(p)
                prev = grads.get(key)
                grads[key] = gp if prev is None else prev + gp

        if not retain:
            self.release()
        out = {}
        for n in names:
            leaf = self.leaves[n]
            g = grads.get(id(leaf))
            if g is None:
                g = np.zeros_like(leaf.data)
            elif not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {n!r}")
            out[n] = g
        return out

    def release(self):
        """Drop recorded intermediate nodes and their saved buffers."""
        for node in self.nodes:
            node.parents = ()
            node.vjp = None
            node.tape = None
            node.requires_grad = False
        self.nodes = []
