"""Array-level reverse-mode differentiation tape for the tiny networks.

Every primitive appends one :class:`Node` to ``TapeGraph.nodes``; the list is therefore
already in topological order and :meth:`TapeGraph.backward` walks it once in reverse.
"""

import logging

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.errors import UsageError
from src.numkit import check_finite, log_softmax_stable

logger = logging.getLogger(__name__)


class Node:
    """One recorded value plus the rule that sends its gradient to its inputs."""

    __slots__ = ("op", "value", "inputs", "backward_fn", "name", "index")

    def __init__(self, op, value, inputs=(), backward_fn=None, name=None):
        self.op = op
        self.value = value
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.name = name
        self.index = -1

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape}, name={self.name!r})"


class TapeGraph:
    """Recorded forward computation; single-writer, one forward/backward pair."""

    def __init__(self):
        self.nodes = []
        self.visits = 0

    def _record(self, op, value, inputs=(), backward_fn=None, name=None):
        node = Node(op, value, inputs, backward_fn, name)
        node.index = len(self.nodes)
        self.nodes.append(node)
        return node

    # leaves

    def variable(self, value, name):
        """Leaf that receives a gradient under ``name``."""
        return self._record("variable", np.asarray(value, dtype=np.float64), name=name)

    def constant(self, value):
        """Leaf that never receives a gradient."""
        return self._record("constant", np.asarray(value, dtype=np.float64))

    # primitives

    def affine(self, x, weight, bias):
        """``x @ weight.T + bias`` for x of shape (B, D) and weight (C, D)."""
        xv, wv = x.value, weight.value
        if xv.ndim != 2 or xv.shape[1] != wv.shape[1]:
            raise UsageError(f"affine shape mismatch: input {xv.shape}, weight {wv.shape}")

        def backward(g):
            return g @ wv, g.T @ xv, g.sum(axis=0)

        return self._record("affine", xv @ wv.T + bias.value, (x, weight, bias), backward)

    def conv2d(self, x, weight, bias, padding=1):
        """Stride-1 cross-correlation of (B, Cin, H, W) with (Cout, Cin, k, k) kernels."""
        xv, wv = x.value, weight.value
        if xv.ndim != 4 or xv.shape[1] != wv.shape[1]:
            raise UsageError(f"conv2d shape mismatch: input {xv.shape}, weight {wv.shape}")
        k = wv.shape[2]
        pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
        xp = np.pad(xv, pad)
        windows = sliding_window_view(xp, (k, k), axis=(2, 3))
        out = np.einsum("bchwij,ocij->bohw", windows, wv, optimize=True)
        out += bias.value[None, :, None, None]
        height, width = out.shape[2], out.shape[3]

        def backward(g):
            gw = np.einsum("bchwij,bohw->ocij", windows, g, optimize=True)
            gb = g.sum(axis=(0, 2, 3))
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + height, j : j + width] += np.einsum(
                        "bohw,oc->bchw", g, wv[:, :, i, j], optimize=True
                    )
            gx = gxp[:, :, padding : padding + xv.shape[2], padding : padding + xv.shape[3]]
            return gx, gw, gb

        return self._record("conv2d", out, (x, weight, bias), backward)

    def relu(self, x):
        """Rectifier; the gradient at exactly zero is taken as zero."""
        active = x.value > 0

        def backward(g):
            return (g * active,)

        return self._record("relu", np.where(active, x.value, 0.0), (x,), backward)

    def max_pool(self, x, size=2):
        """Non-overlapping ``size`` x ``size`` max pooling; odd edges are cropped.

        Ties route the gradient to the first maximum in row-major window order.
        """
        xv = x.value
        b, c, h, w = xv.shape
        ho, wo = h // size, w // size
        if ho == 0 or wo == 0:
            raise UsageError(f"feature map {h}x{w} too small for {size}x{size} pooling")
        cropped = xv[:, :, : ho * size, : wo * size]
        blocks = cropped.reshape(b, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(b, c, ho, wo, size * size)
        first = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, first[..., None], axis=-1)[..., 0]

        def backward(g):
            routed = np.zeros_like(blocks)
            np.put_along_axis(routed, first[..., None], g[..., None], axis=-1)
            routed = routed.reshape(b, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
            gx = np.zeros_like(xv)
            gx[:, :, : ho * size, : wo * size] = routed.reshape(b, c, ho * size, wo * size)
            return (gx,)

        return self._record("max_pool", out, (x,), backward)

    def global_avg_pool(self, x):
        """(B, C, H, W) -> (B, C) spatial mean."""
        xv = x.value
        area = xv.shape[2] * xv.shape[3]

        def backward(g):
            return (np.broadcast_to(g[:, :, None, None] / area, xv.shape).copy(),)

        return self._record("gap", xv.mean(axis=(2, 3)), (x,), backward)

    def flatten(self, x):
        """Collapses all but the batch axis."""
        shape = x.value.shape

        def backward(g):
            return (g.reshape(shape),)

        return self._record("flatten", x.value.reshape(shape[0], -1), (x,), backward)

    def stop_gradient(self, x):
        """Identity forward; blocks the gradient on the way back."""
        return self._record("stop_gradient", x.value, (x,), lambda g: (None,))

    def square(self, x):
        """Elementwise square."""

        def backward(g):
            return (2.0 * x.value * g,)

        return self._record("square", x.value**2, (x,), backward)

    def sum(self, x):
        """Scalar sum of all entries."""
        shape = x.value.shape

        def backward(g):
            return (np.full(shape, g, dtype=np.float64),)

        return self._record("sum", np.float64(x.value.sum()), (x,), backward)

    def weighted_sum(self, terms):
        """Scalar ``sum(w * node)`` over ``(node, w)`` pairs of scalar nodes."""
        nodes = [node for node, _ in terms]
        weights = [float(w) for _, w in terms]
        value = np.float64(sum(w * float(n.value) for n, w in zip(nodes, weights)))

        def backward(g):
            return tuple(w * g for w in weights)

        return self._record("weighted_sum", value, nodes, backward)

    def softmax_ce(self, logits, target_probs):
        """Batch-mean cross-entropy of soft targets against softmax(logits)."""
        z = logits.value
        q = np.asarray(target_probs, dtype=np.float64)
        if q.shape != z.shape:
            raise UsageError(f"softmax_ce targets {q.shape} do not match logits {z.shape}")
        log_p = log_softmax_stable(z)
        batch = z.shape[0]
        value = np.float64(-(q * log_p).sum() / batch)

        def backward(g):
            p = np.exp(log_p)
            return (g * (p * q.sum(axis=1, keepdims=True) - q) / batch,)

        return self._record("softmax_ce", value, (logits,), backward)

    def loss(self, value, grads):
        """Scalar loss node whose gradients with respect to ``grads`` keys are given.

        ``grads`` is a list of ``(node, gradient_array)`` pairs computed analytically by
        the loss modules; the tape only chains them into the network.
        """
        nodes = [node for node, _ in grads]
        arrays = [np.asarray(a, dtype=np.float64) for _, a in grads]
        for node, array in zip(nodes, arrays):
            if array.shape != node.shape:
                raise UsageError(f"loss gradient {array.shape} does not match {node.shape}")

        def backward(g):
            return tuple(g * a for a in arrays)

        return self._record("loss", np.float64(value), nodes, backward)

    # reverse pass

    def backward(self, output=None, seed_grad=1.0):
        """Reverse-mode gradients of scalar ``output`` for every named variable.

        ``output`` defaults to the last recorded node. Variables the output does not
        depend on get exact zeros.
        """
        if output is None and self.nodes:
            output = self.nodes[-1]
        recorded = output is not None and 0 <= output.index < len(self.nodes)
        if not recorded or self.nodes[output.index] is not output:
            raise UsageError("backward called before a forward pass was recorded")
        check_finite(np.asarray(seed_grad, dtype=np.float64), "seed gradient")
        grads = [None] * len(self.nodes)
        grads[output.index] = np.asarray(seed_grad, dtype=np.float64) * np.ones_like(
            output.value, dtype=np.float64
        )
        self.visits = 0
        for node in reversed(self.nodes):
            self.visits += 1
            g = grads[node.index]
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.inputs, node.backward_fn(g)):
                if pg is None:
                    continue
                if grads[parent.index] is None:
                    grads[parent.index] = np.array(pg, dtype=np.float64)
                else:
                    grads[parent.index] = grads[parent.index] + pg
        result = {}
        for node in self.nodes:
            if node.op == "variable":
                g = grads[node.index]
                result[node.name] = np.zeros_like(node.value) if g is None else g
        logger.debug("backward visited %d nodes", self.visits)
        return result
