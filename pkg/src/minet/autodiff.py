"""Reverse-mode automatic differentiation over dense float64 tensors.

A Tensor wraps a numpy array plus an optional gradient. Every operation
builds the graph implicitly: the output tensor keeps references to its
inputs and a closure that routes the output gradient backward. Calling
``backward()`` on a scalar root walks the graph in reverse topological
order.

Each graph supports exactly one backward pass: as the walk visits a node
it hands that node's gradient buffer off to a parent where possible and
then drops it, so interior gradients never pile up and large buffers are
recycled instead of copied. A second ``backward()`` on the same root
raises RuntimeError; build a fresh forward pass instead. Leaf gradients
(parameters, inputs) persist and accumulate additively across separate
forward/backward passes until ``zero_grad()``.

Only the operations the model needs are provided. Shapes must match
exactly everywhere except the scalar gate of ``scale``.
"""

import numpy as np

from . import kernels

_grad_enabled = True
_check_finite = False


class no_grad:
    """Context manager that disables graph construction (evaluation mode)."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


def set_debug_checks(flag):
    """Enable per-op finiteness assertions (slow, for debugging)."""
    global _check_finite
    _check_finite = bool(flag)


def _finite(a):
    if _check_finite and not np.all(np.isfinite(a)):
        raise FloatingPointError("non-finite values produced by a forward op")
    return a


class Tensor:
    """Dense float64 array with optional gradient tape participation."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._prev = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def _accum(self, g, owned=False):
        """Add g into grad.

        owned=True promises the caller holds no other live reference to g
        (a fresh array, or a buffer released by the backward walk), so it
        may be adopted without copying."""
        if self.grad is None:
            self.grad = g if owned else g.copy()
        else:
            self.grad += g

    def backward(self):
        """Run reverse-mode accumulation from a scalar root.

        Interior gradients and closures are released as the walk passes
        them, so each graph can be backpropagated once."""
        if self.data.size != 1:
            raise ValueError(
                "backward() requires a scalar root, got shape %r" % (self.shape,))
        if self._backward is None and self._prev:
            raise RuntimeError(
                "backward() was already called on this graph; "
                "run the forward pass again to differentiate twice")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data), owned=True)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
                node._backward = None
                node.grad = None

    # small amount of operator sugar used by the model code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor) and other.size != 1:
            return mul(self, other)
        return scale(self, other)

    def __repr__(self):
        return "Tensor(shape=%r, requires_grad=%r)" % (self.shape, self.requires_grad)


def _wire(out, parents, backward):
    """Attach graph edges to out if grad mode is on and any parent needs it."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._backward = backward
    return out


def _require_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ValueError("%s: shape mismatch %r vs %r" % (op, a.shape, b.shape))


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    """Elementwise sum of equal-shape tensors."""
    _require_same_shape(a, b, "add")
    out = Tensor(_finite(a.data + b.data))

    def backward():
        # out.grad is dead after this closure, so exactly one parent may
        # adopt the buffer; route it to whichever parent avoids a copy.
        g = out.grad
        if a.requires_grad and b.requires_grad:
            if a.grad is None and b.grad is not None:
                b._accum(g)
                a._accum(g, owned=True)
            else:
                a._accum(g)
                b._accum(g, owned=True)
        elif a.requires_grad:
            a._accum(g, owned=True)
        elif b.requires_grad:
            b._accum(g, owned=True)

    return _wire(out, (a, b), backward)


def sub(a, b):
    """Elementwise difference of equal-shape tensors."""
    _require_same_shape(a, b, "sub")
    out = Tensor(_finite(a.data - b.data))

    def backward():
        g = out.grad
        if b.requires_grad:
            b._accum(-g, owned=True)
        if a.requires_grad:
            a._accum(g, owned=True)

    return _wire(out, (a, b), backward)


def mul(a, b):
    """Elementwise product of equal-shape tensors."""
    _require_same_shape(a, b, "mul")
    out = Tensor(_finite(a.data * b.data))

    def backward():
        g = out.grad
        if a.requires_grad and b.requires_grad:
            a._accum(g * b.data, owned=True)
            b._accum(np.multiply(g, a.data, out=g), owned=True)
        elif a.requires_grad:
            a._accum(np.multiply(g, b.data, out=g), owned=True)
        elif b.requires_grad:
            b._accum(np.multiply(g, a.data, out=g), owned=True)

    return _wire(out, (a, b), backward)


def scale(x, s):
    """Multiply by a scalar: a python float or a learnable 1-element tensor."""
    if isinstance(s, Tensor):
        if s.size != 1:
            raise ValueError("scale: gate must hold exactly one element")
        sv = float(s.data.reshape(-1)[0])
        out = Tensor(_finite(x.data * sv))

        def backward():
            g = out.grad
            if s.requires_grad:
                s._accum(np.array(np.vdot(g, x.data)).reshape(s.shape),
                         owned=True)
            if x.requires_grad:
                x._accum(np.multiply(g, sv, out=g), owned=True)

        return _wire(out, (x, s), backward)

    sv = float(s)
    out = Tensor(_finite(x.data * sv))

    def backward():
        if x.requires_grad:
            x._accum(np.multiply(out.grad, sv, out=out.grad), owned=True)

    return _wire(out, (x,), backward)


def sigmoid(x):
    """Logistic function; pre-activations are clamped to [-40, 40]."""
    y = 1.0 / (1.0 + np.exp(-np.clip(x.data, -40.0, 40.0)))
    out = Tensor(y)

    def backward():
        if x.requires_grad:
            g = np.multiply(out.grad, y, out=out.grad)
            g *= (1.0 - y)
            x._accum(g, owned=True)

    return _wire(out, (x,), backward)


def relu(x):
    """max(x, 0); subgradient at 0 is 0."""
    out = Tensor(np.maximum(x.data, 0.0))

    def backward():
        if x.requires_grad:
            x._accum(np.multiply(out.grad, x.data > 0.0, out=out.grad),
                     owned=True)

    return _wire(out, (x,), backward)


# ---------------------------------------------------------------------------
# shape plumbing


def concat(tensors, axis):
    """Concatenate along one axis; every other axis must agree."""
    tensors = list(tensors)
    base = tensors[0].shape
    for t in tensors[1:]:
        if (t.ndim != len(base)
                or any(t.shape[d] != base[d] for d in range(t.ndim) if d != axis)):
            raise ValueError("concat: incompatible shapes %r vs %r" % (base, t.shape))
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))

    def backward():
        g = out.grad
        offset = 0
        index = [slice(None)] * g.ndim
        for t in tensors:
            n = t.shape[axis]
            index[axis] = slice(offset, offset + n)
            if t.requires_grad:
                # disjoint views of the released out.grad; each parent may
                # adopt its slice without a copy
                t._accum(g[tuple(index)], owned=True)
            offset += n

    return _wire(out, tensors, backward)


def reshape(x, shape):
    """Row-major reshape; element count must be preserved."""
    out = Tensor(np.reshape(x.data, shape))

    def backward():
        if x.requires_grad:
            # the released out.grad may be adopted even as a view
            x._accum(out.grad.reshape(x.shape), owned=True)

    return _wire(out, (x,), backward)


def transpose(x, axes):
    """Permute axes; the gradient applies the inverse permutation."""
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ValueError("transpose: invalid permutation %r for ndim %d"
                         % (axes, x.ndim))
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.transpose(x.data, axes))

    def backward():
        if x.requires_grad:
            x._accum(out.grad.transpose(inverse), owned=True)

    return _wire(out, (x,), backward)


def narrow(x, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    if start < 0 or start + length > x.shape[axis]:
        raise ValueError("narrow: slice [%d, %d) exceeds axis size %d"
                         % (start, start + length, x.shape[axis]))
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = Tensor(np.ascontiguousarray(x.data[index]))

    def backward():
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[index] += out.grad

    return _wire(out, (x,), backward)


def tile_spatial(x, h, w):
    """Broadcast a (B, C, 1, 1) tensor over an (h, w) spatial grid."""
    b, c, h1, w1 = x.shape
    if (h1, w1) != (1, 1):
        raise ValueError("tile_spatial expects trailing singleton axes, got %r"
                         % (x.shape,))
    out = Tensor(np.broadcast_to(x.data, (b, c, h, w)).copy())

    def backward():
        if x.requires_grad:
            x._accum(out.grad.sum(axis=(2, 3), keepdims=True), owned=True)

    return _wire(out, (x,), backward)


def channel_scale(x, gates):
    """Scale each feature map of x (B, C, H, W) by gates (B, C, 1, 1).

    Equivalent to mul(x, tile_spatial(gates, H, W)) without materializing
    the tiled gate."""
    if x.ndim != 4 or gates.shape != (x.shape[0], x.shape[1], 1, 1):
        raise ValueError("channel_scale: got x %r with gates %r"
                         % (x.shape, gates.shape))
    out = Tensor(_finite(x.data * gates.data))

    def backward():
        g = out.grad
        if gates.requires_grad:
            gg = np.einsum("bchw,bchw->bc", g, x.data)
            gates._accum(gg[:, :, None, None], owned=True)
        if x.requires_grad:
            x._accum(np.multiply(g, gates.data, out=g), owned=True)

    return _wire(out, (x, gates), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError("matmul: incompatible shapes %r x %r" % (a.shape, b.shape))
    out = Tensor(_finite(a.data @ b.data))

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accum(g @ b.data.T, owned=True)
        if b.requires_grad:
            b._accum(a.data.T @ g, owned=True)

    return _wire(out, (a, b), backward)


def bmm(a, b):
    """Batched matrix product: (N, M, K) @ (N, K, P) -> (N, M, P)."""
    if (a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0]
            or a.shape[2] != b.shape[1]):
        raise ValueError("bmm: incompatible shapes %r x %r" % (a.shape, b.shape))
    out = Tensor(_finite(np.matmul(a.data, b.data)))

    def backward():
        g = out.grad
        if a.requires_grad:
            # einsum contracts over the shared last axis through b's strides,
            # avoiding the buffer copy matmul makes for a transposed operand
            a._accum(np.einsum("nij,ntj->nit", g, b.data), owned=True)
        if b.requires_grad:
            at = np.ascontiguousarray(a.data.transpose(0, 2, 1))
            b._accum(np.matmul(at, g), owned=True)

    return _wire(out, (a, b), backward)


def gram_rows(x):
    """Pairwise row inner products: (N, M, K) -> (N, M, M), x[n] @ x[n].T."""
    if x.ndim != 3:
        raise ValueError("gram_rows expects a 3-D tensor, got %r" % (x.shape,))
    out = Tensor(_finite(np.einsum("nik,njk->nij", x.data, x.data)))

    def backward():
        if x.requires_grad:
            g = out.grad
            x._accum(np.matmul(g + g.transpose(0, 2, 1), x.data), owned=True)

    return _wire(out, (x,), backward)


def softmax_rows(a):
    """Row-wise softmax of a 2-D tensor, max-subtracted for stability."""
    if a.ndim != 2:
        raise ValueError("softmax_rows expects a 2-D tensor, got %r" % (a.shape,))
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)
    out = Tensor(s)

    def backward():
        if a.requires_grad:
            g = out.grad
            dot = (g * s).sum(axis=1, keepdims=True)
            a._accum(s * (g - dot), owned=True)

    return _wire(out, (a,), backward)


def tsum(x):
    """Sum of all elements, as a scalar tensor."""
    out = Tensor(np.sum(x.data))

    def backward():
        if x.requires_grad:
            x._accum(np.full(x.shape, float(out.grad)), owned=True)

    return _wire(out, (x,), backward)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x, w, bias, stride=1, padding=0):
    """2-D correlation over (B, C, H, W) with weight (O, C, kh, kw).

    3x3 and 1x1 stride-1 shapes take compiled fast paths; anything else
    falls back to the reference implementation.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d: expected 4-D input and weight, got %r and %r"
                         % (x.shape, w.shape))
    if x.shape[1] != w.shape[1]:
        raise ValueError("conv2d: input channels %d do not match weight channels %d"
                         % (x.shape[1], w.shape[1]))
    o, c, kh, kw = w.shape
    if bias.shape != (o,):
        raise ValueError("conv2d: bias shape %r does not match %d output channels"
                         % (bias.shape, o))
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise ValueError("conv2d: kernel %dx%d does not fit input %r with padding %d"
                         % (kh, kw, x.shape, padding))

    xd = np.ascontiguousarray(x.data)
    wd = np.ascontiguousarray(w.data)
    fused3 = ((kh, kw) == (3, 3) and stride == 1 and padding == 1
              and x.shape[3] >= 2)
    fast3 = (kh, kw) == (3, 3) and stride == 1 and padding <= 2
    fast1 = (kh, kw) == (1, 1) and stride == 1 and padding == 0

    if fused3:
        out = Tensor(_finite(kernels.conv3x3_fwd_p1(xd, wd, bias.data)))

        def backward():
            g = np.ascontiguousarray(out.grad)
            if w.requires_grad or bias.requires_grad:
                gw, gb = kernels.conv3x3_wgrad_p1(xd, g)
                if w.requires_grad:
                    w._accum(gw, owned=True)
                if bias.requires_grad:
                    bias._accum(gb, owned=True)
            if x.requires_grad:
                # pad-1 is self-transpose: correlate g with the spatially
                # flipped, channel-transposed weights
                wt = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                x._accum(kernels.conv3x3_fwd_p1(g, wt, np.zeros(c)), owned=True)

    elif fast3:
        xp = kernels.pad2d(xd, padding) if padding else xd
        out = Tensor(_finite(kernels.conv3x3_fwd(xp, wd, bias.data)))

        def backward():
            g = np.ascontiguousarray(out.grad)
            if x.requires_grad:
                wt = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                gp = kernels.pad2d(g, 2 - padding) if padding != 2 else g
                x._accum(kernels.conv3x3_fwd(gp, wt, np.zeros(c)), owned=True)
            if w.requires_grad:
                w._accum(kernels.conv3x3_wgrad(xp, g), owned=True)
            if bias.requires_grad:
                bias._accum(g.sum(axis=(0, 2, 3)), owned=True)

    elif fast1:
        b_sz, _, h_sz, w_sz = xd.shape
        k = h_sz * w_sz
        w11 = np.ascontiguousarray(wd[:, :, 0, 0])
        xr = xd.reshape(b_sz, c, k)
        out_d = np.matmul(w11, xr)
        out_d += bias.data[:, None]
        out = Tensor(_finite(out_d.reshape(b_sz, o, h_sz, w_sz)))

        def backward():
            g = out.grad.reshape(b_sz, o, k)
            if x.requires_grad:
                gx = np.matmul(w11.T, g)
                x._accum(gx.reshape(xd.shape), owned=True)
            if w.requires_grad:
                gw = np.matmul(g, xr.transpose(0, 2, 1)).sum(axis=0)
                w._accum(gw[:, :, None, None], owned=True)
            if bias.requires_grad:
                bias._accum(g.sum(axis=(0, 2)), owned=True)

    else:
        out = Tensor(_finite(
            kernels.conv2d_ref_forward(xd, wd, bias.data, stride, padding)))

        def backward():
            g = out.grad
            if x.requires_grad:
                x._accum(kernels.conv2d_ref_input_grad(g, xd.shape, wd,
                                                       stride, padding), owned=True)
            if w.requires_grad:
                w._accum(kernels.conv2d_ref_weight_grad(g, xd, wd.shape,
                                                        stride, padding), owned=True)
            if bias.requires_grad:
                bias._accum(g.sum(axis=(0, 2, 3)), owned=True)

    return _wire(out, (x, w, bias), backward)


def conv3d(x, w, bias, padding=None):
    """Volume correlation over (B, 1, C, H, W) with weight (1, 1, kc, kh, kw).

    Padding must make the output shape equal the input shape (same-padding);
    omit it to use (k-1)/2 per axis.
    """
    if x.ndim != 5 or x.shape[1] != 1:
        raise ValueError("conv3d: expected (B, 1, C, H, W) input, got %r" % (x.shape,))
    if w.ndim != 5 or w.shape[0] != 1 or w.shape[1] != 1:
        raise ValueError("conv3d: expected (1, 1, kc, kh, kw) weight, got %r"
                         % (w.shape,))
    if bias.shape != (1,):
        raise ValueError("conv3d: bias must have shape (1,), got %r" % (bias.shape,))
    kc, kh, kw = w.shape[2:]
    if padding is None:
        padding = ((kc - 1) // 2, (kh - 1) // 2, (kw - 1) // 2)
    elif isinstance(padding, int):
        padding = (padding, padding, padding)
    for k, p in zip((kc, kh, kw), padding):
        if 2 * p != k - 1:
            raise ValueError(
                "conv3d: padding %r with kernel %r does not preserve shape"
                % (padding, (kc, kh, kw)))

    b = x.shape[0]
    vol_shape = x.shape[2:]
    xd = np.ascontiguousarray(x.data.reshape((b,) + vol_shape))
    wd = np.ascontiguousarray(w.data[0, 0])
    fast = (kc, kh, kw) == (3, 3, 3) and x.shape[4] >= 2

    if fast:
        out_d = kernels.conv3x3x3_fwd_p1(xd, wd, float(bias.data[0]))
        out = Tensor(_finite(out_d.reshape(x.shape)))

        def backward():
            g = np.ascontiguousarray(out.grad.reshape((b,) + vol_shape))
            if w.requires_grad:
                gw = kernels.conv3x3x3_wgrad_p1(xd, g)
                w._accum(gw.reshape(w.shape), owned=True)
            if bias.requires_grad:
                bias._accum(np.array([g.sum()]), owned=True)
            if x.requires_grad:
                wf = np.ascontiguousarray(wd[::-1, ::-1, ::-1])
                gx = kernels.conv3x3x3_fwd_p1(g, wf, 0.0)
                x._accum(gx.reshape(x.shape), owned=True)

    else:
        out_d = kernels.conv3d_ref_forward(xd, wd, float(bias.data[0]), padding)
        out = Tensor(_finite(out_d.reshape(x.shape)))

        def backward():
            g = out.grad.reshape((b,) + vol_shape)
            if x.requires_grad:
                gx = kernels.conv3d_ref_input_grad(g, xd.shape, wd, padding)
                x._accum(gx.reshape(x.shape), owned=True)
            if w.requires_grad:
                gw = kernels.conv3d_ref_weight_grad(g, xd, wd.shape, padding)
                w._accum(gw.reshape(w.shape), owned=True)
            if bias.requires_grad:
                bias._accum(np.array([g.sum()]), owned=True)

    return _wire(out, (x, w, bias), backward)


# ---------------------------------------------------------------------------
# rearrangement and pooling


def _shuffle_fwd(d, r):
    b, crr, h, w = d.shape
    c = crr // (r * r)
    return np.ascontiguousarray(
        d.reshape(b, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
        .reshape(b, c, h * r, w * r))


def _unshuffle_fwd(d, r):
    b, c, hr, wr = d.shape
    h, w = hr // r, wr // r
    return np.ascontiguousarray(
        d.reshape(b, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4)
        .reshape(b, c * r * r, h, w))


def pixel_shuffle(x, r):
    """Rearrange (B, C*r*r, H, W) into (B, C, H*r, W*r); a bijection."""
    if x.shape[1] % (r * r) != 0:
        raise ValueError("pixel_shuffle: %d channels not divisible by r^2=%d"
                         % (x.shape[1], r * r))
    out = Tensor(_shuffle_fwd(x.data, r))

    def backward():
        if x.requires_grad:
            x._accum(_unshuffle_fwd(out.grad, r), owned=True)

    return _wire(out, (x,), backward)


def pixel_unshuffle(x, r):
    """Inverse of pixel_shuffle: (B, C, H*r, W*r) -> (B, C*r*r, H, W)."""
    if x.shape[2] % r != 0 or x.shape[3] % r != 0:
        raise ValueError("pixel_unshuffle: spatial dims %r not divisible by r=%d"
                         % (x.shape[2:], r))
    out = Tensor(_unshuffle_fwd(x.data, r))

    def backward():
        if x.requires_grad:
            x._accum(_shuffle_fwd(out.grad, r), owned=True)

    return _wire(out, (x,), backward)


def global_avg_pool(x):
    """Per-channel spatial mean: (B, C, H, W) -> (B, C, 1, 1)."""
    b, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3), keepdims=True))

    def backward():
        if x.requires_grad:
            x._accum(np.broadcast_to(out.grad / (h * w), x.shape))

    return _wire(out, (x,), backward)


def l1_loss(pred, target):
    """Mean absolute error; the subgradient at exact ties is 0."""
    _require_same_shape(pred, target, "l1_loss")
    diff = pred.data - target.data
    out = Tensor(np.mean(np.abs(diff)))

    def backward():
        s = np.sign(diff) * (float(out.grad) / diff.size)
        if pred.requires_grad:
            pred._accum(s, owned=not target.requires_grad)
        if target.requires_grad:
            target._accum(-s, owned=True)

    return _wire(out, (pred, target), backward)
