"""Capsule layers with locally-constrained dynamic routing.

A capsule grid is an (h, w, T, z) tensor: a spatial grid of T capsule types,
each a z-dimensional pose vector. A layer turns child capsules into parent
capsules in three steps:

1. predict: every parent position gathers the child poses inside a kh x kw
   window and multiplies each (child type, kernel slot) pose by a learned
   z_child -> z_parent matrix shared across spatial positions. Deconv layers
   do the same over a zero-stuffed grid, doubling resolution.
2. route: coupling coefficients start uniform (zero logits), and for d
   iterations are re-normalized by softmax over parent types, used to form
   the weighted vote sum, squashed, and updated by the vote/output agreement
   dot product.
3. squash: poses are scaled to norm < 1, preserving direction.

The readout grid has a single capsule type; pose lengths give the
segmentation probability map, and masked poses feed a three-layer 1x1
convolutional reconstruction decoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


def _squash_eps(dtype):
    return 1e-30 if np.dtype(dtype) == np.float64 else 1e-20


def squash(p, axis=-1):
    """Scale vectors along ``axis`` to norm n^2/(1+n^2) < 1, same direction.

    The zero vector maps to the zero vector (the limit of the scaling), with
    a finite gradient.
    """
    p = T.as_tensor(p)
    n2 = T.sum_(T.square(p), axis=axis, keepdims=True)
    eps = _squash_eps(p.dtype)
    scale = T.div(T.sqrt(T.add(n2, eps)), T.add(n2, 1.0))
    return T.mul(p, scale)


def pose_lengths(poses, axis=-1):
    """Euclidean norms along ``axis``, differentiable at zero."""
    poses = T.as_tensor(poses)
    n2 = T.sum_(T.square(poses), axis=axis, keepdims=False)
    return T.sqrt(T.add(n2, _squash_eps(poses.dtype)))


def routing_softmax(logits):
    """Coupling coefficients from routing logits: softmax over parent types
    (the last axis), stabilized by max-subtraction."""
    return T.softmax(logits, axis=-1)


class CapsuleGrid:
    """An h x w grid of capsule types with z-dimensional poses."""

    def __init__(self, poses):
        poses = T.as_tensor(poses)
        if poses.ndim != 4:
            raise T.ShapeError(
                f"capsule grid poses must be (h, w, types, dim), got {poses.shape}"
            )
        self.poses = poses

    @property
    def height(self):
        return self.poses.shape[0]

    @property
    def width(self):
        return self.poses.shape[1]

    @property
    def num_types(self):
        return self.poses.shape[2]

    @property
    def pose_dim(self):
        return self.poses.shape[3]

    def __repr__(self):
        h, w, t, z = self.poses.shape
        return f"CapsuleGrid({h}x{w}, {t} types x {z}d)"


@dataclass
class TransformKernel:
    """Learned child->parent transformation weights, shared across positions.

    ``weights`` has shape (kh, kw, z_child, child_types, parent_types,
    z_parent): one z_child x z_parent matrix per (kernel slot, child type,
    parent type). Distinct child types have independent weights; no spatial
    position dependence.
    """

    weights: Tensor
    kh: int
    kw: int
    stride: int
    mode: str = "conv"

    def __post_init__(self):
        if self.mode not in ("conv", "deconv"):
            raise ValueError(f"unknown kernel mode {self.mode!r}")
        if self.weights.ndim != 6:
            raise T.ShapeError(
                f"kernel weights must be rank 6, got {self.weights.shape}"
            )
        if self.weights.shape[0] != self.kh or self.weights.shape[1] != self.kw:
            raise T.ShapeError(
                f"kernel extents {(self.kh, self.kw)} disagree with weights "
                f"{self.weights.shape}"
            )
        if self.mode == "conv" and (self.kh % 2 == 0 or self.kw % 2 == 0):
            raise ValueError("conv capsule kernels must have odd extents")
        if self.mode == "deconv" and self.stride not in (1, 2):
            raise ValueError(f"unsupported deconv stride {self.stride}")

    @property
    def child_dim(self):
        return self.weights.shape[2]

    @property
    def child_types(self):
        return self.weights.shape[3]

    @property
    def parent_types(self):
        return self.weights.shape[4]

    @property
    def parent_dim(self):
        return self.weights.shape[5]

    def param_count(self):
        return int(np.prod(self.weights.shape))


@dataclass
class RoutingState:
    """Logits and coefficients of one routing invocation, with optional
    per-iteration (coefficients, agreement) snapshots."""

    logits: np.ndarray
    coefficients: np.ndarray
    iterations: int
    trace: list = field(default_factory=list)


def _check_grid_kernel(children, kernel):
    if (children.num_types != kernel.child_types
            or children.pose_dim != kernel.child_dim):
        raise T.ShapeError(
            f"grid {children.poses.shape} does not match kernel child side "
            f"({kernel.child_types} types x {kernel.child_dim}d)"
        )


def predict(children, kernel):
    """Prediction vectors: (hp, wp, child_types, kh*kw, parent_types, z_parent).

    Each entry is the vote of one child capsule (type x kernel slot) for one
    parent type's pose at one parent position. Conv mode reads a strided
    window of the child grid; deconv mode reads a stride-1 window of the
    zero-stuffed child grid, so parent extents are stride * child extents.
    """
    if not isinstance(children, CapsuleGrid):
        children = CapsuleGrid(children)
    _check_grid_kernel(children, kernel)
    w = kernel.weights
    h, wd, tc, zc = children.poses.shape
    kh, kw = kernel.kh, kernel.kw
    tp, zp = kernel.parent_types, kernel.parent_dim
    x = children.poses.reshape(h, wd, tc * zc)
    if kernel.mode == "conv":
        cols = T.conv2d_lower(x, kh, kw, kernel.stride, "same")
        hp, wp = h // kernel.stride, wd // kernel.stride
    else:
        stuffed = T.upsample_zeros(x, kernel.stride)
        cols = T.conv2d_lower(stuffed, kh, kw, 1, "same")
        hp, wp = h * kernel.stride, wd * kernel.stride
    k = kh * kw
    cols = cols.reshape(hp * wp, k, tc, zc).transpose(2, 1, 0, 3)
    wmat = w.transpose(3, 0, 1, 2, 4, 5).reshape(tc, k, zc, tp * zp)
    u = T.matmul(cols, wmat)
    return u.reshape(tc, k, hp, wp, tp, zp).transpose(2, 3, 0, 1, 4, 5)


def route(u, iterations, routing_enabled=True, stop_gradient_agreement=False,
          state=None):
    """Locally-constrained dynamic routing over prediction vectors.

    ``u`` is (hp, wp, child_types, kh*kw, parent_types, z_parent). Logits
    start at zero; each iteration computes coefficients by softmax over
    parent types, the coefficient-weighted vote sum, its squash, and adds the
    vote/output dot product back onto the logits. Gradients flow through all
    unrolled iterations unless ``stop_gradient_agreement`` detaches the
    update. With ``routing_enabled=False`` coefficients stay uniform and no
    iteration occurs. Pass a :class:`RoutingState` as ``state`` to record
    per-iteration snapshots.
    """
    u = T.as_tensor(u)
    if u.ndim != 6:
        raise T.ShapeError(f"prediction vectors must be rank 6, got {u.shape}")
    if iterations < 1:
        raise ValueError(f"routing iterations must be >= 1, got {iterations}")
    hp, wp, tc, k, tp, zp = u.shape

    if not routing_enabled or tp == 1:
        # uniform coefficient 1/tp; for a single parent type the softmax over
        # one logit is identically 1, so this is exact for any d
        p = T.mul(T.sum_(u, axis=(2, 3)), 1.0 / tp)
        v = squash(p)
        if state is not None:
            state.logits = np.zeros((hp, wp, tc, k, tp), dtype=u.dtype)
            state.coefficients = np.full(
                (hp, wp, tc, k, tp), 1.0 / tp, dtype=u.dtype
            )
            state.iterations = 0 if not routing_enabled else iterations
        return v

    b = T.zeros((hp, wp, tc, k, tp))
    r = None
    for it in range(iterations):
        r = routing_softmax(b)
        votes = T.mul(r.reshape(hp, wp, tc, k, tp, 1), u)
        p = T.sum_(votes, axis=(2, 3))
        v = squash(p)
        a = None
        if it < iterations - 1:
            a = T.sum_(T.mul(u, v.reshape(hp, wp, 1, 1, tp, zp)), axis=-1)
            if stop_gradient_agreement:
                a = T.detach(a)
            b = T.add(b, a)
        if state is not None:
            state.trace.append({
                "coefficients": r.data.copy(),
                "logits": b.data.copy(),
                "agreement": None if a is None else a.data.copy(),
            })
    if state is not None:
        state.logits = b.data.copy()
        state.coefficients = r.data.copy()
        state.iterations = iterations
    return v


def _votes_from_cols(cols, w, tc, zc, k, hw, tp, zp):
    # cols: (h', w', k*tc*zc) patch rows; returns votes (hw, tp, S, zp)
    cols = cols.reshape(hw, k, tc, zc).transpose(2, 1, 0, 3)
    wmat = w.transpose(3, 0, 1, 2, 4, 5).reshape(tc, k, zc, tp * zp)
    u = T.matmul(cols, wmat)  # (tc, k, hw, tp*zp)
    return u.reshape(tc * k, hw, tp, zp).transpose(1, 2, 0, 3)


def _predict_fused(children, kernel):
    """Prediction votes in matmul-friendly layout plus parent extents.

    Same votes as :func:`predict` (routing slots ordered by child type then
    kernel position), restructured so routing contracts via batched products.
    Returns (votes, hp, wp, assemble) where ``assemble(v)`` turns routed
    (positions, Tp, zp) poses into the (hp, wp, Tp, zp) grid.

    For stride-2 deconv with even kernels the zero-stuffed grid is replaced
    by its four parent parity classes, each a stride-1 pass with the 2x2
    sub-kernel that parity actually reads; the dropped slots are the
    structurally-zero votes, which are inert under routing, so the result is
    element-for-element that of the zero-stuffed pass.
    """
    _check_grid_kernel(children, kernel)
    w = kernel.weights
    h, wd, tc, zc = children.poses.shape
    kh, kw = kernel.kh, kernel.kw
    tp, zp = kernel.parent_types, kernel.parent_dim
    x = children.poses.reshape(h, wd, tc * zc)

    if kernel.mode == "conv":
        hp, wp = h // kernel.stride, wd // kernel.stride
        cols = T.conv2d_lower(x, kh, kw, kernel.stride, "same")
        u = _votes_from_cols(cols, w, tc, zc, kh * kw, hp * wp, tp, zp)

        def assemble(v):
            return v.reshape(hp, wp, tp, zp)

        return u, hp, wp, assemble

    hp, wp = h * kernel.stride, wd * kernel.stride
    if kernel.stride == 2 and kh % 2 == 0 and kw % 2 == 0:
        # parity decomposition: parent (2y+py, 2x+px) reads child rows
        # y + sy with original kernel row ky = 2*sy + (1 - py), ditto columns
        cols = T.conv2d_lower(x, kh // 2, kw // 2, 1, "same")
        blocks = []
        for py in (0, 1):
            for px in (0, 1):
                ky = list(range(1 - py, kh, 2))
                kx = list(range(1 - px, kw, 2))
                sub = T.index_grid(w, ky, kx)
                blocks.append(
                    _votes_from_cols(cols, sub, tc, zc,
                                     (kh // 2) * (kw // 2), h * wd, tp, zp)
                )
        u = T.concat(blocks, axis=0)  # (4*h*w, tp, S, zp)

        def assemble(v):
            return T.parity_interleave(v.reshape(4, h, wd, tp, zp))

        return u, hp, wp, assemble

    stuffed = T.upsample_zeros(x, kernel.stride)
    cols = T.conv2d_lower(stuffed, kh, kw, 1, "same")
    u = _votes_from_cols(cols, w, tc, zc, kh * kw, hp * wp, tp, zp)

    def assemble(v):
        return v.reshape(hp, wp, tp, zp)

    return u, hp, wp, assemble


def _route_fused(u, iterations, routing_enabled=True,
                 stop_gradient_agreement=False):
    """Routing over (positions, Tp, S, zp) votes; returns poses
    (positions, Tp, zp).

    Algebraically identical to :func:`route` on the spec layout: the
    coefficient-weighted vote sum and the agreement update are batched
    vector/matrix products over (position, parent type).
    """
    n, tp, s, zp = u.shape
    if not routing_enabled or tp == 1:
        p = T.mul(T.sum_(u, axis=2), 1.0 / tp)
        return squash(p)
    b = T.zeros((n, tp, s))
    for it in range(iterations):
        r = T.softmax(b, axis=1)
        p = T.vecmat(r, u)
        v = squash(p)
        if it < iterations - 1:
            a = T.matvec(u, v)
            if stop_gradient_agreement:
                a = T.detach(a)
            b = T.add(b, a)
    return v


def conv_capsule(children, kernel, iterations, routing_enabled=True, **kw):
    """Convolutional capsule layer: predict then route."""
    if kernel.mode != "conv":
        raise ValueError("conv_capsule requires a conv-mode kernel")
    u = predict(children, kernel)
    return CapsuleGrid(route(u, iterations, routing_enabled, **kw))


def deconv_capsule(children, kernel, iterations, routing_enabled=True, **kw):
    """Deconvolutional capsule layer: transposed-geometry predict then route."""
    if kernel.mode != "deconv":
        raise ValueError("deconv_capsule requires a deconv-mode kernel")
    u = predict(children, kernel)
    return CapsuleGrid(route(u, iterations, routing_enabled, **kw))


def concat_types(a, b):
    """Concatenate two capsule grids along the type axis (skip connection)."""
    if a.height != b.height or a.width != b.width:
        raise T.ShapeError(
            f"skip concat needs equal spatial extents, got {a.height}x{a.width} "
            f"vs {b.height}x{b.width}"
        )
    if a.pose_dim != b.pose_dim:
        raise T.ShapeError(
            f"skip concat needs equal pose dims, got {a.pose_dim} vs {b.pose_dim}"
        )
    return CapsuleGrid(T.concat([a.poses, b.poses], axis=2))


def segmentation_readout(grid, threshold=0.5):
    """Binary mask (pose length > threshold) and the raw length map.

    The grid must hold exactly one capsule type. Lengths are < 1 by the
    squash bound, so threshold 1.0 yields an all-background mask.
    """
    if grid.num_types != 1:
        raise ValueError(
            f"segmentation readout expects 1 capsule type, got {grid.num_types}"
        )
    h, w, _, z = grid.poses.shape
    lengths = pose_lengths(grid.poses.reshape(h, w, z))
    mask = (lengths.data > threshold).astype(np.uint8)
    return mask, lengths


class Conv2d:
    """Plain 2-D convolution (+ bias, optional relu) via patch lowering."""

    def __init__(self, weights, bias, stride=1, activation="relu", name="conv"):
        self.weights = weights  # (kh, kw, cin, cout)
        self.bias = bias  # (cout,)
        self.stride = stride
        self.activation = activation
        self.name = name

    def forward(self, x):
        kh, kw, cin, cout = self.weights.shape
        h, w = x.shape[0], x.shape[1]
        cols = T.conv2d_lower(x, kh, kw, self.stride, "same")
        hp, wp = h // self.stride, w // self.stride
        flat = T.matmul(
            cols.reshape(hp * wp, kh * kw * cin),
            self.weights.reshape(kh * kw * cin, cout),
        )
        out = T.add(flat, self.bias)
        if self.activation == "relu":
            out = T.relu(out)
        return out.reshape(hp, wp, cout)

    def params(self):
        return [(f"{self.name}.weights", self.weights), (f"{self.name}.bias", self.bias)]


class CapsuleLayer:
    """One conv or deconv capsule layer with its routing configuration."""

    def __init__(self, kernel, iterations, routing_enabled=True, name="caps"):
        self.kernel = kernel
        self.iterations = iterations
        self.routing_enabled = routing_enabled
        self.name = name

    def forward(self, grid, stop_gradient_agreement=False):
        u, _, _, assemble = _predict_fused(grid, self.kernel)
        v = _route_fused(u, self.iterations, self.routing_enabled,
                         stop_gradient_agreement)
        return CapsuleGrid(assemble(v))

    def params(self):
        return [(f"{self.name}.weights", self.kernel.weights)]

    def param_count(self):
        return self.kernel.param_count()


class ReconstructionDecoder:
    """Three 1x1 convolutions decoding masked capsule poses to an image.

    Widths default to 64 -> 128 -> 1; the first two layers use relu, the
    output layer a logistic activation so pixels land in (0, 1).
    """

    def __init__(self, w1, b1, w2, b2, w3, b3, name="decoder"):
        self.w1, self.b1 = w1, b1
        self.w2, self.b2 = w2, b2
        self.w3, self.b3 = w3, b3
        self.name = name

    def forward(self, poses):
        h, w, z = poses.shape
        flat = poses.reshape(h * w, z)
        a1 = T.relu(T.add(T.matmul(flat, self.w1), self.b1))
        a2 = T.relu(T.add(T.matmul(a1, self.w2), self.b2))
        out = T.sigmoid(T.add(T.matmul(a2, self.w3), self.b3))
        return out.reshape(h, w)

    def params(self):
        n = self.name
        return [
            (f"{n}.w1", self.w1), (f"{n}.b1", self.b1),
            (f"{n}.w2", self.w2), (f"{n}.b2", self.b2),
            (f"{n}.w3", self.w3), (f"{n}.b3", self.b3),
        ]


def masked_reconstruct(grid, positive_mask, decoder):
    """Zero the capsule poses outside the positive mask, then decode.

    Positions with mask 0 contribute nothing to the reconstruction and
    receive no gradient from its loss.
    """
    if grid.num_types != 1:
        raise ValueError("masked reconstruction expects the readout grid (1 type)")
    h, w, _, z = grid.poses.shape
    mask = np.asarray(positive_mask)
    if mask.shape != (h, w):
        raise T.ShapeError(
            f"mask shape {mask.shape} does not match grid {h}x{w}"
        )
    mask3 = Tensor(mask.astype(grid.poses.dtype).reshape(h, w, 1),
                   dtype=grid.poses.dtype)
    masked = T.mul(grid.poses.reshape(h, w, z), mask3)
    return decoder.forward(masked)


def perturb_capsule(grid, dim_index, deltas, positive_mask, decoder):
    """Reconstructions after nudging pose component ``dim_index`` by each
    delta at all positive positions. Returns one (h, w) image per delta."""
    z = grid.pose_dim
    if not 0 <= dim_index < z:
        raise IndexError(f"pose dimension {dim_index} out of range [0, {z})")
    h, w = grid.height, grid.width
    mask = np.asarray(positive_mask).astype(grid.poses.dtype)
    images = []
    with T.no_grad():
        for delta in deltas:
            shifted = grid.poses.data.copy()
            shifted[:, :, 0, dim_index] += delta * mask
            out = masked_reconstruct(
                CapsuleGrid(Tensor(shifted, dtype=shifted.dtype)),
                positive_mask, decoder,
            )
            images.append(np.asarray(out.data, dtype=np.float64))
    return images
