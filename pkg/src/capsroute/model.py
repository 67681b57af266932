"""Declarative model construction and parameter arithmetic.

A model is an initial 2-D convolution producing an f-feature map (read as a
1-type x f-dim capsule grid) followed by configured conv/deconv capsule
layers, optional skip concatenations over the type axis, and a single-type
readout whose pose lengths form the segmentation map. Presets cover the full
encoder-decoder network, its R1 variant (routing only where spatial
dimensions change), the three-layer baseline, and desk-scale small/tiny
variants.

Parameter counters are exact closed-form oracles: the shared-kernel count
for capsule layers, the fully-connected count of the original capsule
lineage, and a standard U-Net ladder for reduction reporting.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import layers as L
from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    """Model configuration failed validation."""


LAYER_KINDS = ("conv2d", "conv_capsule", "deconv_capsule", "readout")


@dataclass
class LayerSpec:
    name: str
    kind: str
    kernel: int = 5
    stride: int = 1
    out_types: int = 1
    out_dim: int = 16
    iterations: int = 3
    routing_enabled: bool = True
    skip_source: str | None = None


@dataclass
class ModelConfig:
    height: int
    width: int
    layers: list
    loss: str = "weighted_bce"
    m_pos: float = 0.9
    m_neg: float = 0.1
    lambda_neg: float = 0.5
    rec_scale: object = "auto"  # "auto" -> 0.0005 * pixel count
    threshold: float = 0.5
    decoder_widths: tuple = (64, 128)
    preset: str | None = None

    def resolved_rec_scale(self):
        if self.rec_scale == "auto":
            return 0.0005 * self.height * self.width
        return float(self.rec_scale)


def resolve_geometry(config):
    """Per-layer output shapes (h, w, types, dim) after skip concatenation.

    Raises :class:`ConfigError` naming the offending layer on any mismatch.
    """
    if not config.layers:
        raise ConfigError("model has no layers")
    if config.layers[0].kind != "conv2d":
        raise ConfigError(
            f"first layer must be conv2d, got {config.layers[0].kind!r} "
            f"({config.layers[0].name})"
        )
    if config.layers[-1].kind != "readout":
        raise ConfigError(
            f"last layer must be readout, got {config.layers[-1].kind!r} "
            f"({config.layers[-1].name})"
        )
    h, w = config.height, config.width
    shapes = []
    by_name = {}
    cur = None
    for i, spec in enumerate(config.layers):
        if spec.kind not in LAYER_KINDS:
            raise ConfigError(f"layer {spec.name}: unknown kind {spec.kind!r}")
        if spec.kind == "conv2d":
            if i != 0:
                raise ConfigError(f"layer {spec.name}: conv2d only allowed first")
            if spec.kernel % 2 == 0:
                raise ConfigError(f"layer {spec.name}: conv2d kernel must be odd")
            cur = (h, w, 1, spec.out_dim)
        elif spec.kind in ("conv_capsule", "readout"):
            if spec.kernel % 2 == 0:
                raise ConfigError(
                    f"layer {spec.name}: conv capsule kernel must be odd"
                )
            ch, cw, _, _ = cur
            if ch % spec.stride or cw % spec.stride:
                raise ConfigError(
                    f"layer {spec.name}: stride {spec.stride} does not divide "
                    f"{ch}x{cw}"
                )
            out_types = 1 if spec.kind == "readout" else spec.out_types
            if spec.kind == "readout" and spec.out_types != 1:
                raise ConfigError(
                    f"layer {spec.name}: readout requires exactly 1 output type"
                )
            cur = (ch // spec.stride, cw // spec.stride, out_types, spec.out_dim)
        else:  # deconv_capsule
            if spec.stride not in (1, 2):
                raise ConfigError(
                    f"layer {spec.name}: deconv stride must be 1 or 2"
                )
            ch, cw, _, _ = cur
            cur = (ch * spec.stride, cw * spec.stride, spec.out_types, spec.out_dim)
        if spec.skip_source is not None:
            if spec.skip_source not in by_name:
                raise ConfigError(
                    f"layer {spec.name}: skip source {spec.skip_source!r} "
                    f"not defined earlier"
                )
            sh, sw, st, sd = by_name[spec.skip_source]
            if (sh, sw) != cur[:2]:
                raise ConfigError(
                    f"layer {spec.name}: output {cur[0]}x{cur[1]} does not match "
                    f"skip source {spec.skip_source!r} at {sh}x{sw}"
                )
            if sd != cur[3]:
                raise ConfigError(
                    f"layer {spec.name}: pose dim {cur[3]} does not match skip "
                    f"source {spec.skip_source!r} dim {sd}"
                )
            cur = (cur[0], cur[1], cur[2] + st, cur[3])
        by_name[spec.name] = cur
        shapes.append(cur)
    if shapes[-1][:2] != (h, w):
        raise ConfigError(
            f"final extents {shapes[-1][0]}x{shapes[-1][1]} differ from input "
            f"{h}x{w}"
        )
    return shapes


def validate(config):
    resolve_geometry(config)
    if config.loss not in ("weighted_bce", "weighted_margin"):
        raise ConfigError(f"unknown loss {config.loss!r}")
    if config.m_pos <= config.m_neg:
        raise ConfigError(f"m_pos must exceed m_neg ({config.m_pos} <= {config.m_neg})")
    if not 0.0 <= config.threshold <= 1.0:
        raise ConfigError(f"threshold must lie in [0, 1], got {config.threshold}")
    if len(config.decoder_widths) != 2:
        raise ConfigError("decoder_widths must list the two hidden widths")
    for spec in config.layers:
        if spec.kind != "conv2d" and spec.iterations < 1:
            raise ConfigError(f"layer {spec.name}: routing iterations must be >= 1")


def _uniform(rng, bound, shape, dtype):
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Model:
    """A built, runnable segmentation model."""

    def __init__(self, config, conv1, capsule_layers, decoder):
        self.config = config
        self.conv1 = conv1
        self.capsule_layers = capsule_layers  # list of (LayerSpec, CapsuleLayer)
        self.decoder = decoder

    def forward(self, image):
        """Length map (h, w) and the final readout grid for an (h, w) image."""
        x = image if isinstance(image, Tensor) else Tensor(image)
        h, w = self.config.height, self.config.width
        if x.shape != (h, w):
            raise T.ShapeError(
                f"input extents {x.shape} differ from model {h}x{w}"
            )
        feat = self.conv1.forward(x.reshape(h, w, 1))
        grid = L.CapsuleGrid(feat.reshape(h, w, 1, feat.shape[2]))
        outputs = {}
        for spec, layer in self.capsule_layers:
            out = layer.forward(grid)
            if spec.skip_source is not None:
                out = L.concat_types(out, outputs[spec.skip_source])
            outputs[spec.name] = out
            grid = out
        gh, gw, _, gz = grid.poses.shape
        lengths = L.pose_lengths(grid.poses.reshape(gh, gw, gz))
        return lengths, grid

    def predict_mask(self, image, threshold=None):
        """Binary mask, length map and readout grid without recording."""
        tau = self.config.threshold if threshold is None else threshold
        with T.no_grad():
            lengths, grid = self.forward(image)
        mask = (lengths.data > tau).astype(np.uint8)
        return mask, np.asarray(lengths.data), grid

    def reconstruct(self, grid, positive_mask):
        return L.masked_reconstruct(grid, positive_mask, self.decoder)

    def parameters(self):
        params = list(self.conv1.params())
        for _, layer in self.capsule_layers:
            params.extend(layer.params())
        params.extend(self.decoder.params())
        return params

    def layer_param_counts(self):
        counts = [(self.conv1.name, sum(int(np.prod(p.shape)) for _, p in self.conv1.params()))]
        for spec, layer in self.capsule_layers:
            counts.append((spec.name, layer.param_count()))
        counts.append(
            ("decoder", sum(int(np.prod(p.shape)) for _, p in self.decoder.params()))
        )
        return counts

    def param_count(self):
        return sum(int(np.prod(p.shape)) for _, p in self.parameters())


def build(config, seed=0):
    """Construct a runnable model with seeded fan-in-scaled initialization."""
    validate(config)
    rng = np.random.default_rng(seed)
    dtype = T.get_default_dtype()
    specs = config.layers
    conv_spec = specs[0]
    k, f = conv_spec.kernel, conv_spec.out_dim
    conv1 = L.Conv2d(
        T.parameter(_uniform(rng, np.sqrt(6.0 / (k * k * 1)), (k, k, 1, f), dtype),
                    name=f"{conv_spec.name}.weights"),
        T.parameter(np.zeros(f, dtype=dtype), name=f"{conv_spec.name}.bias"),
        stride=1, activation="relu", name=conv_spec.name,
    )
    geom = resolve_geometry(config)
    capsule_layers = []
    for i, spec in enumerate(specs[1:], start=1):
        in_h, in_w, tc, zc = geom[i - 1]
        out_types = 1 if spec.kind == "readout" else spec.out_types
        zp = spec.out_dim
        kk = spec.kernel
        mode = "deconv" if spec.kind == "deconv_capsule" else "conv"
        k_eff = kk * kk / (spec.stride * spec.stride) if mode == "deconv" else kk * kk
        sigma = 2.0 * out_types / np.sqrt(zp * tc * k_eff)
        weights = T.parameter(
            _uniform(rng, np.sqrt(3.0) * sigma, (kk, kk, zc, tc, out_types, zp), dtype),
            name=f"{spec.name}.weights",
        )
        kernel = L.TransformKernel(weights, kk, kk, spec.stride, mode)
        capsule_layers.append(
            (spec, L.CapsuleLayer(kernel, spec.iterations, spec.routing_enabled,
                                  name=spec.name))
        )
    zr = specs[-1].out_dim
    w1, w2 = config.decoder_widths
    # hidden biases start slightly positive: masked-out pixels feed exact
    # zeros into the decoder, and a zero bias would pin those relu inputs to
    # the kink (dead units, and no derivative to check there)
    dec = L.ReconstructionDecoder(
        T.parameter(_uniform(rng, np.sqrt(6.0 / zr), (zr, w1), dtype), name="decoder.w1"),
        T.parameter(np.full(w1, 0.01, dtype=dtype), name="decoder.b1"),
        T.parameter(_uniform(rng, np.sqrt(6.0 / w1), (w1, w2), dtype), name="decoder.w2"),
        T.parameter(np.full(w2, 0.01, dtype=dtype), name="decoder.b2"),
        T.parameter(_uniform(rng, np.sqrt(6.0 / w2), (w2, 1), dtype), name="decoder.w3"),
        T.parameter(np.zeros(1, dtype=dtype), name="decoder.b3"),
    )
    return Model(config, conv1, capsule_layers, dec)


# ---------------------------------------------------------------------------
# parameter arithmetic


def shared_transform_params(child_types, kh, kw, child_dim, parent_types, parent_dim):
    """Scalar count of a shared-kernel capsule transformation stack."""
    return child_types * kh * kw * child_dim * parent_types * parent_dim


def fully_connected_transform_params(child_h, child_w, child_types, child_dim,
                                     parent_count, parent_dim):
    """Scalar count when every child capsule owns a matrix to every parent."""
    return parent_count * (child_h * child_w * child_types) * parent_dim * child_dim


def count_capsule_params(child_grid, parent_spec, fully_connected=False):
    """Transform-parameter count for one capsule layer.

    ``child_grid`` is (h, w, types, dim). For the shared (convolutional)
    case ``parent_spec`` is (kh, kw, parent_types, parent_dim); for the
    fully-connected case it is (parent_count, parent_dim).
    """
    h, w, tc, zc = child_grid
    if fully_connected:
        n_parents, zp = parent_spec
        return fully_connected_transform_params(h, w, tc, zc, n_parents, zp)
    kh, kw, tp, zp = parent_spec
    return shared_transform_params(tc, kh, kw, zc, tp, zp)


SABOUR_LAYER_PARAMS = fully_connected_transform_params(6, 6, 32, 8, 10, 16)


@dataclass
class UNetConfig:
    in_channels: int = 1
    out_channels: int = 1
    widths: tuple = (64, 128, 256, 512, 1024)


def count_unet_params(cfg=None):
    """Exact parameter total of a standard U-Net ladder.

    Two 3x3 convolutions (with bias) per level, 2x2 transposed convolutions
    (with bias) for upsampling, concatenation skip connections doubling the
    decoder input channels, and a 1x1 output head.
    """
    cfg = cfg or UNetConfig()
    w = cfg.widths
    total = 0
    cin = cfg.in_channels
    for width in w:
        total += 3 * 3 * cin * width + width
        total += 3 * 3 * width * width + width
        cin = width
    for i in range(len(w) - 2, -1, -1):
        total += 2 * 2 * w[i + 1] * w[i] + w[i]  # up-conv
        total += 3 * 3 * (2 * w[i]) * w[i] + w[i]
        total += 3 * 3 * w[i] * w[i] + w[i]
    total += 1 * 1 * w[0] * cfg.out_channels + cfg.out_channels
    return total


def report_reduction(model_params, reference_params):
    """Percentage reduction of ``model_params`` relative to the reference."""
    if reference_params <= 0:
        raise ValueError("reference parameter count must be positive")
    return 100.0 * (1.0 - model_params / reference_params)


# ---------------------------------------------------------------------------
# presets


def _caps(name, kind, kernel, stride, types, dim, iterations=3, routed=True,
          skip=None):
    return LayerSpec(name, kind, kernel, stride, types, dim, iterations,
                     routed, skip)


def _segcaps_layers(enc_k, routed_s1):
    return [
        LayerSpec("conv1", "conv2d", 5, 1, 1, 16),
        _caps("e1a", "conv_capsule", enc_k, 1, 2, 16, routed=routed_s1),
        _caps("e1b", "conv_capsule", enc_k, 2, 2, 16),
        _caps("e2a", "conv_capsule", enc_k, 1, 4, 16, routed=routed_s1),
        _caps("e2b", "conv_capsule", enc_k, 2, 4, 16),
        _caps("e3a", "conv_capsule", enc_k, 1, 4, 16, routed=routed_s1),
        _caps("e3b", "conv_capsule", enc_k, 2, 8, 32),
    ]


def _segcaps_full(routed_s1):
    layers = _segcaps_layers(5, routed_s1)
    layers += [
        _caps("d3", "deconv_capsule", 4, 2, 8, 16, skip="e3a"),
        _caps("d2", "deconv_capsule", 4, 2, 4, 16, skip="e2a"),
        _caps("d1", "deconv_capsule", 4, 2, 2, 16, skip="e1a"),
        _caps("readout", "readout", 5, 1, 1, 16, routed=routed_s1),
    ]
    return layers


def _segcaps_small(routed_s1):
    layers = _segcaps_layers(3, routed_s1)
    layers += [
        _caps("d3", "deconv_capsule", 4, 2, 4, 16, skip="e3a"),
        _caps("d2", "deconv_capsule", 4, 2, 2, 16, skip="e2a"),
        _caps("d1", "deconv_capsule", 4, 2, 1, 16, skip="e1a"),
        _caps("readout", "readout", 1, 1, 1, 16, routed=routed_s1),
    ]
    return layers


def _baseline_layers():
    return [
        LayerSpec("conv1", "conv2d", 5, 1, 1, 16),
        _caps("b1", "conv_capsule", 5, 1, 2, 16),
        _caps("b2", "conv_capsule", 5, 1, 2, 16),
        _caps("readout", "readout", 5, 1, 1, 16),
    ]


def _tiny_layers():
    return [
        LayerSpec("conv1", "conv2d", 3, 1, 1, 8),
        _caps("t1", "conv_capsule", 3, 1, 2, 8),
        _caps("t2", "conv_capsule", 3, 2, 2, 8),
        _caps("u1", "deconv_capsule", 4, 2, 2, 8, skip="t1"),
        _caps("readout", "readout", 3, 1, 1, 8),
    ]


_PRESET_BUILDERS = {
    "segcaps": lambda: (512, _segcaps_full(True), (64, 128)),
    "segcaps-r1": lambda: (512, _segcaps_full(False), (64, 128)),
    "segcaps-small": lambda: (64, _segcaps_small(True), (64, 128)),
    "segcaps-r1-small": lambda: (64, _segcaps_small(False), (64, 128)),
    "baseline-caps": lambda: (64, _baseline_layers(), (64, 128)),
    "segcaps-tiny": lambda: (16, _tiny_layers(), (8, 16)),
}

PRESET_NAMES = tuple(sorted(_PRESET_BUILDERS))


def preset(name, input_size=None):
    """A named architecture preset, optionally at a custom input size."""
    if name not in _PRESET_BUILDERS:
        raise ConfigError(
            f"unknown preset {name!r}; available: {', '.join(PRESET_NAMES)}"
        )
    default_size, layer_list, widths = _PRESET_BUILDERS[name]()
    size = input_size or default_size
    loss = "weighted_margin" if name == "baseline-caps" else "weighted_bce"
    cfg = ModelConfig(
        height=size, width=size, layers=layer_list, loss=loss,
        decoder_widths=widths, preset=name,
    )
    validate(cfg)
    return cfg


def preset_pair_differs_only_in_routing(a, b):
    """True when two configs share every field except routing flags."""
    if len(a.layers) != len(b.layers):
        return False
    for la, lb in zip(a.layers, b.layers):
        if replace(la, routing_enabled=True) != replace(lb, routing_enabled=True):
            return False
    return replace(a, layers=[], preset=None) == replace(b, layers=[], preset=None)
