"""Two-branch super-resolution network for multi-contrast MR images.

A high-resolution guide image (T1-weighted) and a low-resolution target
image (T2-weighted) pass through parallel cascades of residual groups.
At every stage the target branch consumes the concatenation of both
branches' previous features through a 1x1 reducer, so guide anatomy
propagates into the target reconstruction. Three refinement paths feed
the final head:

* per-stage fusion inside the backbone (always on);
* a cross-stage integration block that row-softmaxes the pairwise dot
  products of all stored stage features and adds the affinity-weighted
  summaries back, scaled by a learnable gate initialized to 0;
* a channel-spatial attention block per branch: a 3x3x3 convolution over
  the (channel, height, width) volume produces a sigmoid gate map which
  modulates the final stage feature, again behind a zero-initialized
  learnable scalar.

Ablation variants prune these paths structurally: parameters of a pruned
path are absent from the manifest, not merely zeroed.
"""

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

VARIANTS = ("full", "no_aux", "no_int", "no_att")


@dataclass
class MINetConfig:
    """Architecture hyperparameters."""

    L: int = 3            # residual groups per branch
    C: int = 16           # feature channels
    B: int = 2            # residual blocks per group
    r: int = 2            # upscale factor
    reduction: int = 4    # channel-attention bottleneck ratio
    alpha: float = 0.3    # target (T2) loss weight
    beta: float = 0.7     # guide (T1) loss weight
    variant: str = "full"

    def validate(self):
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.B < 1:
            raise ValueError("B must be >= 1")
        if self.C % self.reduction != 0:
            raise ValueError("C=%d not divisible by reduction=%d"
                             % (self.C, self.reduction))
        if self.r not in (2, 4):
            raise ValueError("scale r must be 2 or 4, got %r" % (self.r,))
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError("loss weights must be nonnegative and not both zero")
        if self.variant not in VARIANTS:
            raise ValueError("variant must be one of %r, got %r"
                             % (VARIANTS, self.variant))
        return self

    @property
    def has_aux(self):
        return self.variant != "no_aux"

    @property
    def has_integration(self):
        return self.variant != "no_int"

    @property
    def has_attention(self):
        return self.variant != "no_att"

    @property
    def num_stage_features(self):
        return 2 * self.L if self.has_aux else self.L


@dataclass
class ModelOutputs:
    sr_t2: Tensor
    rec_t1: Optional[Tensor] = None


@dataclass
class StageFeatures:
    f0_t1: Optional[Tensor]
    f0_t2: Tensor
    stages: list = field(default_factory=list)  # [(F_T1^l, F_T2^l)] per stage

    def flattened(self):
        """Stage features in storage order: guide then target per stage."""
        out = []
        for ft1, ft2 in self.stages:
            if ft1 is not None:
                out.append(ft1)
            out.append(ft2)
        return out


# ---------------------------------------------------------------------------
# parameter construction


def _group_specs(prefix, cfg):
    c, red = cfg.C, cfg.reduction
    specs = []
    for k in range(1, cfg.B + 1):
        block = "%s.b%d" % (prefix, k)
        specs += [
            ("%s.conv1.w" % block, (c, c, 3, 3), 9 * c),
            ("%s.conv1.b" % block, (c,), None),
            ("%s.conv2.w" % block, (c, c, 3, 3), 9 * c),
            ("%s.conv2.b" % block, (c,), None),
            ("%s.ca1.w" % block, (c // red, c, 1, 1), c),
            ("%s.ca1.b" % block, (c // red,), None),
            ("%s.ca2.w" % block, (c, c // red, 1, 1), c // red),
            ("%s.ca2.b" % block, (c,), None),
        ]
    # zero-init 1x1 tail inside the group skip: the whole group starts as
    # the identity map and the blocks' weights receive gradient from step 1
    specs += [("%s.tail.w" % prefix, (c, c, 1, 1), None),
              ("%s.tail.b" % prefix, (c,), None)]
    return specs


def param_specs(cfg):
    """Ordered (name, shape, fan_in) triples; fan_in None means zero-init."""
    cfg.validate()
    c, r = cfg.C, cfg.r
    specs = []
    if cfg.has_aux:
        specs += [("shallow_t1.w", (c, 1, 3, 3), 9), ("shallow_t1.b", (c,), None)]
    specs += [("shallow_t2.w", (c * r * r, 1, 3, 3), 9),
              ("shallow_t2.b", (c * r * r,), None)]
    for l in range(1, cfg.L + 1):
        if cfg.has_aux:
            specs += [("fuse%d.w" % l, (c, 2 * c, 1, 1), 2 * c),
                      ("fuse%d.b" % l, (c,), None)]
            specs += _group_specs("t1.g%d" % l, cfg)
        specs += _group_specs("t2.g%d" % l, cfg)
    if cfg.has_attention:
        branches = ["att_t2"] + (["att_t1"] if cfg.has_aux else [])
        for name in branches:
            specs += [("%s.conv.w" % name, (1, 1, 3, 3, 3), 27),
                      ("%s.conv.b" % name, (1,), None),
                      ("%s.gate" % name, (1,), None)]
    if cfg.has_integration:
        m = cfg.num_stage_features
        specs += [("integration.gate", (1,), None),
                  ("integration.reduce.w", (c, m * c, 1, 1), None),
                  ("integration.reduce.b", (c,), None)]
    specs += [("rec_t2.w", (1, c, 3, 3), 9 * c), ("rec_t2.b", (1,), None)]
    if cfg.has_aux:
        specs += [("rec_t1.w", (1, c, 3, 3), 9 * c), ("rec_t1.b", (1,), None)]
    return specs


def param_names(cfg):
    return [name for name, _, _ in param_specs(cfg)]


def _name_rng(seed, name):
    """Stream seeded by (run seed, stable hash of the parameter name).

    Parameters shared between variants get identical values for a given
    seed regardless of which other parameters exist.
    """
    tag = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8],
                         "little")
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


def init_params(cfg, seed):
    """He-normal conv weights with an identity-oriented overlay, zero
    biases, zero gates, zero group tails and integration reducer.
    Deterministic per (cfg, seed).

    The overlay makes the whole untrained network compute exact
    nearest-neighbor upsampling of the target input (and the identity on
    the guide head): channel 0 of each shallow feature carries the input
    image, groups start as identity maps through their zero tails, the
    fusion reducers start as pass-throughs of the target half, and the
    heads start by reading back channel 0. Training then refines an
    upsampler instead of reconstructing images from scratch.
    """
    params = {}
    for name, shape, fan_in in param_specs(cfg):
        if fan_in is None:
            data = np.zeros(shape)
        else:
            rng = _name_rng(seed, name)
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params[name] = Tensor(data, requires_grad=True)

    r, c = cfg.r, cfg.C
    w = params["shallow_t2.w"].data        # (C*r*r, 1, 3, 3)
    w[:r * r] = 0.0
    w[:r * r, 0, 1, 1] = 1.0               # feature channel 0 = NN-upsample
    if cfg.has_aux:
        w = params["shallow_t1.w"].data    # (C, 1, 3, 3)
        w[0] = 0.0
        w[0, 0, 1, 1] = 1.0                # feature channel 0 = guide image
        for l in range(1, cfg.L + 1):
            w = params["fuse%d.w" % l].data   # (C, 2C, 1, 1)
            w[...] = 0.0
            w[range(c), c + np.arange(c)] = 1.0   # pass the target half
    w = params["rec_t2.w"].data            # head input is shallow + stage-L
    w[...] = 0.0
    w[0, 0, 1, 1] = 0.5                    # features carry the image twice
    if cfg.has_aux:
        w = params["rec_t1.w"].data
        w[...] = 0.0
        w[0, 0, 1, 1] = 1.0
    return params


def params_to_arrays(params):
    return {name: t.data for name, t in params.items()}


def arrays_to_params(arrays):
    return {name: Tensor(a, requires_grad=True) for name, a in arrays.items()}


# ---------------------------------------------------------------------------
# forward pieces


def shallow_extract(params, cfg, x_t1, y_t2):
    """Initial features: 3x3 conv on the guide; 3x3 conv emitting C*r*r
    channels on the target followed by pixel shuffle, so both land at the
    high-resolution grid with C channels."""
    f0_t2 = ad.conv2d(y_t2, params["shallow_t2.w"], params["shallow_t2.b"],
                      stride=1, padding=1)
    f0_t2 = ad.pixel_shuffle(f0_t2, cfg.r)
    if not cfg.has_aux:
        return None, f0_t2
    if x_t1.shape[2] != cfg.r * y_t2.shape[2] or x_t1.shape[3] != cfg.r * y_t2.shape[3]:
        raise ValueError("guide/target size ratio must equal r=%d: %r vs %r"
                         % (cfg.r, x_t1.shape, y_t2.shape))
    f0_t1 = ad.conv2d(x_t1, params["shallow_t1.w"], params["shallow_t1.b"],
                      stride=1, padding=1)
    return f0_t1, f0_t2


def _channel_attention(x, params, block):
    """Squeeze-and-excitation: pooled descriptor -> bottleneck 1x1 convs ->
    sigmoid -> per-channel rescale."""
    y = ad.global_avg_pool(x)
    y = ad.relu(ad.conv2d(y, params[block + ".ca1.w"], params[block + ".ca1.b"]))
    y = ad.sigmoid(ad.conv2d(y, params[block + ".ca2.w"], params[block + ".ca2.b"]))
    return ad.channel_scale(x, y)


def _residual_block(x, params, block):
    y = ad.conv2d(x, params[block + ".conv1.w"], params[block + ".conv1.b"],
                  stride=1, padding=1)
    y = ad.relu(y)
    y = ad.conv2d(y, params[block + ".conv2.w"], params[block + ".conv2.b"],
                  stride=1, padding=1)
    y = _channel_attention(y, params, block)
    return ad.add(x, y)


def residual_group(x, params, prefix, blocks):
    """Stack of residual channel-attention blocks and a 1x1 tail conv
    behind a group-level skip; with zero tail weights the group is the
    identity map."""
    y = x
    for k in range(1, blocks + 1):
        y = _residual_block(y, params, "%s.b%d" % (prefix, k))
    y = ad.conv2d(y, params[prefix + ".tail.w"], params[prefix + ".tail.b"])
    return ad.add(x, y)


def backbone_forward(params, cfg, f0_t1, f0_t2):
    """Run both branch cascades; the target group at stage l consumes the
    1x1-reduced concatenation of both branches' stage l-1 features."""
    stages = []
    ft1, ft2 = f0_t1, f0_t2
    for l in range(1, cfg.L + 1):
        if cfg.has_aux:
            fused = ad.concat([ft1, ft2], axis=1)
            fused = ad.conv2d(fused, params["fuse%d.w" % l], params["fuse%d.b" % l])
            nt2 = residual_group(fused, params, "t2.g%d" % l, cfg.B)
            nt1 = residual_group(ft1, params, "t1.g%d" % l, cfg.B)
            ft1, ft2 = nt1, nt2
            stages.append((nt1, nt2))
        else:
            ft2 = residual_group(ft2, params, "t2.g%d" % l, cfg.B)
            stages.append((None, ft2))
    return StageFeatures(f0_t1=f0_t1, f0_t2=f0_t2, stages=stages)


def multi_stage_integration(stage_list, params, cfg, return_affinity=False):
    """Cross-stage enrichment.

    Each sample's M stage features are flattened into rows of a matrix;
    the row-softmaxed Gram matrix weights a sum of rows that is added back
    through the zero-initialized gate. The enriched rows, reshaped to
    M*C channels, reduce to C channels by a zero-initialized 1x1 conv, so
    the whole block contributes exactly zero until training moves it.
    """
    b, c, h, w = stage_list[0].shape
    m = len(stage_list)
    gate = params["integration.gate"]
    stacked = ad.concat(stage_list, axis=1)            # (B, M*C, H, W)
    flat = ad.reshape(stacked, (b, m, c * h * w))      # rows = stage features
    gram = ad.gram_rows(flat)
    affinity = ad.reshape(
        ad.softmax_rows(ad.reshape(gram, (b * m, m))), (b, m, m))
    enriched = ad.add(ad.scale(ad.bmm(affinity, flat), gate), flat)
    merged = ad.reshape(enriched, (b, m * c, h, w))
    h_out = ad.conv2d(merged, params["integration.reduce.w"],
                      params["integration.reduce.b"])
    if return_affinity:
        return h_out, affinity
    return h_out


def channel_spatial_attention(x, params, prefix):
    """Gated residual modulation by a 3x3x3 convolution over the feature
    volume; the gate starts at 0 so the block is the identity at init."""
    b, c, h, w = x.shape
    vol = ad.reshape(x, (b, 1, c, h, w))
    att = ad.conv3d(vol, params[prefix + ".conv.w"], params[prefix + ".conv.b"])
    att = ad.reshape(att, (b, c, h, w))
    gated = ad.scale(ad.mul(ad.sigmoid(att), x), params[prefix + ".gate"])
    return ad.add(gated, x)


def reconstruct(params, cfg, f0_t2, g_t2, h_out, g_t1):
    """Heads: target image from the elementwise sum of shallow, attended,
    and integrated features; guide image from its attended feature."""
    rec_in = ad.add(f0_t2, g_t2)
    if h_out is not None:
        rec_in = ad.add(rec_in, h_out)
    sr_t2 = ad.conv2d(rec_in, params["rec_t2.w"], params["rec_t2.b"],
                      stride=1, padding=1)
    rec_t1 = None
    if g_t1 is not None:
        rec_t1 = ad.conv2d(g_t1, params["rec_t1.w"], params["rec_t1.b"],
                           stride=1, padding=1)
    return ModelOutputs(sr_t2=sr_t2, rec_t1=rec_t1)


def minet_forward(params, cfg, x_t1, y_t2):
    """Full forward pass for any variant.

    x_t1: guide (B, 1, rN, rN) tensor, ignored by the no_aux variant;
    y_t2: target (B, 1, N, N) tensor. Returns ModelOutputs.
    """
    f0_t1, f0_t2 = shallow_extract(params, cfg, x_t1, y_t2)
    feats = backbone_forward(params, cfg, f0_t1, f0_t2)
    fl_t1, fl_t2 = feats.stages[-1]

    if cfg.has_attention:
        g_t2 = channel_spatial_attention(fl_t2, params, "att_t2")
        g_t1 = (channel_spatial_attention(fl_t1, params, "att_t1")
                if cfg.has_aux else None)
    else:
        g_t2 = fl_t2
        g_t1 = fl_t1 if cfg.has_aux else None

    h_out = None
    if cfg.has_integration:
        h_out = multi_stage_integration(feats.flattened(), params, cfg)

    return reconstruct(params, cfg, f0_t2, g_t2, h_out, g_t1)


def minet_loss(outputs, x_t2, x_t1, alpha, beta):
    """Weighted sum of mean absolute errors over both heads."""
    loss = ad.scale(ad.l1_loss(outputs.sr_t2, x_t2), alpha)
    if outputs.rec_t1 is not None and beta != 0.0:
        loss = ad.add(loss, ad.scale(ad.l1_loss(outputs.rec_t1, x_t1), beta))
    return loss
