"""Dual-branch windowed-transformer segmentation model: per-branch
hierarchical encoders, per-level attentional feature fusion, and a
skip-connected decoder ending in a single-channel logit map."""

from dataclasses import dataclass, field, fields, is_dataclass

import numpy as np

from . import autodiff as ad
from . import swin
from .autodiff import Tensor
from .swin import (SwinBlockParams, WindowConfig, fanin_uniform, init_block,
                   init_layer_norm, patch_embed, patch_merge, swin_block_pair)

NUM_STAGES = 4


@dataclass
class BranchConfig:
    patch_size: int
    embed_dim: int = 16
    depths: tuple = (2, 2, 2, 2)
    heads: tuple = None
    window: int = 4

    def __post_init__(self):
        self.depths = tuple(self.depths)
        if len(self.depths) != NUM_STAGES:
            raise ValueError(f"expected {NUM_STAGES} stage depths, got {self.depths}")
        if any(d % 2 for d in self.depths):
            raise ValueError("stage depths must be even (W/SW block pairs)")
        if self.embed_dim % 4:
            raise ValueError("embed_dim must be divisible by 4")
        if self.heads is None:
            base = max(1, self.embed_dim // 8)
            self.heads = tuple(base * 2 ** i for i in range(NUM_STAGES))
        self.heads = tuple(self.heads)

    def stage_channels(self, i):
        return self.embed_dim * 2 ** i


@dataclass
class ModelConfig:
    branches: list
    in_channels: int = 1
    mlp_ratio: int = 4
    aff_ratio: int = 4

    def __post_init__(self):
        sizes = [b.patch_size for b in self.branches]
        if not 1 <= len(sizes) <= 3:
            raise ValueError("1 to 3 branches supported")
        if sizes != sorted(sizes) or len(set(sizes)) != len(sizes):
            raise ValueError("branch patch sizes must be strictly increasing")

    @property
    def anchor(self):
        return self.branches[0]


# ---------------------------------------------------------------- parameters

@dataclass
class LinearParams:
    w: Tensor
    b: Tensor


@dataclass
class BranchParams:
    embed: LinearParams
    stages: list           # NUM_STAGES lists of (w_block, sw_block) pairs
    merges: list           # 3 LinearParams, after stages 0..2


@dataclass
class BottleneckParams:
    lin1: LinearParams
    ln1: object
    lin2: LinearParams
    ln2: object


@dataclass
class AFFParams:
    local: BottleneckParams
    global_: BottleneckParams


@dataclass
class FusionParams:
    align: LinearParams    # ch_src -> 4*ch_tgt patch expansion
    aff: AFFParams


@dataclass
class DecoderStageParams:
    expand: LinearParams
    reduce: LinearParams
    blocks: list           # (w_block, sw_block) pairs


@dataclass
class DecoderParams:
    stages: list           # 3 DecoderStageParams, deepest first
    final1: LinearParams
    final2: LinearParams
    head: LinearParams


@dataclass
class ModelParams:
    config: ModelConfig
    branches: list
    fusions: list          # per extra branch: 4 FusionParams (one per level)
    decoder: DecoderParams


def _linear(rng, d_in, d_out):
    return LinearParams(ad.parameter(fanin_uniform(rng, (d_in, d_out))),
                        ad.parameter(np.zeros(d_out)))


def _init_branch(rng, cfg: BranchConfig, in_channels, mlp_ratio):
    s, c, m = cfg.patch_size, cfg.embed_dim, cfg.window
    embed = _linear(rng, in_channels * s * s, c)
    stages, merges = [], []
    for i in range(NUM_STAGES):
        ci = cfg.stage_channels(i)
        pairs = [(init_block(rng, ci, cfg.heads[i], m, mlp_ratio),
                  init_block(rng, ci, cfg.heads[i], m, mlp_ratio))
                 for _ in range(cfg.depths[i] // 2)]
        stages.append(pairs)
        if i < NUM_STAGES - 1:
            merges.append(_linear(rng, 4 * ci, 2 * ci))
    return BranchParams(embed, stages, merges)


def _init_bottleneck(rng, c, ratio):
    hidden = max(1, c // ratio)
    return BottleneckParams(_linear(rng, c, hidden), init_layer_norm(hidden),
                            _linear(rng, hidden, c), init_layer_norm(c))


def _init_fusion(rng, c_src, c_tgt, ratio):
    return FusionParams(
        align=_linear(rng, c_src, 4 * c_tgt),
        aff=AFFParams(_init_bottleneck(rng, c_tgt, ratio),
                      _init_bottleneck(rng, c_tgt, ratio)),
    )


def init_model(config: ModelConfig, seed=0):
    rng = np.random.default_rng(seed)
    anchor = config.anchor
    branches = [_init_branch(rng, b, config.in_channels, config.mlp_ratio)
                for b in config.branches]
    fusions = []
    for b in config.branches[1:]:
        per_level = [_init_fusion(rng, b.stage_channels(i),
                                  anchor.stage_channels(i), config.aff_ratio)
                     for i in range(NUM_STAGES)]
        fusions.append(per_level)

    c = anchor.embed_dim
    m = anchor.window
    stages = []
    for k in range(3):
        level = 2 - k                       # skip level consumed by stage k
        ch_in = anchor.stage_channels(level + 1)
        ch_out = anchor.stage_channels(level)
        pairs = [(init_block(rng, ch_out, anchor.heads[level], m, config.mlp_ratio),
                  init_block(rng, ch_out, anchor.heads[level], m, config.mlp_ratio))]
        stages.append(DecoderStageParams(
            expand=_linear(rng, ch_in, 4 * (ch_in // 2)),
            reduce=_linear(rng, 2 * ch_out, ch_out),
            blocks=pairs,
        ))
    decoder = DecoderParams(
        stages=stages,
        final1=_linear(rng, c, 4 * (c // 2)),
        final2=_linear(rng, c // 2, 4 * (c // 4)),
        head=_linear(rng, c // 4, 1),
    )
    return ModelParams(config, branches, fusions, decoder)


def named_parameters(obj, prefix=""):
    """Yield (dotted_name, Tensor) for every trainable tensor, in a
    deterministic traversal order."""
    if isinstance(obj, Tensor):
        if obj.requires_grad:
            yield prefix, obj
        return
    if is_dataclass(obj):
        for f in fields(obj):
            if f.name in ("config", "num_heads", "bias_index"):
                continue
            yield from named_parameters(getattr(obj, f.name),
                                        f"{prefix}.{f.name}" if prefix else f.name)
        return
    if isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}")


def parameters(params):
    return [t for _, t in named_parameters(params)]


def param_count(config: ModelConfig):
    return sum(t.size for t in parameters(init_model(config)))


# ---------------------------------------------------------------- forward

def encoder_forward(image, branch_params: BranchParams, cfg: BranchConfig):
    """Run one branch's four encoder stages; returns the four pre-merge
    stage outputs as [gh, gw, C_i] tensors (skip sources)."""
    tokens, gh, gw = patch_embed(image, cfg.patch_size,
                                 branch_params.embed.w, branch_params.embed.b)
    outputs = []
    for i in range(NUM_STAGES):
        wc = WindowConfig(cfg.window, cfg.window // 2, gh, gw)
        for blk_w, blk_sw in branch_params.stages[i]:
            tokens = swin_block_pair(tokens, blk_w, blk_sw, wc)
        feat = ad.reshape(tokens, (gh, gw, cfg.stage_channels(i)))
        outputs.append(feat)
        if i < NUM_STAGES - 1:
            mp = branch_params.merges[i]
            feat = patch_merge(feat, mp.w, mp.b)
            gh, gw = feat.shape[0], feat.shape[1]
            tokens = ad.reshape(feat, (gh * gw, feat.shape[2]))
    return outputs


def _bottleneck(x, p: BottleneckParams):
    h = ad.layer_norm(ad.linear(x, p.lin1.w, p.lin1.b), p.ln1.gamma, p.ln1.beta)
    h = ad.relu(h)
    return ad.layer_norm(ad.linear(h, p.lin2.w, p.lin2.b), p.ln2.gamma, p.ln2.beta)


def ms_cam(u, p: AFFParams):
    """Soft channel-attention gate in (0,1): sigmoid of the sum of a
    globally pooled bottleneck and a per-position pointwise bottleneck."""
    h, w, c = u.shape
    local = _bottleneck(ad.reshape(u, (h * w, c)), p.local)
    local = ad.reshape(local, (h, w, c))
    pooled = ad.mean(ad.reshape(u, (h * w, c)), axis=0, keepdims=True)
    glob = ad.reshape(_bottleneck(pooled, p.global_), (1, 1, c))
    return ad.sigmoid(ad.add(local, glob))


def aff_fuse(x, y, p: AFFParams):
    """Z = M(x+y)*x + (1 - M(x+y))*y, a convex per-element blend."""
    if x.shape != y.shape:
        raise ValueError(f"fuse shape mismatch: {x.shape} vs {y.shape}")
    gate = ms_cam(ad.add(x, y), p)
    return ad.add(ad.mul(gate, x), ad.mul(ad.add(ad.mul(gate, -1.0), 1.0), y))


def _nn_resize(x, target_hw):
    h, w, c = x.shape
    th, tw = target_hw
    rows = (np.arange(th) * h) // th
    cols = (np.arange(tw) * w) // tw
    idx = rows[:, None] * w + cols[None, :]
    return ad.gather_rows(ad.reshape(x, (h * w, c)), idx)


def patch_expand(x, p: LinearParams):
    """Linear C -> 4*C' then rearrange each token to a 2x2 spatial block."""
    h, w, c = x.shape
    t = ad.linear(ad.reshape(x, (h * w, c)), p.w, p.b)
    cp = t.shape[-1] // 4
    t = ad.reshape(t, (h, w, 2, 2, cp))
    t = ad.permute(t, (0, 2, 1, 3, 4))
    return ad.reshape(t, (2 * h, 2 * w, cp))


def upsample_align(x, target_hw, p: LinearParams):
    """Learned 2x patch expansion, followed by nearest-neighbor resampling
    when the target grid is not exactly 2x the source (non-power-of-two
    branch alignments, degenerate 1x1 grids)."""
    out = patch_expand(x, p)
    if (out.shape[0], out.shape[1]) != tuple(target_hw):
        out = _nn_resize(out, target_hw)
    return out


def decoder_forward(fused, dec: DecoderParams, config: ModelConfig,
                    out_hw=None):
    """Three upsample/skip/refine stages from the fused level-4 bottleneck,
    then two final expansions and the single-channel projection head."""
    anchor = config.anchor
    if len(fused) != NUM_STAGES:
        raise ValueError(f"expected {NUM_STAGES} fused levels, got {len(fused)}")
    x = fused[-1]
    for k, stage in enumerate(dec.stages):
        skip = fused[2 - k]
        x = patch_expand(x, stage.expand)
        if (x.shape[0], x.shape[1]) != (skip.shape[0], skip.shape[1]):
            x = _nn_resize(x, (skip.shape[0], skip.shape[1]))
        x = concat_channels(x, skip)
        gh, gw, c2 = x.shape
        x = ad.reshape(x, (gh * gw, c2))
        x = ad.linear(x, stage.reduce.w, stage.reduce.b)
        wc = WindowConfig(anchor.window, anchor.window // 2, gh, gw)
        for blk_w, blk_sw in stage.blocks:
            x = swin_block_pair(x, blk_w, blk_sw, wc)
        x = ad.reshape(x, (gh, gw, x.shape[-1]))
    x = patch_expand(x, dec.final1)
    x = patch_expand(x, dec.final2)
    h, w, c = x.shape
    logits = ad.linear(ad.reshape(x, (h * w, c)), dec.head.w, dec.head.b)
    logits = ad.reshape(logits, (h, w))
    if out_hw is not None and (h, w) != tuple(out_hw):
        logits = ad.slice_(logits, (slice(0, out_hw[0]), slice(0, out_hw[1])))
    return logits


def concat_channels(a, b):
    return ad.concat_lastdim([a, b])


def model_forward(image, params: ModelParams):
    """Image [Cin, H, W] (array or Tensor) -> logits [H, W]."""
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"expected [Cin, H, W] image, got shape {img.shape}")
    config = params.config
    h, w = img.shape[1], img.shape[2]

    levels = encoder_forward(img, params.branches[0], config.branches[0])
    for bp, bcfg, fus in zip(params.branches[1:], config.branches[1:],
                             params.fusions):
        other = encoder_forward(img, bp, bcfg)
        merged = []
        for i in range(NUM_STAGES):
            target = (levels[i].shape[0], levels[i].shape[1])
            aligned = upsample_align(other[i], target, fus[i].align)
            merged.append(aff_fuse(levels[i], aligned, fus[i].aff))
        levels = merged

    return decoder_forward(levels, params.decoder, config, out_hw=(h, w))
