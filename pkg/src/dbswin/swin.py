"""Windowed attention building blocks: patch embedding, window partition,
cyclic shift, relative position bias, masked shifted-window attention,
pre-norm residual block pairs, and patch merging."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MASK_NEG = -1e9


@dataclass
class WindowConfig:
    m: int                  # window side length, in patches
    shift: int              # SW-MSA offset, floor(m/2) when shifting
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if self.m < 1:
            raise ValueError(f"window size must be >= 1, got {self.m}")
        if not (0 <= self.shift < self.m):
            raise ValueError(f"shift {self.shift} out of [0, {self.m})")


def effective_window(m, grid_h, grid_w):
    """Shrink the window to the grid when the grid is smaller; a grid that
    fits in one window needs no shifting."""
    m_eff = min(m, grid_h, grid_w)
    shift = m_eff // 2 if (grid_h > m_eff or grid_w > m_eff) else 0
    return m_eff, shift


# ---------------------------------------------------------------- geometry

def window_partition(x, m):
    """[grid_h, grid_w, C] -> [num_windows, m*m, C], row-major windows."""
    gh, gw, c = x.shape
    if gh % m or gw % m:
        raise ValueError(f"grid {gh}x{gw} not divisible by window {m}")
    x = ad.reshape(x, (gh // m, m, gw // m, m, c))
    x = ad.permute(x, (0, 2, 1, 3, 4))
    return ad.reshape(x, (gh // m * (gw // m), m * m, c))


def window_reverse(windows, m, grid_h, grid_w):
    c = windows.shape[-1]
    x = ad.reshape(windows, (grid_h // m, grid_w // m, m, m, c))
    x = ad.permute(x, (0, 2, 1, 3, 4))
    return ad.reshape(x, (grid_h, grid_w, c))


def cyclic_shift(x, dy, dx):
    """out[i][j] = x[(i+dy) % gh][(j+dx) % gw] (top-left shift for dy,dx>0)."""
    return ad.roll2d(x, dy, dx)


def relative_bias_index(m, m_eff=None):
    """[t, t] map (t = m_eff^2) from a (query, key) position pair to a row
    of the (2m-1)^2 bias table, a function of (drow, dcol) only. m_eff < m
    indexes the sub-range of displacements an m_eff-sized window can see."""
    if m_eff is None:
        m_eff = m
    coords = np.stack(np.meshgrid(np.arange(m_eff), np.arange(m_eff),
                                  indexing="ij"))
    flat = coords.reshape(2, -1)
    rel = flat[:, :, None] - flat[:, None, :]        # [2, t, t]
    return (rel[0] + m - 1) * (2 * m - 1) + (rel[1] + m - 1)


def _mask_from_labels(labels, m):
    gh, gw = labels.shape
    win = labels.reshape(gh // m, m, gw // m, m)
    win = win.transpose(0, 2, 1, 3).reshape(-1, m * m)
    same = win[:, :, None] == win[:, None, :]
    return np.where(same, 0.0, MASK_NEG)


def _shift_region_labels(grid_h, grid_w, m, shift):
    """3x3 region labels induced by the shift boundaries, expressed in the
    already-shifted coordinate frame (the wrapped content occupies the
    last `shift` rows/cols)."""
    region = np.zeros((grid_h, grid_w), dtype=np.int64)
    label = 0
    for hs in (slice(0, -m), slice(-m, -shift), slice(-shift, None)):
        for ws in (slice(0, -m), slice(-m, -shift), slice(-shift, None)):
            region[hs, ws] = label
            label += 1
    return region


def shift_attention_mask(grid_h, grid_w, m, shift):
    """Additive {0, MASK_NEG} mask [num_windows, m*m, m*m] preventing
    attention between non-adjacent sub-windows after a cyclic shift."""
    if not (0 < shift < m):
        raise ValueError(f"shift must lie in (0, {m}), got {shift}")
    if grid_h % m or grid_w % m:
        raise ValueError(f"grid {grid_h}x{grid_w} not divisible by {m}")
    return _mask_from_labels(_shift_region_labels(grid_h, grid_w, m, shift), m)


def pad_attention_mask(m, real_h, real_w):
    """Mask for a grid zero-padded up to multiples of m: padded positions
    may not exchange attention with real ones."""
    gh = -(-real_h // m) * m
    gw = -(-real_w // m) * m
    labels = np.zeros((gh, gw), dtype=np.int64)
    labels[real_h:, :] = 99
    labels[:, real_w:] = 99
    return _mask_from_labels(labels, m)


# ---------------------------------------------------------------- attention

@dataclass
class AttentionParams:
    num_heads: int
    w_qkv: Tensor           # [C, 3C]
    b_qkv: Tensor           # [3C]
    w_out: Tensor           # [C, C]
    b_out: Tensor           # [C]
    bias_table: Tensor      # [(2m-1)^2, num_heads]
    bias_index: np.ndarray  # [m*m, m*m]


def window_attention(windows, params, mask=None, bias_index=None):
    """Multi-head attention within each window, with relative position
    bias and an optional additive mask on the logits. `bias_index`
    overrides the precomputed index when the window was shrunk to fit a
    small grid."""
    nw, t, c = windows.shape
    nh = params.num_heads
    if c % nh:
        raise ValueError(f"channels {c} not divisible by heads {nh}")
    dh = c // nh
    if bias_index is None:
        bias_index = params.bias_index
    qkv = ad.linear(windows, params.w_qkv, params.b_qkv)     # [nw, t, 3c]
    qkv = ad.reshape(qkv, (nw, t, 3, nh, dh))
    qkv = ad.permute(qkv, (2, 0, 3, 1, 4))                   # [3, nw, nh, t, dh]
    q = ad.slice_(qkv, 0)
    k = ad.slice_(qkv, 1)
    v = ad.slice_(qkv, 2)
    logits = ad.matmul(ad.mul(q, 1.0 / np.sqrt(dh)),
                       ad.permute(k, (0, 1, 3, 2)))          # [nw, nh, t, t]
    bias = ad.gather_rows(params.bias_table, bias_index)     # [t, t, nh]
    logits = ad.add(logits, ad.permute(bias, (2, 0, 1)))
    if mask is not None:
        logits = ad.add(logits, Tensor(mask[:, None, :, :]))
    attn = ad.softmax_lastdim(logits)
    out = ad.matmul(attn, v)                                 # [nw, nh, t, dh]
    out = ad.reshape(ad.permute(out, (0, 2, 1, 3)), (nw, t, c))
    return ad.linear(out, params.w_out, params.b_out)


# ---------------------------------------------------------------- blocks

@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class MlpParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class SwinBlockParams:
    ln1: LayerNormParams
    attn: AttentionParams
    ln2: LayerNormParams
    mlp: MlpParams


def _attention_on_grid(x, params, cfg, shifted):
    gh, gw, c = x.shape
    m_eff, shift = effective_window(cfg.m, gh, gw)
    use_shift = shifted and shift > 0

    pad_h = (-gh) % m_eff
    pad_w = (-gw) % m_eff
    full_h, full_w = gh + pad_h, gw + pad_w

    mask = None
    if use_shift or pad_h or pad_w:
        if use_shift:
            labels = _shift_region_labels(full_h, full_w, m_eff, shift)
        else:
            labels = np.zeros((full_h, full_w), dtype=np.int64)
        if pad_h or pad_w:
            dead = np.zeros((full_h, full_w), dtype=bool)
            dead[gh:, :] = True
            dead[:, gw:] = True
            if use_shift:
                dead = np.roll(dead, (-shift, -shift), axis=(0, 1))
            labels = labels.copy()
            labels[dead] = 99
        mask = _mask_from_labels(labels, m_eff)
        if not use_shift and not (pad_h or pad_w):
            mask = None
    if pad_h or pad_w:
        x = ad.pad2d(x, pad_h, pad_w)
    if use_shift:
        x = cyclic_shift(x, shift, shift)

    bias_index = None
    if m_eff != cfg.m:
        bias_index = relative_bias_index(cfg.m, m_eff)
    windows = window_partition(x, m_eff)
    windows = window_attention(windows, params, mask, bias_index=bias_index)
    x = window_reverse(windows, m_eff, full_h, full_w)

    if use_shift:
        x = cyclic_shift(x, -shift, -shift)
    if pad_h or pad_w:
        x = ad.slice_(x, (slice(0, gh), slice(0, gw)))
    return x


def swin_block(x, params, cfg, shifted):
    """One pre-norm residual block: (S)W-MSA then MLP, tokens [T, C]."""
    t, c = x.shape
    h = ad.layer_norm(x, params.ln1.gamma, params.ln1.beta)
    h = ad.reshape(h, (cfg.grid_h, cfg.grid_w, c))
    h = _attention_on_grid(h, params.attn, cfg, shifted)
    x = ad.add(x, ad.reshape(h, (t, c)))
    h = ad.layer_norm(x, params.ln2.gamma, params.ln2.beta)
    h = ad.linear(ad.gelu(ad.linear(h, params.mlp.w1, params.mlp.b1)),
                  params.mlp.w2, params.mlp.b2)
    return ad.add(x, h)


def swin_block_pair(x, params_w, params_sw, cfg):
    """W-MSA block followed by its SW-MSA companion."""
    x = swin_block(x, params_w, cfg, shifted=False)
    return swin_block(x, params_sw, cfg, shifted=True)


# ---------------------------------------------------------------- embed/merge

def patch_embed(image, s, w_e, b_e=None):
    """[Cin, H, W] image -> [(H/s)*(W/s), C] tokens; pads H/W up to a
    multiple of s with zeros. Patch pixels flatten in (Cin, s, s) order."""
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    cin, h, w = img.shape
    pad_h = (-h) % s
    pad_w = (-w) % s
    if pad_h or pad_w:
        img = np.pad(img, ((0, 0), (0, pad_h), (0, pad_w)))
    gh, gw = img.shape[1] // s, img.shape[2] // s
    patches = img.reshape(cin, gh, s, gw, s).transpose(1, 3, 0, 2, 4)
    patches = np.ascontiguousarray(patches).reshape(gh * gw, cin * s * s)
    return ad.linear(Tensor(patches), w_e, b_e), gh, gw


def patch_merge(x, w_m, b_m=None):
    """Concatenate each 2x2 patch neighborhood (TL, TR, BL, BR) into 4C
    channels and project to 2C; odd grids are zero-padded to even first."""
    gh, gw, c = x.shape
    if gh % 2 or gw % 2:
        x = ad.pad2d(x, gh % 2, gw % 2)
        gh, gw = gh + gh % 2, gw + gw % 2
    x = ad.reshape(x, (gh // 2, 2, gw // 2, 2, c))
    x = ad.permute(x, (0, 2, 1, 3, 4))
    x = ad.reshape(x, (gh // 2, gw // 2, 4 * c))
    return ad.linear(x, w_m, b_m)


# ---------------------------------------------------------------- init

def trunc_normal(rng, shape, std=0.02):
    out = rng.normal(0.0, std, size=shape)
    np.clip(out, -2 * std, 2 * std, out=out)
    return out


def fanin_uniform(rng, shape):
    bound = 1.0 / np.sqrt(shape[0])
    return rng.uniform(-bound, bound, size=shape)


def init_layer_norm(c):
    return LayerNormParams(ad.parameter(np.ones(c)), ad.parameter(np.zeros(c)))


def init_attention(rng, c, num_heads, m):
    return AttentionParams(
        num_heads=num_heads,
        w_qkv=ad.parameter(fanin_uniform(rng, (c, 3 * c))),
        b_qkv=ad.parameter(np.zeros(3 * c)),
        w_out=ad.parameter(fanin_uniform(rng, (c, c))),
        b_out=ad.parameter(np.zeros(c)),
        bias_table=ad.parameter(trunc_normal(rng, ((2 * m - 1) ** 2, num_heads))),
        bias_index=relative_bias_index(m),
    )


def init_block(rng, c, num_heads, m, mlp_ratio=4):
    hidden = mlp_ratio * c
    return SwinBlockParams(
        ln1=init_layer_norm(c),
        attn=init_attention(rng, c, num_heads, m),
        ln2=init_layer_norm(c),
        mlp=MlpParams(
            w1=ad.parameter(fanin_uniform(rng, (c, hidden))),
            b1=ad.parameter(np.zeros(hidden)),
            w2=ad.parameter(fanin_uniform(rng, (hidden, c))),
            b2=ad.parameter(np.zeros(c)),
        ),
    )
