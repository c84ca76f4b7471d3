"""The enhancement network: illumination estimation, illumination-gated
channel attention per modality, RGB<-thermal cross attention, PCA channel
reduction and residual reconstruction.

Attention here is transposed ("channel-wise"): tokens are feature channels,
their descriptors are the flattened spatial maps, so cost stays linear in
pixel count and the illumination gate on the values is a per-spatial-map
modulation. Heads split the channel axis.

Three wiring modes exist, selected by `ablation_mode`:
  cross_attention  two branches + cross-modal fusion (the full model)
  self_only        RGB branch alone, thermal ignored
  concat4          thermal stacked as a 4th input channel, single branch
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from ..errors import ShapeError
from . import engine as eg
from .engine import ParameterStore, Tensor
from .pca import PcaProjection

ABLATION_MODES = ("cross_attention", "self_only", "concat4")

# additive floor of the softplus positivity mapping for illumination maps
ILLUM_EPS = 1e-4

# bias init of the illumination-map head: softplus(x) = 1 => near-identity map
_SOFTPLUS_INV_1 = float(np.log(np.expm1(1.0)))


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    Defaults put the full model at 659,885 trainable scalars (see
    `num_parameters` for the closed form), near the 0.67M target.
    """

    base_channels: int = 120
    heads: int = 4
    attention_blocks_per_branch: int = 1
    fused_channels: int = 120
    patch_train_size: int = 128
    ffn_expansion: int = 4

    def __post_init__(self):
        for f in ("base_channels", "heads", "attention_blocks_per_branch",
                  "fused_channels", "patch_train_size", "ffn_expansion"):
            v = getattr(self, f)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"ModelConfig.{f} must be a positive integer, got {v!r}")
        if self.base_channels % self.heads != 0:
            raise ValueError(
                f"base_channels ({self.base_channels}) must be divisible by heads ({self.heads})"
            )
        if self.fused_channels > 2 * self.base_channels:
            raise ValueError(
                f"fused_channels ({self.fused_channels}) must be <= 2*base_channels"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def fused_width(cfg: ModelConfig, mode: str) -> int:
    """Channel count entering PCA: 2C for cross fusion, C for single-branch modes."""
    return 2 * cfg.base_channels if mode == "cross_attention" else cfg.base_channels


def effective_fused(cfg: ModelConfig, mode: str) -> int:
    """Channel count leaving PCA; capped by what the mode actually produces."""
    return min(cfg.fused_channels, fused_width(cfg, mode))


# ---------------------------------------------------------------------------
# parameter layout
# ---------------------------------------------------------------------------

def _estimator_shapes(prefix: str, in_ch: int, c: int):
    return [
        (f"{prefix}.conv_in.w", (c, in_ch + 1)),
        (f"{prefix}.conv_in.b", (c,)),
        (f"{prefix}.dw.w", (5, 5, c)),
        (f"{prefix}.dw.b", (c,)),
        (f"{prefix}.conv_feat.w", (c, c)),
        (f"{prefix}.conv_feat.b", (c,)),
        (f"{prefix}.conv_map.w", (1, c)),
        (f"{prefix}.conv_map.b", (1,)),
    ]


def _attn_block_shapes(prefix: str, c: int, expansion: int, gated: bool, cross: bool):
    shapes = [
        (f"{prefix}.ln1.g", (c,)),
        (f"{prefix}.ln1.b", (c,)),
    ]
    if cross:
        shapes += [(f"{prefix}.ln_kv.g", (c,)), (f"{prefix}.ln_kv.b", (c,))]
    # values carry a depthwise 3x3 and a spatial (positional) branch; queries
    # and keys stay point-wise — their logits are global reductions over the
    # spatial descriptors, so local context buys them nothing
    shapes += [
        (f"{prefix}.q.w", (c, c)),
        (f"{prefix}.q.b", (c,)),
        (f"{prefix}.k.w", (c, c)),
        (f"{prefix}.k.b", (c,)),
        (f"{prefix}.v.w", (c, c)),
        (f"{prefix}.v.b", (c,)),
        (f"{prefix}.v.dw.w", (3, 3, c)),
        (f"{prefix}.v.dw.b", (c,)),
    ]
    if gated:
        shapes += [(f"{prefix}.gate.w", (c, c)), (f"{prefix}.gate.b", (c,))]
    h = expansion * c
    shapes += [
        (f"{prefix}.pos1.w", (3, 3, c)),
        (f"{prefix}.pos1.b", (c,)),
        (f"{prefix}.pos2.w", (3, 3, c)),
        (f"{prefix}.pos2.b", (c,)),
        (f"{prefix}.proj.w", (c, c)),
        (f"{prefix}.proj.b", (c,)),
        (f"{prefix}.ln2.g", (c,)),
        (f"{prefix}.ln2.b", (c,)),
        (f"{prefix}.ffn1.w", (h, c)),
        (f"{prefix}.ffn1.b", (h,)),
        (f"{prefix}.ffn2.w", (c, h)),
        (f"{prefix}.ffn2.b", (c,)),
    ]
    return shapes


def parameter_shapes(cfg: ModelConfig, mode: str = "cross_attention"):
    """Ordered (name, shape) list for one wiring mode. The order is the
    initialization draw order and the checkpoint payload order."""
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode {mode!r}")
    c = cfg.base_channels
    e = cfg.ffn_expansion
    shapes = []
    if mode == "cross_attention":
        shapes += _estimator_shapes("est_rgb", 3, c)
        shapes += _estimator_shapes("est_therm", 1, c)
        shapes += [("embed_rgb.w", (c, 3)), ("embed_rgb.b", (c,)),
                   ("embed_therm.w", (c, 1)), ("embed_therm.b", (c,))]
        for i in range(cfg.attention_blocks_per_branch):
            shapes += _attn_block_shapes(f"self_rgb{i}", c, e, gated=True, cross=False)
        for i in range(cfg.attention_blocks_per_branch):
            shapes += _attn_block_shapes(f"self_therm{i}", c, e, gated=True, cross=False)
        shapes += _attn_block_shapes("cross", c, e, gated=False, cross=True)
    elif mode == "self_only":
        shapes += _estimator_shapes("est_rgb", 3, c)
        shapes += [("embed_rgb.w", (c, 3)), ("embed_rgb.b", (c,))]
        for i in range(cfg.attention_blocks_per_branch):
            shapes += _attn_block_shapes(f"self_rgb{i}", c, e, gated=True, cross=False)
    else:  # concat4
        shapes += _estimator_shapes("est_stack", 4, c)
        shapes += [("embed_stack.w", (c, 4)), ("embed_stack.b", (c,))]
        for i in range(cfg.attention_blocks_per_branch):
            shapes += _attn_block_shapes(f"self_stack{i}", c, e, gated=True, cross=False)
    f = effective_fused(cfg, mode)
    r = 4 * f
    shapes += [("recon.w1", (r, f)), ("recon.b1", (r,)),
               ("recon.w2", (3, r)), ("recon.b2", (3,))]
    return shapes


def num_parameters(cfg: ModelConfig, mode: str = "cross_attention") -> int:
    """Total trainable scalars.

    Closed form for the full model with C = base_channels, E = ffn_expansion,
    B = attention_blocks_per_branch, F = fused_channels (recon hidden = 2F):

      estimator(in_ch)        C^2 + (in_ch + 30) C + 1     (RGB 3, thermal 1)
      embeddings              4C + 2C
      self block (gated)      (5 + 2E) C^2 + (40 + E) C    x 2B
      cross block             (4 + 2E) C^2 + (41 + E) C
      reconstruction MLP      4 F^2 + 16 F + 3             (hidden = 4F)

    (the +30C per block: the value stream's 3x3 depthwise conv plus the
    two spatial-branch convs.)
    With the defaults (C = F = 120, E = 4, B = 1) this sums to
    40 C^2 + 203 C + 4 F^2 + 16 F + 5 = 659,885.
    """
    return sum(int(np.prod(s)) for _, s in parameter_shapes(cfg, mode))


def init_param_store(cfg: ModelConfig, mode: str, rng: np.random.Generator) -> ParameterStore:
    """Weights ~ U(+-1/sqrt(fan_in)); biases zero, except:
    the illumination-map head bias starts at softplus^-1(1) so M ~= 1 at init,
    gate weights start at zero (gate == 1, plain attention), and the final
    reconstruction layer starts at zero (residual == 0, identity head)."""
    store = ParameterStore()
    for name, shape in parameter_shapes(cfg, mode):
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("b", "b1", "b2"):
            vals = np.zeros(shape)
            if name.endswith("conv_map.b"):
                vals[:] = _SOFTPLUS_INV_1
        elif leaf == "g":  # layer-norm gain
            vals = np.ones(shape)
        elif name.endswith("gate.w") or name.startswith("recon.w2"):
            vals = np.zeros(shape)
        elif name.endswith("v.dw.w"):
            # identity tap + noise: values start spatially faithful but the
            # off-center taps already carry gradient
            vals = rng.uniform(-1.0 / 6, 1.0 / 6, size=shape)
            vals[shape[0] // 2, shape[1] // 2, :] += 1.0
        else:
            if leaf == "w" and (".dw." in name or ".pos" in name):
                fan_in = shape[0] * shape[1]
            else:
                fan_in = shape[-1]
            bound = 1.0 / np.sqrt(fan_in)
            vals = rng.uniform(-bound, bound, size=shape)
        store.add(name, vals)
    return store


# ---------------------------------------------------------------------------
# graph builders
# ---------------------------------------------------------------------------

def illumination_estimator(img: Tensor, params: ParameterStore, prefix: str):
    """(B,H,W,ch) image -> (F_illum (B,H,W,C), M (B,H,W,1) with M > 0).

    The per-pixel channel mean is concatenated as a brightness prior, then
    point-wise conv -> depthwise 5x5 -> point-wise conv produce the
    illumination features; the map head squashes them through softplus + eps.
    """
    in_ch = img.data.shape[-1]
    expected = params[f"{prefix}.conv_in.w"].data.shape[1] - 1
    if in_ch != expected:
        raise ShapeError(
            f"illumination_estimator[{prefix}]: input has {in_ch} channels, weights expect {expected}"
        )
    prior = eg.t_mean(img, axis=-1, keepdims=True)
    x = eg.concat([img, prior], axis=-1)
    x = eg.linear(x, params[f"{prefix}.conv_in.w"], params[f"{prefix}.conv_in.b"])
    x = eg.depthwise_conv(x, params[f"{prefix}.dw.w"], params[f"{prefix}.dw.b"])
    f_illum = eg.linear(x, params[f"{prefix}.conv_feat.w"], params[f"{prefix}.conv_feat.b"])
    m = eg.add_const(
        eg.softplus(eg.linear(f_illum, params[f"{prefix}.conv_map.w"], params[f"{prefix}.conv_map.b"])),
        ILLUM_EPS,
    )
    return f_illum, m


def light_up(img: Tensor, m: Tensor) -> Tensor:
    """Element-wise img[h,w,c] * M[h,w,0] — the illumination correction."""
    if img.data.shape[:-1] != m.data.shape[:-1] or m.data.shape[-1] != 1:
        raise ShapeError(
            f"light_up: image {img.data.shape} and map {m.data.shape} do not align"
        )
    return eg.mul(img, m)


def _to_tokens(x: Tensor, heads: int) -> Tensor:
    """(B,H,W,C) -> (B, heads, C/heads, H*W): channel tokens with flattened
    spatial descriptors."""
    b, h, w, c = x.data.shape
    t = eg.reshape(x, (b, h * w, c))
    t = eg.transpose(t, (0, 2, 1))
    return eg.reshape(t, (b, heads, c // heads, h * w))


def _from_tokens(t: Tensor, h: int, w: int) -> Tensor:
    b, heads, tok, hw = t.data.shape
    x = eg.reshape(t, (b, heads * tok, hw))
    x = eg.transpose(x, (0, 2, 1))
    return eg.reshape(x, (b, h, w, heads * tok))


def _mha_channel(x_q: Tensor, x_kv: Tensor, gate: Tensor | None,
                 params: ParameterStore, prefix: str, heads: int) -> Tensor:
    q = eg.linear(x_q, params[f"{prefix}.q.w"], params[f"{prefix}.q.b"])
    k = eg.linear(x_kv, params[f"{prefix}.k.w"], params[f"{prefix}.k.b"])
    v = eg.linear(x_kv, params[f"{prefix}.v.w"], params[f"{prefix}.v.b"])
    v = eg.depthwise_conv(v, params[f"{prefix}.v.dw.w"], params[f"{prefix}.v.dw.b"])
    if gate is not None:
        v = eg.mul(v, gate)
    _, h, w, _ = x_q.data.shape
    out = eg.attention(_to_tokens(q, heads), _to_tokens(k, heads), _to_tokens(v, heads))
    y = _from_tokens(out, h, w)
    # spatial branch on the values: starts at zero, learns local context the
    # channel-token attention cannot express on its own
    pos = eg.depthwise_conv(
        eg.gelu(eg.depthwise_conv(v, params[f"{prefix}.pos1.w"], params[f"{prefix}.pos1.b"])),
        params[f"{prefix}.pos2.w"], params[f"{prefix}.pos2.b"],
    )
    return eg.linear(eg.add(y, pos), params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"])


def self_attention(x: Tensor, f_illum: Tensor, params: ParameterStore,
                   prefix: str, heads: int) -> Tensor:
    """Pre-norm channel attention with an illumination gate on the values,
    then a point-wise feed-forward; both residual. Output shape == input shape.

    The gate is 2*sigmoid(W f_illum + b): bounded, and exactly 1 at the
    zero-init so the block starts as plain attention.
    """
    if x.data.shape != f_illum.data.shape:
        raise ShapeError(
            f"self_attention: features {x.data.shape} vs illumination {f_illum.data.shape}"
        )
    xn = eg.layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    gate = eg.scale(
        eg.sigmoid(eg.linear(f_illum, params[f"{prefix}.gate.w"], params[f"{prefix}.gate.b"])),
        2.0,
    )
    x = eg.add(x, _mha_channel(xn, xn, gate, params, prefix, heads))
    xn2 = eg.layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    hmid = eg.gelu(eg.linear(xn2, params[f"{prefix}.ffn1.w"], params[f"{prefix}.ffn1.b"]))
    return eg.add(x, eg.linear(hmid, params[f"{prefix}.ffn2.w"], params[f"{prefix}.ffn2.b"]))


def cross_attention(x_rgb: Tensor, x_therm: Tensor, params: ParameterStore,
                    prefix: str, heads: int) -> Tensor:
    """Queries from the RGB stream, keys/values from the thermal stream,
    same channel-token layout as self_attention; the attended RGB stream is
    concatenated with the thermal features, giving 2C channels for PCA.

    With tied weights, x_therm == x_rgb and the self block's gate at its
    zero-init, the attended stream reproduces self_attention exactly (the
    computations are shared op for op).
    """
    if x_rgb.data.shape != x_therm.data.shape:
        raise ShapeError(
            f"cross_attention: modality shapes differ ({x_rgb.data.shape} vs {x_therm.data.shape})"
        )
    qn = eg.layer_norm(x_rgb, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    kvn = eg.layer_norm(x_therm, params[f"{prefix}.ln_kv.g"], params[f"{prefix}.ln_kv.b"])
    x = eg.add(x_rgb, _mha_channel(qn, kvn, None, params, prefix, heads))
    xn2 = eg.layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    hmid = eg.gelu(eg.linear(xn2, params[f"{prefix}.ffn1.w"], params[f"{prefix}.ffn1.b"]))
    attended = eg.add(x, eg.linear(hmid, params[f"{prefix}.ffn2.w"], params[f"{prefix}.ffn2.b"]))
    return eg.concat([attended, x_therm], axis=-1)


def pca_reduce_t(x: Tensor, proj: PcaProjection) -> Tensor:
    """Frozen linear map: per pixel, basis @ (x - mean). The projection is a
    constant; gradients flow through to upstream weights only."""
    if x.data.shape[-1] != proj.mean.shape[0]:
        raise ShapeError(
            f"pca_reduce: {x.data.shape[-1]} channels vs projection over {proj.mean.shape[0]}"
        )
    centered = eg.sub(x, Tensor(proj.mean))
    return eg.matmul(centered, Tensor(proj.basis.T))


def reconstruct(x_fused: Tensor, lit_rgb: Tensor, params: ParameterStore) -> Tensor:
    """Per-pixel MLP residual on top of the lit RGB. Unclamped — inference
    clamping happens outside the graph so training gradients stay exact."""
    if x_fused.data.shape[:-1] != lit_rgb.data.shape[:-1]:
        raise ShapeError(
            f"reconstruct: fused {x_fused.data.shape} vs lit {lit_rgb.data.shape}"
        )
    h = eg.gelu(eg.linear(x_fused, params["recon.w1"], params["recon.b1"]))
    residual = eg.linear(h, params["recon.w2"], params["recon.b2"])
    return eg.add(lit_rgb, residual)


class FusionNet:
    """Bundles config, wiring mode and parameters; builds a fresh graph per call."""

    def __init__(self, cfg: ModelConfig, mode: str = "cross_attention",
                 params: ParameterStore | None = None, seed: int = 0):
        if mode not in ABLATION_MODES:
            raise ValueError(f"unknown ablation mode {mode!r}")
        self.cfg = cfg
        self.mode = mode
        self.params = params if params is not None else init_param_store(
            cfg, mode, np.random.default_rng([seed, 0])
        )

    def fused_features(self, rgb: Tensor, thermal: Tensor):
        """Everything up to (but excluding) PCA. Returns (features, lit_rgb);
        the feature width is fused_width(cfg, mode)."""
        cfg, p = self.cfg, self.params
        if rgb.data.ndim != 4 or thermal.data.ndim != 4:
            raise ShapeError("expected batched (B,H,W,C) inputs")
        if rgb.data.shape[:3] != thermal.data.shape[:3]:
            raise ShapeError(
                f"rgb {rgb.data.shape} and thermal {thermal.data.shape} are not aligned"
            )
        if rgb.data.shape[-1] != 3 or thermal.data.shape[-1] != 1:
            raise ShapeError("rgb must have 3 channels and thermal 1")

        if self.mode == "concat4":
            stack = eg.concat([rgb, thermal], axis=-1)
            f_illum, m = illumination_estimator(stack, p, "est_stack")
            lit4 = light_up(stack, m)
            lit_rgb = eg.channel_slice(lit4, 0, 3)
            x = eg.linear(lit4, p["embed_stack.w"], p["embed_stack.b"])
            for i in range(cfg.attention_blocks_per_branch):
                x = self_attention(x, f_illum, p, f"self_stack{i}", cfg.heads)
            return x, lit_rgb

        f_rgb, m_rgb = illumination_estimator(rgb, p, "est_rgb")
        lit_rgb = light_up(rgb, m_rgb)
        xr = eg.linear(lit_rgb, p["embed_rgb.w"], p["embed_rgb.b"])
        for i in range(cfg.attention_blocks_per_branch):
            xr = self_attention(xr, f_rgb, p, f"self_rgb{i}", cfg.heads)
        if self.mode == "self_only":
            return xr, lit_rgb

        # thermal branch uses its illumination features only, never the map
        f_th, _ = illumination_estimator(thermal, p, "est_therm")
        xt = eg.linear(thermal, p["embed_therm.w"], p["embed_therm.b"])
        for i in range(cfg.attention_blocks_per_branch):
            xt = self_attention(xt, f_th, p, f"self_therm{i}", cfg.heads)
        return cross_attention(xr, xt, p, "cross", cfg.heads), lit_rgb

    def forward_batch(self, rgb: np.ndarray, thermal: np.ndarray,
                      proj: PcaProjection, clamp: bool = False) -> Tensor:
        """Full pipeline on batched arrays. With clamp=True the returned
        tensor is detached and clipped to [0,1] (inference path)."""
        fused, lit_rgb = self.fused_features(Tensor(rgb), Tensor(thermal))
        out = reconstruct(pca_reduce_t(fused, proj), lit_rgb, self.params)
        if clamp:
            return Tensor(np.clip(out.data, 0.0, 1.0))
        return out

    def forward(self, rgb: np.ndarray, thermal: np.ndarray, proj: PcaProjection,
                clamp: bool = True) -> np.ndarray:
        """Single-image convenience: (H,W,3) + (H,W,1) -> (H,W,3) array."""
        rgb = np.asarray(rgb, dtype=np.float64)
        thermal = np.asarray(thermal, dtype=np.float64)
        if rgb.ndim != 3 or thermal.ndim != 3:
            raise ShapeError("forward expects (H,W,3) rgb and (H,W,1) thermal")
        out = self.forward_batch(rgb[None], thermal[None], proj, clamp=clamp)
        return out.data[0]
