"""Patch-token transformers for both curriculum stages.

Parameters live in flat ``dict[str, Tensor]`` maps with dotted names, which is
also what checkpoints store. Stage 1 uses a single shared encoder (prefix
``enc``) that tells the modalities apart by a learned modality embedding.
Stage 2 has two modality-specific encoders (``enc_rgb``, ``enc_depth``), a
shared decoder (``dec``), a noise-level MLP (``sigma``) and linear heads
(``head``).

All activations are batched: token sequences are (B, T, d).
"""

from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass

import numpy as np

from .data.masking import MaskPattern
from .errors import ConfigError, ContractError, DimensionError
from .numerics import ops
from .numerics.rng import SeededRng
from .numerics.tensor import Tensor

Params = dict[str, Tensor]
MODALITIES = ("rgb", "depth")


@dataclass(frozen=True)
class ViTConfig:
    img_height: int = 32
    img_width: int = 32
    patch: int = 4
    in_chans: int = 3
    enc_dim: int = 64
    enc_depth: int = 4
    enc_heads: int = 4
    dec_dim: int = 64
    dec_depth: int = 2
    dec_heads: int = 4
    mlp_ratio: float = 4.0
    sigma_features: int = 64
    init_std: float = 0.02
    ln_eps: float = 1e-6

    def validate(self) -> None:
        if self.img_height % self.patch or self.img_width % self.patch:
            raise ConfigError(f"image {self.img_height}x{self.img_width} not divisible by patch {self.patch}")
        if self.enc_dim % self.enc_heads or self.dec_dim % self.dec_heads:
            raise ConfigError("embedding dims must be divisible by their head counts")
        if self.enc_dim % 4:
            raise ConfigError("encoder dim must be divisible by 4 for 2D sin-cos positions")
        if self.dec_dim % 4:
            raise ConfigError("decoder dim must be divisible by 4 for 2D sin-cos positions")
        if self.sigma_features % 2 or self.sigma_features < 4:
            raise ConfigError("sigma feature count must be even and >= 4")

    @property
    def grid(self) -> tuple[int, int]:
        return self.img_height // self.patch, self.img_width // self.patch

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.in_chans

    def mlp_hidden(self, dim: int) -> int:
        return int(dim * self.mlp_ratio)

    def to_dict(self) -> dict:
        return asdict(self)


def vit_base_config() -> ViTConfig:
    """ViT-B encoder with the 8-block, 16-head, 512-wide decoder at 224x224."""
    return ViTConfig(
        img_height=224, img_width=224, patch=16, enc_dim=768, enc_depth=12, enc_heads=12,
        dec_dim=512, dec_depth=8, dec_heads=16, sigma_features=512,
    )


def tiny_config() -> ViTConfig:
    """Two-block, dim-16 encoder (dim-8 decoder) used by gradient checks."""
    return ViTConfig(
        img_height=8, img_width=8, patch=4, enc_dim=16, enc_depth=2, enc_heads=2,
        dec_dim=8, dec_depth=1, dec_heads=2, mlp_ratio=1.0, sigma_features=8, init_std=0.2,
    )


# -- positional and noise-level features --------------------------------------

def _sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.outer(pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


@functools.lru_cache(maxsize=32)
def _pos_table(dim: int, grid: tuple[int, int]) -> np.ndarray:
    gh, gw = grid
    yy, xx = np.meshgrid(np.arange(gh, dtype=np.float64), np.arange(gw, dtype=np.float64), indexing="ij")
    table = np.concatenate([_sincos_1d(dim // 2, yy), _sincos_1d(dim // 2, xx)], axis=1)
    table.flags.writeable = False
    return table


def sincos_pos_embed_2d(dim: int, grid: tuple[int, int]) -> np.ndarray:
    """Fixed 2D sin-cos table of shape (gh*gw, dim), row-major over the grid (cached, read-only)."""
    return _pos_table(int(dim), tuple(int(g) for g in grid))


def sigma_sinusoid(sigma, dim: int) -> np.ndarray:
    """[sin(s*w_k) ..., cos(s*w_k) ...] with w_k geometric from 1 down to 1e-4."""
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    if (sigma < 0).any():
        raise ContractError("noise level must be non-negative")
    half = dim // 2
    omega = 10000.0 ** (-np.arange(half, dtype=np.float64) / max(half - 1, 1))
    args = sigma[:, None] * omega[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


# -- initialization -------------------------------------------------------------

def trunc_normal(rng: SeededRng, shape, std: float) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations by redrawing."""
    x = rng.normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


class _Init:
    def __init__(self, rng: SeededRng, std: float):
        self.rng = rng
        self.std = std
        self.params: Params = {}

    def weight(self, name: str, shape):
        self.params[name] = Tensor(trunc_normal(self.rng.child(name), shape, self.std), requires_grad=True, name=name)

    def const(self, name: str, shape, value: float):
        self.params[name] = Tensor(np.full(shape, value), requires_grad=True, name=name)

    def linear(self, name: str, fan_in: int, fan_out: int):
        self.weight(f"{name}.w", (fan_in, fan_out))
        self.const(f"{name}.b", (fan_out,), 0.0)

    def layer_norm(self, name: str, dim: int):
        self.const(f"{name}.g", (dim,), 1.0)
        self.const(f"{name}.b", (dim,), 0.0)

    def block(self, name: str, dim: int, hidden: int):
        self.layer_norm(f"{name}.ln1", dim)
        # no key bias: softmax is invariant to it, so its gradient is identically zero
        self.weight(f"{name}.qkv.w", (dim, 3 * dim))
        self.const(f"{name}.q.b", (dim,), 0.0)
        self.const(f"{name}.v.b", (dim,), 0.0)
        self.linear(f"{name}.proj", dim, dim)
        self.layer_norm(f"{name}.ln2", dim)
        self.linear(f"{name}.fc1", dim, hidden)
        self.linear(f"{name}.fc2", hidden, dim)


def init_encoder(cfg: ViTConfig, rng: SeededRng, prefix: str = "enc") -> Params:
    cfg.validate()
    init = _Init(rng, cfg.init_std)
    d = cfg.enc_dim
    init.linear(f"{prefix}.patch", cfg.patch_dim, d)
    for m in MODALITIES:
        init.weight(f"{prefix}.mod.{m}", (d,))
    for i in range(cfg.enc_depth):
        init.block(f"{prefix}.blocks.{i}", d, cfg.mlp_hidden(d))
    init.layer_norm(f"{prefix}.norm", d)
    return init.params


def init_decoder(cfg: ViTConfig, rng: SeededRng, rgb_head: bool = False) -> Params:
    cfg.validate()
    init = _Init(rng, cfg.init_std)
    d = cfg.dec_dim
    init.linear("dec.embed_rgb", cfg.enc_dim, d)
    init.linear("dec.embed_depth", cfg.enc_dim, d)
    init.weight("dec.mask_token", (d,))
    for m in MODALITIES:
        init.weight(f"dec.mod.{m}", (d,))
    for i in range(cfg.dec_depth):
        init.block(f"dec.blocks.{i}", d, cfg.mlp_hidden(d))
    init.layer_norm("dec.norm", d)
    init.linear("sigma.fc1", cfg.sigma_features, d)
    init.linear("sigma.fc2", d, d)
    init.linear("head.depth", d, cfg.patch * cfg.patch)
    if rgb_head:
        init.linear("head.rgb", d, cfg.patch * cfg.patch * 3)
    return init.params


def encoder_param_count(cfg: ViTConfig) -> int:
    d, h = cfg.enc_dim, cfg.mlp_hidden(cfg.enc_dim)
    block = 4 * d + (3 * d * d + 2 * d) + (d * d + d) + (d * h + h) + (h * d + d)
    return cfg.patch_dim * d + d + 2 * d + cfg.enc_depth * block + 2 * d


def decoder_param_count(cfg: ViTConfig, rgb_head: bool = False) -> int:
    e, d, h = cfg.enc_dim, cfg.dec_dim, cfg.mlp_hidden(cfg.dec_dim)
    block = 4 * d + (3 * d * d + 2 * d) + (d * d + d) + (d * h + h) + (h * d + d)
    n = 2 * (e * d + d) + d + 2 * d + cfg.dec_depth * block + 2 * d
    n += cfg.sigma_features * d + d + d * d + d
    pp = cfg.patch * cfg.patch
    n += d * pp + pp
    if rgb_head:
        n += d * 3 * pp + 3 * pp
    return n


def param_count(params: Params) -> int:
    return sum(p.size for p in params.values())


# -- building blocks -------------------------------------------------------------

def _ln(x: Tensor, params: Params, name: str, eps: float) -> Tensor:
    return ops.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"], eps)


def _lin(x: Tensor, params: Params, name: str) -> Tensor:
    return ops.linear(x, params[f"{name}.w"], params[f"{name}.b"])


def attention(x: Tensor, params: Params, name: str, heads: int) -> Tensor:
    B, T, d = x.shape
    dh = d // heads
    bias = ops.concat([params[f"{name}.q.b"], Tensor(np.zeros(d)), params[f"{name}.v.b"]], axis=0)
    qkv = ops.reshape(ops.linear(x, params[f"{name}.qkv.w"], bias), (B, T, 3, heads, dh))
    qkv = ops.transpose(qkv, (2, 0, 3, 1, 4))  # (3, B, H, T, dh)
    q, k, v = (ops.reshape(ops.index_select(qkv, [i], axis=0), (B, heads, T, dh)) for i in range(3))
    scores = ops.scalar_mul(ops.matmul(q, ops.transpose(k)), 1.0 / math.sqrt(dh))
    out = ops.matmul(ops.softmax(scores, axis=-1), v)  # (B, H, T, dh)
    out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (B, T, d))
    return _lin(out, params, f"{name}.proj")


def transformer_block(x: Tensor, params: Params, name: str, heads: int, eps: float) -> Tensor:
    """Pre-norm attention and GELU MLP, each with a residual connection."""
    x = x + attention(_ln(x, params, f"{name}.ln1", eps), params, name, heads)
    h = ops.gelu(_lin(_ln(x, params, f"{name}.ln2", eps), params, f"{name}.fc1"))
    return x + _lin(h, params, f"{name}.fc2")


def _const(arr: np.ndarray) -> Tensor:
    return Tensor(arr)


# -- encoder side ------------------------------------------------------------------

def patch_embed(patches: np.ndarray | Tensor, params: Params, cfg: ViTConfig, prefix: str = "enc") -> Tensor:
    """Linear projection of flattened (B, T, p*p*3) patches plus fixed 2D positions.

    Equivalent to a stride-p convolution over the image.
    """
    x = patches if isinstance(patches, Tensor) else Tensor(patches)
    if x.ndim != 3 or x.shape[1] != cfg.num_patches or x.shape[2] != cfg.patch_dim:
        raise DimensionError(
            f"patch_embed: expected (B, {cfg.num_patches}, {cfg.patch_dim}) patches, got {x.shape}"
        )
    tokens = _lin(x, params, f"{prefix}.patch")
    pos = sincos_pos_embed_2d(cfg.enc_dim, cfg.grid)
    return tokens + _const(np.broadcast_to(pos, tokens.shape))


def add_modality(tokens: Tensor, params: Params, prefix: str, modality: str) -> Tensor:
    if modality not in MODALITIES:
        raise ContractError(f"unknown modality {modality!r}")
    return ops.add_broadcast(tokens, params[f"{prefix}.mod.{modality}"])


def _visible_ids(mask, batch: int, num_patches: int) -> np.ndarray:
    if mask is None:
        return np.broadcast_to(np.arange(num_patches), (batch, num_patches))
    if isinstance(mask, MaskPattern):
        if mask.num_patches != num_patches:
            raise ContractError(f"mask covers {mask.num_patches} patches, tokens have {num_patches}")
        ids = mask.visible_indices()
    else:
        ids = np.asarray(mask)
    if ids.ndim == 1:
        ids = np.broadcast_to(ids, (batch, ids.size))
    if ids.shape[0] != batch:
        raise ContractError(f"mask batch {ids.shape[0]} != token batch {batch}")
    if ids.shape[1] == 0:
        raise ContractError("encode needs at least one visible token")
    return ids


def run_encoder(tokens: Tensor, params: Params, cfg: ViTConfig, prefix: str = "enc") -> Tensor:
    x = tokens
    for i in range(cfg.enc_depth):
        x = transformer_block(x, params, f"{prefix}.blocks.{i}", cfg.enc_heads, cfg.ln_eps)
    return _ln(x, params, f"{prefix}.norm", cfg.ln_eps)


def encode(tokens: Tensor, mask, params: Params, cfg: ViTConfig, prefix: str = "enc") -> Tensor:
    """Run the encoder on the visible tokens only; returns (B, K, d_enc)."""
    B, T, _ = tokens.shape
    ids = _visible_ids(mask, B, T)
    visible = tokens if ids.shape[1] == T and (ids == np.arange(T)).all() else ops.gather(tokens, ids)
    return run_encoder(visible, params, cfg, prefix)


def embed(patches, params: Params, cfg: ViTConfig, prefix: str, modality: str) -> Tensor:
    return add_modality(patch_embed(patches, params, cfg, prefix), params, prefix, modality)


def shared_encode(rgb_patches, depth_patches, params: Params, cfg: ViTConfig, prefix: str = "enc"):
    """Unmasked shared-encoder pass over both modalities; l2-normalized (B, T, d) outputs."""
    rgb = embed(rgb_patches, params, cfg, prefix, "rgb")
    dep = embed(depth_patches, params, cfg, prefix, "depth")
    B = rgb.shape[0]
    z = run_encoder(ops.concat([rgb, dep], axis=0), params, cfg, prefix)
    z = ops.l2_normalize(z, axis=-1)
    return ops.index_select(z, np.arange(B), axis=0), ops.index_select(z, np.arange(B, 2 * B), axis=0)


# -- decoder side ----------------------------------------------------------------------

def sigma_embedding(sigma, params: Params, cfg: ViTConfig) -> Tensor:
    """Sinusoid of the noise level through FC -> ReLU -> FC; returns (B, d_dec)."""
    feats = Tensor(sigma_sinusoid(sigma, cfg.sigma_features))
    h = ops.relu(_lin(feats, params, "sigma.fc1"))
    return _lin(h, params, "sigma.fc2")


@dataclass
class DecoderInput:
    tokens: Tensor  # (B, L, d_dec)
    depth_offset: int  # depth tokens occupy tokens[:, offset:offset+T]
    depth_restore: np.ndarray  # (B, T): grid position -> index within the depth block
    rgb_restore: np.ndarray | None  # same for RGB when RGB mask tokens are present
    num_rgb_visible: int


def _pos_rows(table: np.ndarray, ids: np.ndarray) -> Tensor:
    return _const(table[ids])


def assemble_decoder_input(
    rgb_latents: Tensor,
    depth_latents: Tensor,
    sigma_vec: Tensor | None,
    rgb_mask: MaskPattern,
    depth_mask: MaskPattern,
    params: Params,
    cfg: ViTConfig,
    rgb_mask_tokens: bool = False,
) -> DecoderInput:
    """[RGB visible] ++ [depth visible (+ sigma)] ++ [depth mask tokens] (++ [RGB mask tokens])."""
    B = rgb_latents.shape[0]
    T = cfg.num_patches
    rgb_vis, dep_vis = rgb_mask.visible_indices(), depth_mask.visible_indices()
    dep_masked = depth_mask.masked_indices()
    if rgb_vis.ndim == 1:
        rgb_vis, dep_vis, dep_masked = (np.broadcast_to(a, (B, a.size)) for a in (rgb_vis, dep_vis, dep_masked))
    if rgb_latents.shape[1] != rgb_vis.shape[1] or depth_latents.shape[1] != dep_vis.shape[1]:
        raise ContractError(
            f"latent lengths ({rgb_latents.shape[1]}, {depth_latents.shape[1]}) do not match "
            f"visible counts ({rgb_vis.shape[1]}, {dep_vis.shape[1]})"
        )
    d = cfg.dec_dim
    pos = sincos_pos_embed_2d(d, cfg.grid)

    rgb_tok = _lin(rgb_latents, params, "dec.embed_rgb") + _pos_rows(pos, rgb_vis)
    rgb_tok = ops.add_broadcast(rgb_tok, params["dec.mod.rgb"])

    dep_tok = _lin(depth_latents, params, "dec.embed_depth")
    if sigma_vec is not None:
        s = ops.reshape(sigma_vec, (B, 1, d))
        dep_tok = dep_tok + ops.broadcast(s, dep_tok.shape)
    dep_tok = ops.add_broadcast(dep_tok + _pos_rows(pos, dep_vis), params["dec.mod.depth"])

    parts = [rgb_tok, dep_tok]
    if dep_masked.shape[1]:
        m = ops.broadcast(params["dec.mask_token"], (B, dep_masked.shape[1], d)) + _pos_rows(pos, dep_masked)
        parts.append(ops.add_broadcast(m, params["dec.mod.depth"]))
    depth_restore = np.argsort(np.concatenate([dep_vis, dep_masked], axis=1), axis=1, kind="stable")

    rgb_restore = None
    if rgb_mask_tokens:
        rgb_masked = rgb_mask.masked_indices()
        if rgb_masked.ndim == 1:
            rgb_masked = np.broadcast_to(rgb_masked, (B, rgb_masked.size))
        if rgb_masked.shape[1]:
            m = ops.broadcast(params["dec.mask_token"], (B, rgb_masked.shape[1], d)) + _pos_rows(pos, rgb_masked)
            parts.append(ops.add_broadcast(m, params["dec.mod.rgb"]))
        order = np.concatenate([rgb_vis, rgb_masked], axis=1)
        rgb_restore = np.argsort(order, axis=1, kind="stable")
    seq = ops.concat(parts, axis=1)
    assert seq.shape[1] == rgb_vis.shape[1] + T + (T - rgb_vis.shape[1] if rgb_mask_tokens else 0)
    return DecoderInput(seq, rgb_vis.shape[1], depth_restore, rgb_restore, rgb_vis.shape[1])


def decode_predict(inp: DecoderInput, params: Params, cfg: ViTConfig):
    """Decoder blocks over the full sequence, then linear heads.

    Returns ``(depth_pred, rgb_pred)`` with depth_pred (B, T, p*p) in grid order
    covering every depth position; rgb_pred is (B, T, p*p*3) or None.
    """
    x = inp.tokens
    for i in range(cfg.dec_depth):
        x = transformer_block(x, params, f"dec.blocks.{i}", cfg.dec_heads, cfg.ln_eps)
    x = _ln(x, params, "dec.norm", cfg.ln_eps)
    T = cfg.num_patches
    off = inp.depth_offset
    dep = ops.gather(ops.index_select(x, np.arange(off, off + T), axis=1), inp.depth_restore)
    depth_pred = _lin(dep, params, "head.depth")
    rgb_pred = None
    if inp.rgb_restore is not None and "head.rgb.w" in params:
        k = inp.num_rgb_visible
        rgb_ids = np.concatenate([np.arange(k), np.arange(off + T, off + T + (T - k))])
        rgb = ops.gather(ops.index_select(x, rgb_ids, axis=1), inp.rgb_restore)
        rgb_pred = _lin(rgb, params, "head.rgb")
    return depth_pred, rgb_pred


# -- whole models ------------------------------------------------------------------------

def init_stage1_params(cfg: ViTConfig, rng: SeededRng) -> Params:
    return init_encoder(cfg, rng.child("encoder"), "enc")


def init_stage2_params(cfg: ViTConfig, rng: SeededRng, rgb_head: bool = False) -> Params:
    """Fresh stage-2 parameters; both encoders start from the same random draw."""
    enc = init_encoder(cfg, rng.child("encoder"), "enc")
    params = copy_encoder(enc, "enc", "enc_rgb")
    params.update(copy_encoder(enc, "enc", "enc_depth"))
    params.update(init_decoder(cfg, rng.child("decoder"), rgb_head=rgb_head))
    return params


def copy_encoder(params: Params, src: str, dst: str) -> Params:
    """Deep copy of every ``src.*`` tensor renamed to ``dst.*``."""
    out = {}
    for k, v in params.items():
        if k.startswith(src + "."):
            name = dst + k[len(src):]
            out[name] = Tensor(v.data.copy(), requires_grad=True, name=name)
    return out


def encoder_prefixes(params: Params) -> list[str]:
    return sorted({k.split(".")[0] for k in params if k.split(".")[0].startswith("enc")})
