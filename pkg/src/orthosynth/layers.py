"""Network building blocks on top of the autodiff engine.

Modules hold their parameters as :class:`~orthosynth.autodiff.Tensor`
attributes and expose them through :meth:`Module.named_parameters`, which
walks nested modules and module lists to produce unique dotted names.
Linear maps use normalized fan-in initialization; modulation layers and
output heads that must start as the identity are zero-initialized.
"""

from __future__ import annotations

import numpy as np

from orthosynth import autodiff as ad
from orthosynth.autodiff import Tensor


class ConfigError(ValueError):
    pass


class Module:
    """Base class providing parameter discovery and checkpoint plumbing."""

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                for sub, p in value.named_parameters().items():
                    out[f"{name}.{sub}"] = p
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        for sub, p in item.named_parameters().items():
                            out[f"{name}.{i}.{sub}"] = p
        return out

    def load_state(self, state: dict[str, np.ndarray]):
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise ConfigError(f"parameter mismatch; missing={missing}, extra={extra}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ConfigError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}


def _param(rng, shape, scale) -> Tensor:
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, nin: int, nout: int, rng, zero_init: bool = False):
        if zero_init:
            self.weight = Tensor(np.zeros((nin, nout)), requires_grad=True)
        else:
            self.weight = _param(rng, (nin, nout), 1.0 / np.sqrt(nin))
        self.bias = Tensor(np.zeros(nout), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    __call__ = forward


_ACTS = {"relu": ad.relu, "gelu": ad.gelu, "tanh": ad.tanh}


class MLP(Module):
    """Stack of linear layers with an activation between them."""

    def __init__(self, dims, rng, act: str = "relu", zero_last: bool = False):
        if len(dims) < 2:
            raise ConfigError("MLP needs at least input and output dims")
        self.layers = [
            Linear(dims[i], dims[i + 1], rng,
                   zero_init=(zero_last and i == len(dims) - 2))
            for i in range(len(dims) - 1)
        ]
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        fn = _ACTS[self.act]
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = fn(x)
        return x

    __call__ = forward


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        normed = centered / ad.sqrt(var + self.eps)
        return normed * self.gamma + self.beta

    __call__ = forward


class MultiHeadSelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng):
        if dim % heads != 0:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.dim = dim
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        k_tokens = x.shape[-2]
        dh = self.dim // self.heads
        qkv = self.qkv(x)  # (..., K, 3*dim)
        lead = x.shape[:-2]
        qkv = qkv.reshape(lead + (k_tokens, 3, self.heads, dh))
        nd = len(lead)
        # (..., 3, heads, K, dh)
        qkv = qkv.transpose(tuple(range(nd)) + (nd + 1, nd + 2, nd, nd + 3))
        q = qkv[(Ellipsis, 0, slice(None), slice(None), slice(None))]
        k = qkv[(Ellipsis, 1, slice(None), slice(None), slice(None))]
        v = qkv[(Ellipsis, 2, slice(None), slice(None), slice(None))]
        att = q @ k.transpose(tuple(range(nd)) + (nd, nd + 2, nd + 1)) * (1.0 / np.sqrt(dh))
        att = ad.softmax(att, axis=-1)
        out = att @ v  # (..., heads, K, dh)
        out = out.transpose(tuple(range(nd)) + (nd + 1, nd, nd + 2))
        out = out.reshape(lead + (k_tokens, self.dim))
        return self.proj(out)

    __call__ = forward


class AttentionBlock(Module):
    """Pre-norm self-attention block with conditional affine modulation.

    The condition vector passes through a zero-initialized linear map that
    emits scale/shift deltas applied to the normalized activations before
    the attention and MLP branches.  At initialization (or with a zero
    condition) the block is exactly a plain pre-norm transformer block.
    """

    def __init__(self, dim: int, heads: int, cond_dim: int, rng, mlp_ratio: int = 2):
        self.ln1 = LayerNorm(dim)
        self.ln2 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng)
        self.mlp = MLP([dim, mlp_ratio * dim, dim], rng, act="gelu")
        self.mod = Linear(cond_dim, 4 * dim, rng, zero_init=True)
        self.dim = dim

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        d = self.dim
        mods = self.mod(cond)  # (..., 4*dim)
        lead = mods.shape[:-1]
        mods = mods.reshape(lead + (1, 4 * d))  # broadcast over tokens
        scale1 = mods[..., 0:d] + 1.0
        shift1 = mods[..., d:2 * d]
        scale2 = mods[..., 2 * d:3 * d] + 1.0
        shift2 = mods[..., 3 * d:4 * d]
        x = x + self.attn(self.ln1(x) * scale1 + shift1)
        x = x + self.mlp(self.ln2(x) * scale2 + shift2)
        return x

    __call__ = forward


def attention_block(tokens: Tensor, condition: Tensor, heads: int, rng=None) -> Tensor:
    """Run one freshly initialized conditioned block over (K, F) tokens."""
    tokens = ad.as_tensor(tokens)
    condition = ad.as_tensor(condition)
    if rng is None:
        rng = np.random.default_rng(0)
    block = AttentionBlock(tokens.shape[-1], heads, condition.shape[-1], rng)
    return block(tokens, condition)


def avgpool2(x: Tensor) -> Tensor:
    """Average-pool a (B, D, H, W, C) volume by 2 along each spatial axis."""
    b, d0, d1, d2, c = x.shape
    if d0 % 2 or d1 % 2 or d2 % 2:
        raise ConfigError(f"lattice dims {(d0, d1, d2)} not divisible by 2")
    x = x.reshape((b, d0 // 2, 2, d1 // 2, 2, d2 // 2, 2, c))
    return x.mean(axis=(2, 4, 6))


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour upsample of a (B, D, H, W, C) volume by 2."""
    b, d0, d1, d2, c = x.shape
    x = x.reshape((b, d0, 1, d1, 1, d2, 1, c))
    x = ad.broadcast_to(x, (b, d0, 2, d1, 2, d2, 2, c))
    return x.reshape((b, 2 * d0, 2 * d1, 2 * d2, c))


class Conv3d(Module):
    def __init__(self, cin: int, cout: int, rng, zero_init: bool = False):
        if zero_init:
            self.weight = Tensor(np.zeros((27, cin, cout)), requires_grad=True)
        else:
            self.weight = _param(rng, (27, cin, cout), 1.0 / np.sqrt(27 * cin))
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv3d(x, self.weight, self.bias)

    __call__ = forward


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10_000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((t.shape[0], 1))], axis=1)
    return emb


class VolumeNet(Module):
    """Two-level encoder/decoder over a dense voxel lattice.

    Keeps the lattice shape while mapping ``cin`` channels to ``cout``.
    With ``residual=True`` (requires cin == cout) the final convolution is
    zero-initialized, so a fresh network is exactly the identity map.  An
    optional timestep embedding is projected and added at each level.
    """

    def __init__(self, cin: int, cout: int, width: int, rng,
                 residual: bool = False, temb_dim: int = 0):
        if residual and cin != cout:
            raise ConfigError("residual VolumeNet requires cin == cout")
        self.residual = residual
        self.temb_dim = temb_dim
        self.conv_in = Conv3d(cin, width, rng)
        self.conv0 = Conv3d(width, width, rng)
        self.conv_d1 = Conv3d(width, width, rng)
        self.conv_d2 = Conv3d(width, width, rng)
        self.conv_up = Conv3d(2 * width, width, rng)
        self.conv_out = Conv3d(width, cout, rng, zero_init=residual)
        if temb_dim:
            self.t0 = Linear(temb_dim, width, rng)
            self.t1 = Linear(temb_dim, width, rng)

    def forward(self, x: Tensor, temb: Tensor | None = None) -> Tensor:
        b, d0, d1, d2, _ = x.shape
        if d0 % 2 or d1 % 2 or d2 % 2:
            raise ConfigError(f"lattice dims {(d0, d1, d2)} must be divisible by 2")
        h = ad.relu(self.conv_in(x))
        if temb is not None:
            h = h + self.t0(temb).reshape((b, 1, 1, 1, -1))
        h = ad.relu(self.conv0(h))
        d = avgpool2(h)
        d = ad.relu(self.conv_d1(d))
        if temb is not None:
            d = d + self.t1(temb).reshape((b, 1, 1, 1, -1))
        d = ad.relu(self.conv_d2(d))
        u = upsample2(d)
        u = ad.relu(self.conv_up(ad.concat([u, h], axis=-1)))
        out = self.conv_out(u)
        if self.residual:
            out = out + x
        return out

    __call__ = forward


class PointEncoder(Module):
    """Shared per-point feature map; input rows carry the point's global
    coordinates, its tooth-local coordinates, and the local quadratic
    products (see voxelize.encoder_point_features)."""

    IN_FEATURES = 15

    def __init__(self, fdim: int, rng, width: int = 0):
        width = width or 2 * fdim
        self.mlp = MLP([self.IN_FEATURES, width, fdim], rng, act="relu")
        self.fdim = fdim

    def forward(self, feats: Tensor) -> Tensor:
        return self.mlp(feats)

    __call__ = forward
