"""Differentiable building blocks for the surrogate and the acquisition agent.

Small transformer encoder/decoder stacks (pre-norm, GELU, no positional
embedding anywhere, sequences <= ~64 tokens), plus a tanh-squashed Gaussian
policy head. Everything runs in float64 on CPU; initialization is scaled
uniform fan-in driven by an explicit seed so params are reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import (
    ConfigError,
    EmptyContextError,
    EmptyInputError,
    InvalidDomainError,
    InvalidMaskError,
    ShapeError,
)

DTYPE = torch.float64

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0


@dataclass(frozen=True)
class TransformerConfig:
    """Architecture hyperparameters shared by encoder and decoder stacks."""

    model_dim: int = 64
    num_heads: int = 4
    num_encoder_layers: int = 2
    num_decoder_layers: int = 2
    feedforward_dim: int = 128
    use_positional_embedding: bool = False

    def __post_init__(self):
        for name in ("model_dim", "num_heads", "num_encoder_layers",
                     "num_decoder_layers", "feedforward_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.model_dim % self.num_heads != 0:
            raise ConfigError("model_dim must be divisible by num_heads")
        if self.use_positional_embedding:
            raise ConfigError("positional embeddings are not supported")


def seeded_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen


def init_linear_(layer: nn.Linear, gen: torch.Generator) -> nn.Linear:
    """Scaled uniform fan-in init, U(+-1/sqrt(fan_in)), for weight and bias."""
    bound = 1.0 / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        if layer.bias is not None:
            layer.bias.uniform_(-bound, bound, generator=gen)
    return layer


def make_linear(in_features: int, out_features: int, gen: torch.Generator,
                bias: bool = True) -> nn.Linear:
    layer = nn.Linear(in_features, out_features, bias=bias, dtype=DTYPE)
    return init_linear_(layer, gen)


class MLP(nn.Module):
    """Feed-forward stack with GELU between layers, linear output."""

    def __init__(self, dims, gen: torch.Generator):
        super().__init__()
        if len(dims) < 2:
            raise ConfigError("MLP needs at least input and output dims")
        self.layers = nn.ModuleList(
            make_linear(dims[i], dims[i + 1], gen) for i in range(len(dims) - 1))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = torch.nn.functional.gelu(x)
        return x


def diagonal_mask(n: int) -> torch.Tensor:
    """Boolean (n, n) mask letting each query attend only to itself."""
    return torch.eye(n, dtype=torch.bool)


def full_mask(num_queries: int, num_keys: int) -> torch.Tensor:
    return torch.ones(num_queries, num_keys, dtype=torch.bool)


def padding_attention_mask(key_mask: torch.Tensor, num_queries: int) -> torch.Tensor:
    """(B, Tk) key-validity mask -> (B, 1, Tq, Tk) attention mask."""
    return key_mask[:, None, None, :].expand(-1, 1, num_queries, -1)


def _as_batched(x: torch.Tensor):
    if x.dim() == 2:
        return x.unsqueeze(0), True
    if x.dim() == 3:
        return x, False
    raise ShapeError(f"expected (tokens, dim) or (batch, tokens, dim), got {tuple(x.shape)}")


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention over full sequences with boolean masks.

    Masks use True = "may attend". Accepts (Tq, Tk) masks shared across the
    batch or (B, 1|H, Tq, Tk) per-sample masks; every row must allow at
    least one key.
    """

    def __init__(self, model_dim: int, num_heads: int, gen: torch.Generator):
        super().__init__()
        if model_dim % num_heads != 0:
            raise ConfigError("model_dim must be divisible by num_heads")
        self.model_dim = model_dim
        self.num_heads = num_heads
        self.head_dim = model_dim // num_heads
        self.wq = make_linear(model_dim, model_dim, gen)
        self.wk = make_linear(model_dim, model_dim, gen)
        self.wv = make_linear(model_dim, model_dim, gen)
        self.wo = make_linear(model_dim, model_dim, gen)

    def forward(self, queries, keys, values, mask=None):
        queries, squeeze = _as_batched(queries)
        keys, _ = _as_batched(keys)
        values, _ = _as_batched(values)
        b, tq, d = queries.shape
        tk = keys.shape[1]
        if d != self.model_dim or keys.shape[-1] != self.model_dim \
                or values.shape[-1] != self.model_dim:
            raise ShapeError("token dimension does not match model_dim")
        if keys.shape[:2] != values.shape[:2]:
            raise ShapeError("keys and values must have matching length")
        if tq == 0 or tk == 0:
            raise EmptyInputError("attention over an empty sequence")
        if mask is None:
            mask = full_mask(tq, tk)
        if mask.dim() == 2:
            if mask.shape != (tq, tk):
                raise ShapeError(f"mask shape {tuple(mask.shape)} != ({tq}, {tk})")
            mask = mask[None, None]
        elif mask.dim() == 4:
            if mask.shape[-2:] != (tq, tk):
                raise ShapeError(f"mask shape {tuple(mask.shape)} != (*, *, {tq}, {tk})")
        else:
            raise ShapeError("mask must be 2-D or 4-D boolean")
        if not mask.any(dim=-1).all():
            raise InvalidMaskError("attention mask has a row with no allowed keys")

        def split(x, proj):
            return proj(x).view(b, -1, self.num_heads, self.head_dim).transpose(1, 2)

        q = split(queries, self.wq)
        k = split(keys, self.wk)
        v = split(values, self.wv)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, tq, self.model_dim)
        out = self.wo(out)
        return out.squeeze(0) if squeeze else out

    def forward_diagonal(self, tokens):
        """Self-attention under a diagonal mask, computed without the (T, T)
        score matrix: a single allowed key always gets softmax weight 1, so
        the result is exactly wo(wv(x)) token by token."""
        if tokens.shape[-1] != self.model_dim:
            raise ShapeError("token dimension does not match model_dim")
        return self.wo(self.wv(tokens))


class _FeedForward(nn.Module):
    def __init__(self, model_dim, hidden_dim, gen):
        super().__init__()
        self.lin1 = make_linear(model_dim, hidden_dim, gen)
        self.lin2 = make_linear(hidden_dim, model_dim, gen)

    def forward(self, x):
        return self.lin2(torch.nn.functional.gelu(self.lin1(x)))


class _EncoderLayer(nn.Module):
    def __init__(self, config: TransformerConfig, gen):
        super().__init__()
        self.norm1 = nn.LayerNorm(config.model_dim, dtype=DTYPE)
        self.attn = MultiHeadAttention(config.model_dim, config.num_heads, gen)
        self.norm2 = nn.LayerNorm(config.model_dim, dtype=DTYPE)
        self.ff = _FeedForward(config.model_dim, config.feedforward_dim, gen)

    def forward(self, x, mask=None):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, mask)
        return x + self.ff(self.norm2(x))


class TransformerEncoder(nn.Module):
    """Pre-norm self-attention stack; position-free, so permutation-equivariant."""

    def __init__(self, config: TransformerConfig, seed: int = 0):
        super().__init__()
        gen = seeded_generator(seed)
        self.config = config
        self.layers = nn.ModuleList(
            _EncoderLayer(config, gen) for _ in range(config.num_encoder_layers))
        self.norm_out = nn.LayerNorm(config.model_dim, dtype=DTYPE)

    def forward(self, sequence, key_mask=None):
        sequence, squeeze = _as_batched(sequence)
        if sequence.shape[1] == 0:
            raise EmptyInputError("encoder input sequence is empty")
        if sequence.shape[-1] != self.config.model_dim:
            raise ShapeError("encoder token dimension does not match model_dim")
        mask = None
        if key_mask is not None:
            mask = padding_attention_mask(key_mask, sequence.shape[1])
        x = sequence
        for layer in self.layers:
            x = layer(x, mask)
        x = self.norm_out(x)
        return x.squeeze(0) if squeeze else x


class _DecoderLayer(nn.Module):
    def __init__(self, config: TransformerConfig, gen):
        super().__init__()
        self.norm1 = nn.LayerNorm(config.model_dim, dtype=DTYPE)
        self.self_attn = MultiHeadAttention(config.model_dim, config.num_heads, gen)
        self.norm2 = nn.LayerNorm(config.model_dim, dtype=DTYPE)
        self.cross_attn = MultiHeadAttention(config.model_dim, config.num_heads, gen)
        self.norm3 = nn.LayerNorm(config.model_dim, dtype=DTYPE)
        self.ff = _FeedForward(config.model_dim, config.feedforward_dim, gen)

    def forward(self, x, context, cross_mask=None):
        x = x + self.self_attn.forward_diagonal(self.norm1(x))
        x = x + self.cross_attn(self.norm2(x), context, context, cross_mask)
        return x + self.ff(self.norm3(x))


class TransformerDecoder(nn.Module):
    """Cross-attention stack whose queries never see each other.

    Self-attention runs under a diagonal mask, so output row i is a function
    of query i and the context only; permuting the context leaves every
    output unchanged.
    """

    def __init__(self, config: TransformerConfig, seed: int = 0):
        super().__init__()
        gen = seeded_generator(seed)
        self.config = config
        self.layers = nn.ModuleList(
            _DecoderLayer(config, gen) for _ in range(config.num_decoder_layers))
        self.norm_out = nn.LayerNorm(config.model_dim, dtype=DTYPE)

    def forward(self, query_sequence, context, context_key_mask=None):
        query_sequence, squeeze = _as_batched(query_sequence)
        context, _ = _as_batched(context)
        if query_sequence.shape[1] == 0:
            raise EmptyInputError("decoder query sequence is empty")
        if context.shape[1] == 0:
            raise EmptyContextError("decoder context sequence is empty")
        if query_sequence.shape[-1] != self.config.model_dim \
                or context.shape[-1] != self.config.model_dim:
            raise ShapeError("decoder token dimension does not match model_dim")
        tq = query_sequence.shape[1]
        cross_mask = None
        if context_key_mask is not None:
            cross_mask = padding_attention_mask(context_key_mask, tq)
        x = query_sequence
        for layer in self.layers:
            x = layer(x, context, cross_mask)
        x = self.norm_out(x)
        return x.squeeze(0) if squeeze else x


def _check_bounds(lower, upper):
    lower = torch.as_tensor(lower, dtype=DTYPE)
    upper = torch.as_tensor(upper, dtype=DTYPE)
    if lower.shape != upper.shape:
        raise ShapeError("bounds must have matching shapes")
    if not (torch.isfinite(lower).all() and torch.isfinite(upper).all()):
        raise InvalidDomainError("bounds must be finite")
    if not (lower < upper).all():
        raise InvalidDomainError("each dimension needs lower < upper")
    return lower, upper


def _log1m_tanh_sq(u):
    # log(1 - tanh(u)^2) = 2*(log 2 - u - softplus(-2u)), stable for large |u|
    return 2.0 * (math.log(2.0) - u - torch.nn.functional.softplus(-2.0 * u))


class TanhGaussianHead(nn.Module):
    """Stochastic policy head: Gaussian -> tanh -> affine map into a box.

    ``sample`` is reparameterized; log-densities include the tanh and affine
    change-of-variable corrections, so exp(log_density) is a proper density
    over the box. log-std is clamped to [-5, 2] to keep densities bounded.
    """

    def __init__(self, latent_dim: int, action_dim: int, seed: int = 0,
                 hidden_dims=(128, 128)):
        super().__init__()
        gen = seeded_generator(seed)
        self.action_dim = action_dim
        self.trunk = MLP((latent_dim,) + tuple(hidden_dims), gen)
        self.mean_head = make_linear(hidden_dims[-1], action_dim, gen)
        self.log_std_head = make_linear(hidden_dims[-1], action_dim, gen)

    def _mean_log_std(self, latent):
        h = torch.nn.functional.gelu(self.trunk(latent))
        mean = self.mean_head(h)
        log_std = self.log_std_head(h).clamp(LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std

    def sample(self, latent, lower, upper, generator, num_samples=None):
        """Draw actions inside the box; returns (actions, log_density)."""
        lower, upper = _check_bounds(lower, upper)
        mean, log_std = self._mean_log_std(latent)
        if num_samples is not None:
            mean = mean.expand(num_samples, -1)
            log_std = log_std.expand(num_samples, -1)
        std = log_std.exp()
        eps = torch.randn(mean.shape, dtype=DTYPE, generator=generator)
        u = mean + std * eps
        return self._squash(u, mean, log_std, lower, upper)

    def mean_action(self, latent, lower, upper):
        """Deterministic action at the pre-tanh mean (greedy readout)."""
        lower, upper = _check_bounds(lower, upper)
        mean, _ = self._mean_log_std(latent)
        t = torch.tanh(mean)
        return lower + (t + 1.0) * 0.5 * (upper - lower)

    def log_prob(self, latent, action, lower, upper):
        """Log-density of an arbitrary in-box action under the current head."""
        lower, upper = _check_bounds(lower, upper)
        mean, log_std = self._mean_log_std(latent)
        action = torch.as_tensor(action, dtype=DTYPE)
        t = (2.0 * (action - lower) / (upper - lower) - 1.0).clamp(-1 + 1e-15, 1 - 1e-15)
        u = torch.atanh(t)
        return self._log_density(u, mean, log_std, lower, upper)

    def _squash(self, u, mean, log_std, lower, upper):
        t = torch.tanh(u)
        log_p = self._log_density(u, mean, log_std, lower, upper)
        t = t.clamp(-1 + 1e-12, 1 - 1e-12)  # keep actions strictly interior
        action = lower + (t + 1.0) * 0.5 * (upper - lower)
        return action, log_p

    def _log_density(self, u, mean, log_std, lower, upper):
        std = log_std.exp()
        normal = -0.5 * ((u - mean) / std) ** 2 - log_std - 0.5 * math.log(2 * math.pi)
        correction = _log1m_tanh_sq(u) + torch.log((upper - lower) * 0.5)
        return (normal - correction).sum(dim=-1)
