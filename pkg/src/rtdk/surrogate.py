"""Context-conditioned deep kernel surrogate.

The embedding network is a transformer encoder-decoder: observed (x, y)
pairs are encoded as an order-free context, query points are decoded under a
diagonal self-attention mask (queries never see each other), and the decoder
output feeds the normalized combination kernel together with a learned
pointwise variance u(x). Feedforward and identity ("none") embedding
variants cover the ablations; with the identity variant and u = 0 the model
is exactly the classical GP.
"""

from __future__ import annotations

import torch
from torch import nn as torch_nn

from . import checkpoint, instrumentation
from .env import Trajectory
from .errors import (
    CheckpointError,
    ConfigError,
    EmptyInputError,
    RequiresContextError,
    TooShortError,
    TrainingDivergenceError,
)
from .gp import (
    DEFAULT_JITTER,
    GaussianPosterior,
    KernelParameters,
    MeanParameters,
    ObservationSet,
    as_tensor,
    classical_posterior,
    destandardize,
    gp_posterior,
    gp_posterior_batched,
    log_predictive_density,
    standardize_masked,
)
from .nn import DTYPE, MLP, TransformerConfig, TransformerDecoder, TransformerEncoder, \
    make_linear, seeded_generator

SURROGATE_VARIANTS = ("transformer", "feedforward", "none")


class TdklSurrogate(torch_nn.Module):
    """Deep kernel GP over learned embeddings with a trainable linear mean.

    variant:
      transformer - conditional embedding g(x | x_obs, y_obs)
      feedforward - pointwise 3-layer embedding, no context
      none        - identity embedding, u = 0 (classical GP)
    """

    def __init__(self, input_dim: int, variant: str = "transformer",
                 config: TransformerConfig | None = None,
                 kernel_components: int = 5, seed: int = 0,
                 jitter: float = DEFAULT_JITTER):
        super().__init__()
        if variant not in SURROGATE_VARIANTS:
            raise ConfigError(f"unknown surrogate variant {variant!r}")
        if input_dim < 1 or kernel_components < 1:
            raise ConfigError("input_dim and kernel_components must be >= 1")
        self.variant = variant
        self.input_dim = input_dim
        self.config = config or TransformerConfig()
        self.kernel_components = kernel_components
        self.seed = seed
        self.jitter = jitter

        self.log_alpha = torch_nn.Parameter(torch.zeros(kernel_components, dtype=DTYPE))
        embed_dim = input_dim if variant == "none" else self.config.model_dim
        self.mean_weight = torch_nn.Parameter(torch.zeros(embed_dim, dtype=DTYPE))

        if variant != "none":
            gen = seeded_generator(seed * 7919 + 11)
            self.u_net = MLP((input_dim, 32, 32, 1), gen)
        if variant == "transformer":
            gen = seeded_generator(seed * 7919 + 13)
            self.pair_proj = make_linear(input_dim + 1, self.config.model_dim, gen)
            self.query_proj = make_linear(input_dim, self.config.model_dim, gen)
            self.encoder = TransformerEncoder(self.config, seed=seed * 7919 + 17)
            self.decoder = TransformerDecoder(self.config, seed=seed * 7919 + 19)
        elif variant == "feedforward":
            gen = seeded_generator(seed * 7919 + 23)
            dim = self.config.model_dim
            self.embed_net = MLP((input_dim, dim, dim, dim), gen)
            self.embed_norm = torch_nn.LayerNorm(dim, dtype=DTYPE)

    # -- parameter views ---------------------------------------------------

    def kernel_params(self) -> KernelParameters:
        return KernelParameters(self.log_alpha)

    def mean_params(self) -> MeanParameters:
        return MeanParameters(self.mean_weight)

    # -- embeddings ----------------------------------------------------------

    def point_variance(self, X) -> torch.Tensor:
        """Log-amplitude u(x) per point; identically zero for variant none."""
        X = as_tensor(X)
        if self.variant == "none":
            return torch.zeros(X.shape[:-1], dtype=DTYPE)
        return self.u_net(X).squeeze(-1)

    def _check_query(self, query_X) -> torch.Tensor:
        query_X = as_tensor(query_X)
        if query_X.dim() == 1:
            query_X = query_X.unsqueeze(0)
        if query_X.shape[0] == 0:
            raise EmptyInputError("query set is empty")
        if query_X.shape[-1] != self.input_dim:
            raise ConfigError(f"query dimension {query_X.shape[-1]} != {self.input_dim}")
        return query_X

    def embed_context(self, query_X, obs: ObservationSet):
        """Embed queries and observed locations given the observation set.

        Both go through the decoder in a single pass (the diagonal mask keeps
        every row independent), so z_query matches what the observed points
        would produce as queries. Returns (z_query, z_obs).
        """
        query_X = self._check_query(query_X)
        if len(obs) == 0:
            raise RequiresContextError("conditional embedding needs observations")
        instrumentation.count("surrogate.embed_context")
        if self.variant == "none":
            return query_X, as_tensor(obs.X)
        obs_X = as_tensor(obs.X)
        if self.variant == "feedforward":
            return (self.embed_norm(self.embed_net(query_X)),
                    self.embed_norm(self.embed_net(obs_X)))
        y_std = as_tensor(obs.standardized_y())
        tokens = self.pair_proj(torch.cat([obs_X, y_std.unsqueeze(-1)], dim=-1))
        latents = self.encoder(tokens)
        queries = self.query_proj(torch.cat([query_X, obs_X], dim=0))
        decoded = self.decoder(queries, latents)
        return decoded[: query_X.shape[0]], decoded[query_X.shape[0]:]

    # -- prediction ----------------------------------------------------------

    def predict(self, query_X, obs: ObservationSet,
                full_cov: bool = False) -> GaussianPosterior:
        """Raw-scale predictive posterior at the query points.

        With no observations this is the prior: zero mean (W x for the
        identity variant) and variance exp(2 u(x)) + jitter.
        """
        instrumentation.count("surrogate.predict")
        query_X = self._check_query(query_X)
        if self.variant == "none":
            return classical_posterior(query_X, obs, self.kernel_params(),
                                       self.mean_params(), self.jitter, full_cov)
        if len(obs) == 0:
            u_q = self.point_variance(query_X)
            return GaussianPosterior(
                mean=torch.zeros(query_X.shape[0], dtype=DTYPE),
                variance=torch.exp(2.0 * u_q) + self.jitter)
        z_query, z_obs = self.embed_context(query_X, obs)
        u_query = self.point_variance(query_X)
        u_obs = self.point_variance(as_tensor(obs.X))
        post = gp_posterior(z_query, u_query, z_obs, u_obs,
                            as_tensor(obs.standardized_y()),
                            kernel=self.kernel_params(), mean=self.mean_params(),
                            jitter=self.jitter, full_cov=full_cov)
        return destandardize(post, obs.y_mean, obs.y_scale)

    # -- batched path for the acquisition agent ------------------------------

    def conditional_embed_batched(self, query_X, ctx_X, ctx_y_std, ctx_mask):
        """(B, m, d) queries embedded against padded (B, n, d) contexts."""
        if self.variant == "none":
            return query_X
        if self.variant == "feedforward":
            return self.embed_norm(self.embed_net(query_X))
        tokens = self.pair_proj(torch.cat([ctx_X, ctx_y_std.unsqueeze(-1)], dim=-1))
        latents = self.encoder(tokens, key_mask=ctx_mask)
        return self.decoder(self.query_proj(query_X), latents,
                            context_key_mask=ctx_mask)

    def action_features(self, actions, ctx_X, ctx_y, ctx_mask):
        """Surrogate features for candidate actions against padded contexts.

        Returns (embedding, mean, variance) with mean/variance on each
        context's standardized y scale; shapes (B, m, dim), (B, m), (B, m).
        """
        instrumentation.count("surrogate.action_features")
        actions, ctx_X = as_tensor(actions), as_tensor(ctx_X)
        ctx_y, ctx_mask = as_tensor(ctx_y), torch.as_tensor(ctx_mask)
        y_std = standardize_masked(ctx_y, ctx_mask)

        n_query = actions.shape[1]
        all_queries = torch.cat([actions, ctx_X], dim=1)
        z_all = self.conditional_embed_batched(all_queries, ctx_X, y_std, ctx_mask)
        z_query, z_ctx = z_all[:, :n_query], z_all[:, n_query:]
        u_all = self.point_variance(all_queries)
        u_query, u_ctx = u_all[:, :n_query], u_all[:, n_query:]
        mean, var = gp_posterior_batched(z_query, u_query, z_ctx, u_ctx, y_std,
                                         ctx_mask, kernel=self.kernel_params(),
                                         mean=self.mean_params(), jitter=self.jitter)
        return z_query, mean, var

    # -- training ------------------------------------------------------------

    def split_pivot_loss(self, traj: Trajectory, rng) -> torch.Tensor:
        """Negative log predictive density of a random query split given the
        complementary observation split, after shuffling the trajectory."""
        t = len(traj)
        if t < 2:
            raise TooShortError("split-pivot loss needs a trajectory of length >= 2")
        perm = rng.permutation(t)
        pivot = int(rng.integers(1, t))
        xs, ys = traj.xs()[perm], traj.ys()[perm]
        obs = ObservationSet.from_data(xs[:pivot], ys[:pivot])
        posterior = self.predict(xs[pivot:], obs)
        return -log_predictive_density(posterior, ys[pivot:])

    # -- checkpointing ---------------------------------------------------------

    def save(self, path) -> None:
        tensors = {name: value.detach().numpy()
                   for name, value in self.state_dict().items()}
        meta = {
            "kind": "surrogate",
            "variant": self.variant,
            "input_dim": self.input_dim,
            "kernel_components": self.kernel_components,
            "seed": self.seed,
            "jitter": self.jitter,
            "config": {
                "model_dim": self.config.model_dim,
                "num_heads": self.config.num_heads,
                "num_encoder_layers": self.config.num_encoder_layers,
                "num_decoder_layers": self.config.num_decoder_layers,
                "feedforward_dim": self.config.feedforward_dim,
            },
        }
        checkpoint.save_tensors(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "TdklSurrogate":
        tensors, meta = checkpoint.load_tensors(path)
        if meta.get("kind") != "surrogate":
            raise CheckpointError(f"{path}: not a surrogate checkpoint")
        model = cls(input_dim=meta["input_dim"], variant=meta["variant"],
                    config=TransformerConfig(**meta["config"]),
                    kernel_components=meta["kernel_components"],
                    seed=meta["seed"], jitter=meta["jitter"])
        expected = {name: tuple(value.shape)
                    for name, value in model.state_dict().items()}
        checkpoint.validate_shapes(tensors, expected, path=str(path))
        model.load_state_dict({name: torch.as_tensor(arr, dtype=DTYPE)
                               for name, arr in tensors.items()})
        return model


class SurrogateTrainer:
    """Adam training loop over batches of replayed trajectories."""

    def __init__(self, model: TdklSurrogate, lr: float = 3e-4,
                 grad_clip: float = 10.0):
        self.model = model
        self.grad_clip = grad_clip
        self.optimizer = torch.optim.Adam(model.parameters(), lr=lr)

    def train_step(self, trajectories, rng) -> float:
        """One gradient step on the batch-mean split-pivot loss.

        A non-finite loss rejects the step, leaving parameters untouched.
        """
        losses = [self.model.split_pivot_loss(traj, rng) for traj in trajectories]
        loss = torch.stack(losses).mean()
        if not torch.isfinite(loss):
            self.optimizer.zero_grad(set_to_none=True)
            raise TrainingDivergenceError(f"non-finite surrogate loss {loss.item()}")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if self.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.grad_clip)
        self.optimizer.step()
        return float(loss.detach())
