"""Meta-learning Bayesian optimization: a transformer-conditioned deep kernel
GP surrogate trained with a split-pivot predictive loss, driving a soft
actor-critic acquisition agent with importance-sampled Boltzmann selection."""

__version__ = "0.1.0"
