import numpy as np
import pytest
import torch

from rtdk.nn import TransformerConfig

torch.set_num_threads(1)


@pytest.fixture
def tiny_config():
    return TransformerConfig(model_dim=8, num_heads=2, num_encoder_layers=1,
                             num_decoder_layers=1, feedforward_dim=16)


@pytest.fixture
def small_config():
    return TransformerConfig(model_dim=16, num_heads=2, feedforward_dim=32)


def finite_difference_check(loss_fn, module, step=1e-4, rtol=1e-3, atol=1e-6,
                            max_entries_per_tensor=None, rng=None):
    """Compare autograd gradients of loss_fn() against central differences
    for every parameter of `module` (optionally a sampled subset per tensor).

    loss_fn must rebuild the forward pass from the module's current
    parameters on every call.
    """
    params = [(name, p) for name, p in module.named_parameters()
              if p.requires_grad]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
    worst = 0.0
    for (name, param), grad in zip(params, grads):
        grad = torch.zeros_like(param) if grad is None else grad
        flat = param.detach().reshape(-1)
        indices = range(flat.numel())
        if max_entries_per_tensor is not None and flat.numel() > max_entries_per_tensor:
            rng = rng or np.random.default_rng(0)
            indices = rng.choice(flat.numel(), size=max_entries_per_tensor,
                                 replace=False)
        for idx in indices:
            original = float(flat[idx])
            with torch.no_grad():
                flat[idx] = original + step
            up = float(loss_fn().detach())
            with torch.no_grad():
                flat[idx] = original - step
            down = float(loss_fn().detach())
            with torch.no_grad():
                flat[idx] = original
            fd = (up - down) / (2 * step)
            an = float(grad.reshape(-1)[idx])
            err = abs(an - fd)
            tol = atol + rtol * max(abs(an), abs(fd))
            assert err <= tol, (f"{name}[{idx}]: autograd {an:.6e} vs fd {fd:.6e} "
                                f"(err {err:.2e} > tol {tol:.2e})")
            worst = max(worst, err / max(abs(an), abs(fd), 1e-12))
    return worst
