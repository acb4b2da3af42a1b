"""Central finite differences, independent of autograd, for gradient checks."""

import torch


def numerical_grad(f, x, eps=1e-6):
    """d f(x) / d x by central differences; ``f`` maps a float64 tensor to a scalar."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat_x = x.view(-1)
    flat_g = grad.view(-1)
    with torch.no_grad():
        for i in range(flat_x.numel()):
            orig = flat_x[i].item()
            flat_x[i] = orig + eps
            up = float(f(x))
            flat_x[i] = orig - eps
            down = float(f(x))
            flat_x[i] = orig
            flat_g[i] = (up - down) / (2 * eps)
    return grad


def relative_error(a, b, floor=1e-3):
    """Norm-wise ``|a - b| / max(|a|, |b|, floor)``.

    The floor keeps gradients that are identically zero in exact arithmetic
    (e.g. a key-projection bias, which shifts every score equally) from
    turning ~1e-10 finite-difference noise into a relative error of 1.
    """
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    denom = max(a.norm().item(), b.norm().item(), floor)
    return (a - b).norm().item() / denom


def check_gradient(f, x, eps=1e-6):
    """Relative error between the autograd gradient of ``f`` at ``x`` and finite differences."""
    xa = x.detach().clone().requires_grad_(True)
    out = f(xa)
    (analytic,) = torch.autograd.grad(out, xa)
    return relative_error(analytic, numerical_grad(f, x, eps))


def check_parameter_gradients(f, module, eps=1e-6):
    """Worst relative error over every parameter of ``module`` for scalar ``f()``."""
    module.zero_grad()
    f().backward()
    worst = 0.0
    for name, p in module.named_parameters():
        if p.grad is None:
            continue
        analytic = p.grad.detach().clone()
        saved = p.detach().clone()

        def g(value, p=p):
            with torch.no_grad():
                p.copy_(value)
            return f()

        numeric = numerical_grad(g, saved, eps)
        with torch.no_grad():
            p.copy_(saved)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
