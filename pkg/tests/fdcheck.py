"""Central finite-difference gradient probes used across the test suite."""

import torch


def fd_grad(fn, x, entry, h=1e-6):
    """Central difference of scalar fn at one entry of tensor x."""
    xp = x.clone()
    xm = x.clone()
    xp[entry] += h
    xm[entry] -= h
    return (float(fn(xp)) - float(fn(xm))) / (2.0 * h)


def assert_grad_matches(fn, x, n_probes=6, rel_tol=1e-3, h=1e-6, seed=0, min_mag=1e-8):
    """Autograd gradient of scalar fn(x) vs central differences at random entries.

    Probes whose analytic and numeric values are both below ``min_mag`` are
    accepted as matching zeros.
    """
    x = x.detach().clone().requires_grad_(True)
    out = fn(x)
    (grad,) = torch.autograd.grad(out, x)
    g = torch.Generator().manual_seed(seed)
    flat = grad.reshape(-1)
    idx = torch.randperm(flat.numel(), generator=g)[:n_probes]
    for i in idx:
        entry = torch.unravel_index(i, x.shape)
        analytic = float(flat[i])
        numeric = fd_grad(fn, x.detach(), entry, h=h)
        if abs(analytic) < min_mag and abs(numeric) < min_mag:
            continue
        denom = max(abs(analytic), abs(numeric))
        assert abs(analytic - numeric) / denom < rel_tol, (
            f"gradient mismatch at {tuple(int(e) for e in entry)}: "
            f"autograd {analytic:.3e} vs finite difference {numeric:.3e}"
        )
