"""Central finite-difference gradient checking against autograd."""

import torch


def central_difference_grad(fn, tensor: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Numerical gradient of scalar fn() w.r.t. every element of tensor."""
    grad = torch.zeros_like(tensor)
    flat = tensor.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            f_plus = float(fn())
            flat[i] = orig - h
            f_minus = float(fn())
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def max_relative_error(analytic: torch.Tensor, numeric: torch.Tensor,
                       floor: float = 1e-6) -> float:
    denom = (analytic.abs() + numeric.abs()).clamp_min(floor)
    return float(((analytic - numeric).abs() / denom).max())


def check_parameter_grads(loss_fn, params: dict, h: float = 1e-5,
                          tol: float = 1e-3) -> dict:
    """Compare autograd gradients of loss_fn() with central differences for
    every named tensor in params (all float64). Returns name -> max rel err;
    asserts every one is within tol."""
    for p in params.values():
        assert p.dtype == torch.float64, "gradient checks run at 64-bit"
        p.grad = None
    loss = loss_fn()
    loss.backward()
    errors = {}
    for name, p in params.items():
        analytic = p.grad.detach().clone() if p.grad is not None \
            else torch.zeros_like(p)
        numeric = central_difference_grad(loss_fn, p.data, h=h)
        err = max_relative_error(analytic, numeric)
        errors[name] = err
        assert err <= tol, f"{name}: max relative error {err:.3e} > {tol}"
    return errors
