import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _seeded():
    torch.manual_seed(0)
    np.random.seed(0)


def randomize_parameters(module: torch.nn.Module, seed: int = 0) -> None:
    """Re-draw every conv/linear with its standard init (zero-init blocks too).

    Keeps activations at unit scale so gradient checks probe a generic,
    numerically sane point instead of the residual-identity start.
    """
    torch.manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (torch.nn.Conv2d, torch.nn.Linear)):
            m.reset_parameters()


def fd_gradcheck(loss_fn, module: torch.nn.Module, step: float = 1e-4,
                 rel_tol: float = 1e-3, dense_limit: int = 256, seed: int = 0):
    """Compare autograd gradients against central finite differences.

    ``loss_fn()`` must evaluate the module to a scalar.  Small tensors are
    checked element by element; large ones along one random direction.
    Everything runs in the module's current dtype (use .double()).
    """
    params = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    assert params, "module has no parameters"
    for p in module.parameters():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for name, p in params:
        grad = p.grad if p.grad is not None else torch.zeros_like(p)
        if p.numel() <= dense_limit:
            flat = p.detach().reshape(-1)
            fd = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                with torch.no_grad():
                    flat[i] = orig + step
                    up = loss_fn().item()
                    flat[i] = orig - step
                    down = loss_fn().item()
                    flat[i] = orig
                fd[i] = (up - down) / (2 * step)
            analytic = grad.reshape(-1)
        else:
            direction = torch.randn(p.shape, generator=gen, dtype=p.dtype)
            direction /= direction.norm()
            with torch.no_grad():
                p.add_(step * direction)
                up = loss_fn().item()
                p.sub_(2 * step * direction)
                down = loss_fn().item()
                p.add_(step * direction)
            fd = torch.tensor([(up - down) / (2 * step)], dtype=p.dtype)
            analytic = torch.tensor([(grad * direction).sum().item()], dtype=p.dtype)
        err = (fd - analytic).abs()
        denom = torch.maximum(fd.abs(), analytic.abs()).clamp(min=1e-8)
        rel = (err / denom).max().item()
        worst = max(worst, rel)
        assert rel <= rel_tol, f"gradient mismatch on {name}: rel err {rel:.2e}"
    return worst


def weighted_sum_loss(output: torch.Tensor, seed: int = 7) -> torch.Tensor:
    """Smooth scalar readout of an output tensor with fixed random weights."""
    gen = torch.Generator().manual_seed(seed)
    w = torch.randn(output.shape, generator=gen, dtype=output.dtype)
    return (output * w).sum()
