import numpy as np
import pytest
import torch

from mcurl.env import EnvConfig
from mcurl.replay import ReplayBuffer


def central_difference(fn, params, eps=1e-6):
    """Finite-difference gradient of scalar ``fn()`` w.r.t. every element of ``params``."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = fn().item()
                flat[i] = orig - eps
                down = fn().item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * eps)
            grads.append(g)
    return grads


def autograd_grads(fn, params):
    loss = fn()
    return torch.autograd.grad(loss, params, allow_unused=True)


def relative_error(a, b):
    a = torch.cat([x.reshape(-1) for x in a])
    b = torch.cat([x.reshape(-1) for x in b])
    return ((a - b).norm() / max(a.norm().item(), b.norm().item(), 1e-12)).item()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


@pytest.fixture
def small_env_config():
    return EnvConfig(frame_size=(16, 16), crop_out=(16, 16), episode_limit=40)


def filled_buffer(n, dones=(), obs_shape=(1, 4, 4), capacity=None, action_dim=2):
    """Buffer whose i-th entry has every pixel equal to (i % 256) / 255."""
    buf = ReplayBuffer(capacity or n, obs_shape, action_dim)
    for i in range(n):
        obs = np.full(obs_shape, (i % 256) / 255.0, dtype=np.float32)
        buf.add(obs, np.zeros(action_dim), float(i), obs, i in dones)
    return buf


def pytest_terminal_summary(terminalreporter):
    from tests import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[number])
