import logging

import numpy as np
import pytest

import active_tactile  # noqa: F401  enables float64
from active_tactile.generative_model import linear_stub_model

from oracles import augmented_matrices


class LinearSystem:
    """A small stable linear-Gaussian augmented system with matching stub model."""

    def __init__(self, seed=0, n=3, d=2, eps=1e-3, q=0.1, r=0.2):
        rng = np.random.default_rng(seed)
        A = rng.normal(size=(n, n))
        A *= 0.9 / max(abs(np.linalg.eigvals(A)))
        self.A, self.b_m = A, rng.normal(size=n) * 0.5
        self.B = rng.normal(size=(n, 2)) * 0.3
        self.C = rng.normal(size=(d, n))
        self.q, self.r, self.eps = q, r, eps
        self.n, self.d = n, d
        self.model = linear_stub_model(A, self.C, q, r, B=self.B, b_m=self.b_m, eps=eps)
        self.F, self.G, self.H, self.Q, self.R = augmented_matrices(A, self.b_m, self.B, self.C, q, r, eps)


@pytest.fixture
def linear_system():
    return LinearSystem()


@pytest.fixture(autouse=True)
def _quiet_logs():
    logging.getLogger("jax").setLevel(logging.WARNING)
