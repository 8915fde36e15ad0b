import numpy as np
import pytest

from smalldiff.models import ModelSpec
from smalldiff.paths import ObservationSet


def _linear_drift(x, a):
    return a[0] * np.asarray(x, dtype=float)


def _linear_drift_jac(x, a):
    x = np.asarray(x, dtype=float)
    return np.full(x.shape[:-1] + (1, 1), a[0])


def _ou_drift(x, a):
    return -a[0] * np.asarray(x, dtype=float)


def _ou_drift_jac(x, a):
    x = np.asarray(x, dtype=float)
    return np.full(x.shape[:-1] + (1, 1), -a[0])


def _scalar_diffusion(x, b):
    x = np.asarray(x, dtype=float)
    return np.full(x.shape[:-1] + (1, 1), b[0])


@pytest.fixture
def linear_model():
    """d=1 growth model dX = a X dt + b dW; iterated drift fields are
    a^(j+1) x in closed form."""
    return ModelSpec(name="linear", d=1, r=1, p=1, q=1,
                     drift=_linear_drift, diffusion=_scalar_diffusion,
                     drift_jacobian_x=_linear_drift_jac,
                     x0=(1.0,), T=1.0,
                     box_alpha=[(0.05, 5.0)], box_beta=[(0.05, 5.0)])


@pytest.fixture
def ou_model():
    """Scalar mean-reverting model dX = -a X dt + b dW."""
    return ModelSpec(name="ou", d=1, r=1, p=1, q=1,
                     drift=_ou_drift, diffusion=_scalar_diffusion,
                     drift_jacobian_x=_ou_drift_jac,
                     x0=(1.0,), T=1.0,
                     box_alpha=[(0.05, 5.0)], box_beta=[(0.05, 5.0)])


def euler_path_obs(model, alpha, n, eps, T=None):
    """Observations generated by the exact order-1 (Euler) recursion at the
    observation resolution, so first-order residuals vanish at alpha."""
    T = model.T if T is None else T
    h = T / n
    alpha = np.asarray(alpha, dtype=float)
    values = np.empty((n + 1, model.d))
    x = model.x0.copy()
    values[0] = x
    for k in range(n):
        x = x + h * np.asarray(model.drift(x, alpha), dtype=float)
        values[k + 1] = x
    return ObservationSet(times=np.linspace(0.0, T, n + 1), values=values,
                          epsilon=eps, T=T)
