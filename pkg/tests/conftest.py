import numpy as np
import pytest

from seizfit.data import generate_synthetic, seiz_state
from seizfit.models import REFERENCE_SEIZ

# S0 = 27,962 * k with k = 1, the size of the tweet collection
REFERENCE_INIT = (27962.0, 0.0, 1.0, 0.0)
REFERENCE_THETA = np.array([4.3713, 8.1967, 1.3833e-06, 0.7905, 0.8161, 0.0373, *REFERENCE_INIT])
# +/-20% on every entry, I0 left at its observed value
PERTURBATION = np.array([1, -1, 1, -1, 1, -1, 1, -1, 0, 1]) * 0.2


@pytest.fixture(scope="session")
def reference_series():
    return generate_synthetic(REFERENCE_SEIZ, seiz_state(*REFERENCE_INIT), 200)


@pytest.fixture(scope="session")
def perturbed_theta():
    return REFERENCE_THETA * (1 + PERTURBATION)
