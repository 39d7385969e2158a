import numpy as np
import pytest

from iuqlab.models import DesignPoint, ExperimentRecord, QoIVector


def records_from(values, noise_var, designs=None):
    """Scalar-QoI records from a (n_records, n_qoi) array."""
    values = np.atleast_2d(values)
    out = []
    for k, row in enumerate(values):
        x = designs[k] if designs is not None else [float(k)]
        out.append(ExperimentRecord(DesignPoint(x, name=f"d{k}"), QoIVector(row),
                                    np.broadcast_to(noise_var, row.shape).copy(), label=f"d{k}"))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
