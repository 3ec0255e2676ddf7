import numpy as np
import pytest

from tss.sampler import SamplingWeights
from tss.windows import build_layout


def frozen_pair_weights(layout, F=(0.0, 0.0), pi=(0.5, 0.5), batch=1):
    """Frozen weights for a two-rung coincident layout (both windows alike)."""
    log_pi = [np.log(np.asarray(pi, dtype=float))[None, :] for _ in range(layout.count)]
    F_list = [np.asarray(F, dtype=float)[None, :] for _ in range(layout.count)]
    return SamplingWeights(
        log_pi=log_pi,
        F=F_list,
        defined=np.ones((batch, layout.count), dtype=bool),
    )


def frozen_weights_from_global(layout, F_global, pi_global=None, batch=1):
    """Frozen per-window weights obtained by conditioning global vectors."""
    log_pi, F_list = [], []
    for members in layout.members:
        F_list.append(np.asarray(F_global, dtype=float)[members][None, :])
        if pi_global is None:
            pi = np.full(members.size, 1.0 / members.size)
        else:
            pi = np.asarray(pi_global, dtype=float)[members]
            pi = pi / pi.sum()
        log_pi.append(np.log(pi)[None, :])
    return SamplingWeights(
        log_pi=log_pi,
        F=F_list,
        defined=np.ones((batch, layout.count), dtype=bool),
    )


@pytest.fixture
def pair_layout():
    return build_layout(2, {"mode": "full_double"})
