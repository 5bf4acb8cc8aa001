import dataclasses
import math

import numpy as np
import pytest

from papsmix import phantom
from papsmix.stainlib import ms_unmix


@pytest.fixture(scope="session")
def default_truth():
    """Default 64x64 / 30 dB phantom shared across tests."""
    return phantom.generate(phantom.PhantomSpec())


@pytest.fixture(scope="session")
def default_gt(default_truth):
    return ms_unmix(default_truth.ms_od, default_truth.ms_matrix)


@pytest.fixture(scope="session")
def clean_truth():
    """Noise-free variant of the default phantom."""
    spec = dataclasses.replace(phantom.PhantomSpec(), noise_snr_db=math.inf)
    return phantom.generate(spec)


@pytest.fixture(scope="session")
def small_truth():
    """Tiny phantom for solver-level tests."""
    spec = phantom.PhantomSpec(
        width=32, height=32, n_cells=2,
        nucleus_radius_px=(2.5, 3.5), cytoplasm_radius_px=(6.0, 8.0),
    )
    return phantom.generate(spec)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
