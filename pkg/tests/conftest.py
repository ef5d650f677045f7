import numpy as np
import pytest

from rangeseg.scan_io import RawScan, builtin_config


def synthetic_scan(rng, n, cfg=None, r_range=(2.0, 60.0), margin_deg=0.5):
    """Random returns spread uniformly over the sensor field of view."""
    cfg = cfg or builtin_config("semantickitti")
    az = rng.uniform(-np.pi, np.pi, n)
    lo, hi = cfg.fov_down + np.radians(margin_deg), cfg.fov_up - np.radians(margin_deg)
    el = rng.uniform(lo, hi, n)
    r = rng.uniform(*r_range, n)
    pts = np.stack(
        [r * np.cos(el) * np.cos(az), r * np.cos(el) * np.sin(az), r * np.sin(el), rng.uniform(0, 1, n)],
        axis=1,
    )
    return RawScan(pts.astype(np.float32))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def kitti():
    return builtin_config("semantickitti")
