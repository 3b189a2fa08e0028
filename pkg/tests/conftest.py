import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from helixct.geometry import ScannerGeometry


@pytest.fixture
def geom():
    """Small but realistic helical geometry used across unit tests."""
    return ScannerGeometry(
        focal_length_mm=300.0,
        detector_rows=6,
        detector_cols=97,
        channel_angle_step_rad=0.005,
        row_spacing_iso_mm=1.5,
        views_per_rotation=128,
        table_feed_mm=7.2,
        slice_thickness_mm=3.0,
        z_start_mm=0.0,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
