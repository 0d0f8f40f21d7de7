from __future__ import annotations

import math

import numpy as np
import pytest

from app.geometry import Disk2d, Hemisphere, Sphere
from app.solver import oracle_distance
from tests.convergence_common import error_sweep, spherical


pytestmark = [pytest.mark.convergence]


def test_sphere_single_source_is_first_order():
    _, _, order = error_sweep(Sphere(), [spherical(math.pi / 4, math.pi / 3)], [0.1, 0.05, 0.025])
    assert 0.8 <= order <= 1.3


def test_sphere_five_sources_is_first_order_with_kinks():
    sources = [spherical(0.0, 0.0)] + [
        spherical(sa * math.pi / 3, sc * math.pi / 3) for sa in (1, -1) for sc in (1, -1)
    ]
    _, fields, order = error_sweep(Sphere(), sources, [0.1, 0.05, 0.025])
    assert 0.8 <= order <= 1.3

    # Points equidistant from the pole and a neighbouring source sit on a ridge of the field.
    finest = fields[-1]
    points, values = finest.surface_samples
    d = np.stack([Sphere().exact_geodesic(x0, points) for x0 in finest.sources.points])
    ordered = np.sort(d, axis=0)
    ridge = (ordered[1] - ordered[0]) < finest.band.dx
    assert ridge.any()
    exact = oracle_distance(Sphere(), finest.sources, points[ridge])
    assert np.max(np.abs(values[ridge] - exact)) < 0.1


def test_unit_disk_is_first_order():
    _, _, order = error_sweep(Disk2d(), [[-1 / math.pi, -1 / math.e]], [0.04, 0.02, 0.01])
    assert 0.8 <= order <= 1.3


def test_hemisphere_error_decreases_under_refinement():
    errors, _, _ = error_sweep(Hemisphere(), [spherical(5 * math.pi / 3, 3 * math.pi / 10)], [0.1, 0.05, 0.025])
    assert errors[0] > errors[1] > errors[2]
