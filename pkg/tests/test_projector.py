"""Forward projector, exact adjoint, and operator norm estimation.

The reference oracle below re-derives the 2D interpolating line integral
directly from the ray description (march along the dominant axis, linear
interpolation across the other, out-of-grid taps dropped) so the projector
is checked against independent arithmetic, not against itself.
"""

import numpy as np
import pytest

from tomoflow import (
    ShapeMismatchError,
    Sinogram,
    Volume,
    VolumeGrid,
    back_project,
    bind,
    dense_matrix,
    forward_project,
    make_cone_geometry,
    make_fan_geometry,
    op_norm_estimate,
    ray_for,
)


def reference_integral_2d(values, grid, origin, direction):
    """Line integral of a 2D volume along one ray, re-derived from scratch."""
    axis = int(np.argmax(np.abs(direction)))
    other = 1 - axis
    total = 0.0
    other_c0 = grid.origin[other] - (grid.shape[other] - 1) / 2.0 * grid.voxel_size
    for i, c in enumerate(grid.axis_centers(axis)):
        t = (c - origin[axis]) / direction[axis]
        pos = origin[other] + t * direction[other]
        f = (pos - other_c0) / grid.voxel_size
        j = int(np.floor(f))
        w_hi = f - j
        sample = 0.0
        if 0 <= j < grid.shape[other]:
            vox = (i, j) if axis == 0 else (j, i)
            sample += (1.0 - w_hi) * values[vox]
        if 0 <= j + 1 < grid.shape[other]:
            vox = (i, j + 1) if axis == 0 else (j + 1, i)
            sample += w_hi * values[vox]
        total += sample
    return total * grid.voxel_size / abs(direction[axis])


def disk_volume(grid, radius, value):
    xs = grid.axis_centers(0)[:, None]
    ys = grid.axis_centers(1)[None, :]
    return Volume(grid, np.where(xs**2 + ys**2 <= radius**2, value, 0.0))


def test_zero_volume_projects_to_zero():
    grid = VolumeGrid((16, 16), 1.0)
    geom = make_fan_geometry(8, 11, 100.0, 50.0)
    p = forward_project(Volume.zeros(grid), geom)
    assert np.all(p.values == 0.0)


def test_single_pixel_chord_length():
    # axis-aligned central ray through a lone pixel: integral = value * size
    grid = VolumeGrid((1, 1), 2.0)
    geom = make_fan_geometry(1, 1, 100.0, 100.0)
    p = forward_project(Volume(grid, np.array([[3.0]])), geom)
    assert p.values[0, 0] == pytest.approx(6.0, abs=1e-12)


def test_disk_center_ray_chord():
    grid = VolumeGrid((64, 64), 1.0)
    radius, value = 12.0, 0.02
    geom = make_fan_geometry(1, 9, 200.0, 200.0, detector_pixel_size=0.5)
    p = forward_project(disk_volume(grid, radius, value), geom)
    center = p.values[0, 4]
    assert abs(center - 2.0 * radius * value) < 2.0 * grid.voxel_size * value


def test_forward_matches_reference_oracle():
    rng = np.random.default_rng(11)
    grid = VolumeGrid((7, 7), 1.0)
    values = rng.random(grid.shape)
    geom = make_fan_geometry(12, 9, 40.0, 20.0, detector_pixel_size=1.3)
    p = forward_project(Volume(grid, values), geom)
    for i in range(0, 12, 3):
        for j in range(9):
            ray = ray_for(geom, i, j)
            want = reference_integral_2d(values, grid, ray.origin, ray.direction)
            assert p.values[i, j] == pytest.approx(want, abs=1e-10)


def test_zero_sinogram_backprojects_to_zero():
    grid = VolumeGrid((8, 8), 1.0)
    geom = make_fan_geometry(4, 5, 60.0, 30.0)
    vol = back_project(Sinogram.zeros(geom), grid)
    assert np.all(vol.values == 0.0)


def test_adjoint_dot_product_2d():
    grid = VolumeGrid((32, 32), 1.0)
    geom = make_fan_geometry(16, 47, 60.0, 60.0)
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = Volume(grid, rng.standard_normal(grid.shape))
        y = rng.standard_normal((16, 47))
        ax = forward_project(x, geom)
        aty = back_project(Sinogram(geom, y), grid)
        lhs = float(ax.values.ravel() @ y.ravel())
        rhs = float(x.values.ravel() @ aty.values.ravel())
        denom = np.linalg.norm(ax.values) * np.linalg.norm(y)
        assert abs(lhs - rhs) / denom < 1e-10


def test_adjoint_dot_product_3d():
    grid = VolumeGrid((16, 16, 16), 1.0)
    geom = make_cone_geometry(10, 12, 12, 40.0, 40.0, 2.0)
    rng = np.random.default_rng(1)
    for _ in range(3):
        x = Volume(grid, rng.standard_normal(grid.shape))
        y = rng.standard_normal((10, 12, 12))
        ax = forward_project(x, geom)
        aty = back_project(Sinogram(geom, y), grid)
        lhs = float(ax.values.ravel() @ y.ravel())
        rhs = float(x.values.ravel() @ aty.values.ravel())
        denom = np.linalg.norm(ax.values) * np.linalg.norm(y)
        assert abs(lhs - rhs) / denom < 1e-10


def test_single_ray_backprojection_weights():
    # unit sinogram entry smears exactly the interpolation weights of the ray
    grid = VolumeGrid((4, 4), 1.0)
    geom = make_fan_geometry(1, 1, 100.0, 100.0)
    vol = back_project(Sinogram(geom, np.ones((1, 1))), grid)
    # central horizontal ray at y = 0 falls midway between rows 1 and 2:
    # every x column gets 0.5 in each of those rows, scaled by the step length
    expected = np.zeros((4, 4))
    expected[:, 1] = 0.5
    expected[:, 2] = 0.5
    assert np.allclose(vol.values, expected, atol=1e-12)
    # off-ray voxels are exactly zero
    assert np.all(vol.values[:, 0] == 0.0)
    assert np.all(vol.values[:, 3] == 0.0)


def test_single_ray_tilted_matches_oracle():
    grid = VolumeGrid((5, 5), 1.0)
    geom = make_fan_geometry(5, 1, 30.0, 10.0, angular_range=(0.2, 1.8))
    p = np.zeros((5, 1))
    p[2, 0] = 1.0
    vol = back_project(Sinogram(geom, p), grid)
    # adjoint column = forward row: check <A^T e_r, x> = (Ax)_r on random x
    rng = np.random.default_rng(5)
    x = rng.random(grid.shape)
    ray = ray_for(geom, 2, 0)
    want = reference_integral_2d(x, grid, ray.origin, ray.direction)
    assert float(vol.values.ravel() @ x.ravel()) == pytest.approx(want, abs=1e-10)


def test_linearity():
    grid = VolumeGrid((16, 16), 1.0)
    geom = make_fan_geometry(9, 13, 50.0, 25.0)
    rng = np.random.default_rng(2)
    x1 = Volume(grid, rng.standard_normal(grid.shape))
    x2 = Volume(grid, rng.standard_normal(grid.shape))
    a, b = 2.5, -1.25
    combo = forward_project(Volume(grid, a * x1.values + b * x2.values), geom)
    split = a * forward_project(x1, geom).values + b * forward_project(x2, geom).values
    assert np.max(np.abs(combo.values - split)) < 1e-12 * max(1.0, np.max(np.abs(split)))


def test_nonnegative_inputs_give_nonnegative_projections():
    grid = VolumeGrid((12, 12), 1.0)
    geom = make_fan_geometry(7, 9, 45.0, 20.0)
    rng = np.random.default_rng(3)
    x = Volume(grid, rng.random(grid.shape))
    assert np.all(forward_project(x, geom).values >= 0.0)
    # the kernel weights themselves are non-negative
    mat = dense_matrix(geom, grid)
    assert mat.min() >= 0.0


def test_dense_equivalence_2d():
    grid = VolumeGrid((8, 8), 1.0)
    geom = make_fan_geometry(6, 9, 30.0, 15.0)
    mat = dense_matrix(geom, grid)
    rng = np.random.default_rng(4)
    x = rng.standard_normal(grid.shape)
    y = rng.standard_normal(geom.n_rays)
    fwd = forward_project(Volume(grid, x), geom).values.ravel()
    assert np.max(np.abs(fwd - mat @ x.ravel())) < 1e-10
    adj = back_project(Sinogram(geom, y.reshape(6, 9)), grid).values.ravel()
    assert np.max(np.abs(adj - mat.T @ y)) < 1e-10


def test_dense_equivalence_3d():
    grid = VolumeGrid((4, 4, 4), 1.0)
    geom = make_cone_geometry(5, 4, 4, 20.0, 10.0, 1.5)
    mat = dense_matrix(geom, grid)
    rng = np.random.default_rng(6)
    x = rng.standard_normal(grid.shape)
    y = rng.standard_normal(geom.n_rays)
    fwd = forward_project(Volume(grid, x), geom).values.ravel()
    assert np.max(np.abs(fwd - mat @ x.ravel())) < 1e-10
    adj = back_project(
        Sinogram(geom, y.reshape(5, 4, 4)), grid
    ).values.ravel()
    assert np.max(np.abs(adj - mat.T @ y)) < 1e-10


def test_op_norm_degenerate_single_ray():
    grid = VolumeGrid((1, 1), 2.0)
    geom = make_fan_geometry(1, 1, 100.0, 100.0)
    est = op_norm_estimate(geom, grid, 10)
    assert est == pytest.approx(2.0, rel=1e-12)


def test_op_norm_monotone_in_iterations():
    grid = VolumeGrid((8, 8), 1.0)
    geom = make_fan_geometry(8, 11, 30.0, 15.0)
    assert op_norm_estimate(geom, grid, 50) >= op_norm_estimate(geom, grid, 5) - 1e-9


def test_op_norm_against_dense_svd():
    grid = VolumeGrid((8, 8), 1.0)
    geom = make_fan_geometry(8, 11, 30.0, 15.0)
    sigma = np.linalg.svd(dense_matrix(geom, grid), compute_uv=False)[0]
    est = op_norm_estimate(geom, grid, 60)
    assert abs(est - sigma) / sigma < 0.01


def test_bound_projector_matches_functions():
    grid = VolumeGrid((12, 12), 1.0)
    geom = make_fan_geometry(6, 9, 40.0, 20.0)
    op = bind(geom, grid)
    rng = np.random.default_rng(8)
    x = rng.standard_normal(grid.shape)
    y = rng.standard_normal(geom.n_rays)
    assert np.array_equal(
        op.forward(x), forward_project(Volume(grid, x), geom).values.ravel()
    )
    assert np.array_equal(
        op.adjoint(y), back_project(Sinogram(geom, y.reshape(6, 9)), grid).values
    )


def test_thread_count_does_not_change_results():
    grid = VolumeGrid((32, 32), 1.0)
    geom = make_fan_geometry(20, 31, 80.0, 40.0)
    rng = np.random.default_rng(9)
    x = Volume(grid, rng.standard_normal(grid.shape))
    p1 = forward_project(x, geom, threads=1)
    p4 = forward_project(x, geom, threads=4)
    scale = np.max(np.abs(p1.values))
    assert np.max(np.abs(p1.values - p4.values)) < 1e-10 * scale
    b1 = back_project(p1, grid, threads=1)
    b4 = back_project(p1, grid, threads=4)
    assert np.max(np.abs(b1.values - b4.values)) < 1e-10 * np.max(np.abs(b1.values))


def test_dimension_mismatch_rejected():
    grid3 = VolumeGrid((4, 4, 4), 1.0)
    fan = make_fan_geometry(4, 5, 30.0, 15.0)
    with pytest.raises(ShapeMismatchError):
        forward_project(Volume.zeros(grid3), fan)
    cone = make_cone_geometry(4, 4, 4, 30.0, 15.0, 1.0)
    with pytest.raises(ShapeMismatchError):
        back_project(Sinogram.zeros(cone), VolumeGrid((8, 8), 1.0))


def test_nonfinite_volume_rejected():
    grid = VolumeGrid((4, 4), 1.0)
    geom = make_fan_geometry(2, 3, 30.0, 15.0)
    bad = np.zeros(grid.shape)
    bad[1, 1] = np.nan
    with pytest.raises(ValueError):
        forward_project(Volume(grid, bad), geom)
