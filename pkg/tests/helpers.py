"""Data builders shared by the unit and acceptance tests."""
import numpy as np

from nngpr.gpr import ModelParams
from nngpr.gridstore import (FieldSeries, GridSpec, TrainingSet, compute_standardizers,
                             month_range, snapshots_from_series)
from nngpr.kernel import KernelParams, kernel_matrix


def make_training(rng, n=6, d_shape=(2, 2), member_shapes=((2, 3), (1, 2)), noise=1.0):
    """Small random training set with time-aligned members and target."""
    times = month_range((2000, 1), n)
    members = [FieldSeries(GridSpec.regular(*s, lat_extent=60), times,
                           rng.normal(size=(n, s[0] * s[1])) + 1.0) for s in member_shapes]
    target = FieldSeries(GridSpec.regular(*d_shape, lat_extent=60), times,
                         noise * rng.normal(size=(n, d_shape[0] * d_shape[1])))
    st = compute_standardizers(members)
    return TrainingSet(snapshots_from_series(members, st), target, st), members, target


def gp_scenario(seed=0, n=200, d=64, d_in=10, truth=(1.0, 0.2, 0.05), depth=10):
    """Targets drawn from the model itself: one member supplies ``d_in`` inputs,
    each of the ``d`` target locations is an independent GP draw plus noise."""
    r = np.random.default_rng(seed)
    times = month_range((1980, 1), n)
    member = FieldSeries(GridSpec.regular(2, d_in // 2, lat_extent=60), times,
                         r.normal(size=(n, d_in)))
    st = [(0.0, 1.0)]
    snaps = snapshots_from_series([member], st)
    params = ModelParams(KernelParams(truth[0], truth[1], depth), truth[2])
    x = np.array([s.x_vec for s in snaps])
    cov = kernel_matrix(x, params.kernel) + params.noise_var * np.eye(n)
    y = np.linalg.cholesky(cov) @ r.normal(size=(n, d))
    side = int(round(np.sqrt(d)))
    target = FieldSeries(GridSpec.regular(side, d // side, lat_extent=60), times, y)
    return TrainingSet(snaps, target, st), params
