"""Periodic 1D grid geometry and the mapping from state columns to grid points.

State vectors for the shallow-water model stack the three fields in blocks:
x = (h_0..h_{n-1}, u_0..u_{n-1}, r_0..r_{n-1}), so column c lives at grid
point c mod n. Localization only ever needs distances between grid points,
which on a ring are circular.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GridGeometry:
    """Evenly spaced points on a circle of circumference n_points * spacing_m."""

    n_points: int
    spacing_m: float

    def __post_init__(self):
        if self.n_points < 1:
            raise ValueError("n_points must be positive")
        if self.spacing_m <= 0:
            raise ValueError("spacing_m must be positive")

    @property
    def domain_m(self):
        return self.n_points * self.spacing_m

    def distance_m(self, i, j):
        """Circular distance in meters between grid indices i and j (arrays ok)."""
        i = np.asarray(i)
        j = np.asarray(j)
        raw = np.abs(i - j)
        wrapped = np.minimum(raw, self.n_points - raw)
        return wrapped * self.spacing_m

    def points_within(self, center, radius_m):
        """Grid indices within circular distance radius_m of center, ascending."""
        all_pts = np.arange(self.n_points)
        return all_pts[self.distance_m(all_pts, center) <= radius_m]


@dataclass(frozen=True)
class StateLayout:
    """Maps state-vector columns to grid points for a multi-field state.

    n_fields stacked blocks of geometry.n_points columns each; column c sits
    at grid point c mod n_points and belongs to field c // n_points.
    """

    geometry: GridGeometry
    n_fields: int = 3
    field_names: tuple = ("h", "u", "r")

    def __post_init__(self):
        if len(self.field_names) != self.n_fields:
            raise ValueError("field_names length must equal n_fields")

    @property
    def dim(self):
        return self.n_fields * self.geometry.n_points

    def grid_of_cols(self, cols=None):
        """Grid point of each state column (all columns if cols is None)."""
        if cols is None:
            cols = np.arange(self.dim)
        return np.asarray(cols) % self.geometry.n_points

    def col(self, field_idx, grid_point):
        """State column of (field, grid point); both may be arrays."""
        return np.asarray(field_idx) * self.geometry.n_points + np.asarray(grid_point)

    def cols_at(self, grid_point):
        """All state columns located at one grid point, one per field."""
        return self.col(np.arange(self.n_fields), grid_point)

    def col_distance_m(self, cols_a, cols_b):
        """Pairwise circular distances (|a| x |b|) between column locations."""
        pa = self.grid_of_cols(cols_a)
        pb = self.grid_of_cols(cols_b)
        return self.geometry.distance_m(pa[:, None], pb[None, :])


def default_layout(n_points, spacing_m=500.0):
    return StateLayout(GridGeometry(n_points, spacing_m))
