"""Axisymmetric cell-centered grid, state container, and mass bookkeeping.

The preform is a solid cylinder discretized on a uniform (r, z) grid with
cell centers at r_i = (i + 1/2) dr, z_j = (j + 1/2) dz. Azimuthal symmetry
makes every cell a ring of volume 2 pi r_i dr dz. All deposit-mass helpers
reduce over z-columns first (a single dot product over r), then fold the
column masses with math.fsum, so segment sums and whole-domain sums follow
the same summation path.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, ContractError, InvalidGeometryError

# Face-snapping tolerance for segment bounds and machining trims, expressed
# in cell units.
FACE_SNAP_TOL = 1e-6


@dataclass(frozen=True)
class AxiGrid:
    """Uniform axisymmetric grid over a cylinder of given radius and height.

    dr and dz are stored explicitly so that a trimmed grid can reuse the
    parent spacing bitwise (radius is then nr * dr by construction).
    """

    nr: int
    nz: int
    radius: float
    height: float
    dr: float = field(default=0.0)
    dz: float = field(default=0.0)

    def __post_init__(self):
        if self.nr < 1 or self.nz < 1:
            raise InvalidGeometryError(f"need at least one cell per axis, got nr={self.nr} nz={self.nz}")
        if not (self.radius > 0.0 and self.height > 0.0):
            raise InvalidGeometryError(f"radius and height must be positive, got {self.radius}, {self.height}")
        if self.dr == 0.0:
            object.__setattr__(self, "dr", self.radius / self.nr)
        if self.dz == 0.0:
            object.__setattr__(self, "dz", self.height / self.nz)

    @staticmethod
    def from_spacing(nr: int, nz: int, dr: float, dz: float) -> "AxiGrid":
        """Build a grid from cell counts and spacings (used after machining)."""
        return AxiGrid(nr, nz, nr * dr, nz * dz, dr=dr, dz=dz)

    @property
    def r_centers(self) -> np.ndarray:
        return (np.arange(self.nr) + 0.5) * self.dr

    @property
    def z_centers(self) -> np.ndarray:
        return (np.arange(self.nz) + 0.5) * self.dz

    @property
    def r_faces(self) -> np.ndarray:
        return np.arange(self.nr + 1) * self.dr

    @property
    def ncells(self) -> int:
        return self.nr * self.nz

    def cell_volume(self, i: int, j: int) -> float:
        """Volume of the ring cell (i, j); indices are bounds-checked."""
        if not (0 <= i < self.nr and 0 <= j < self.nz):
            raise IndexError(f"cell ({i}, {j}) outside grid {self.nr}x{self.nz}")
        return 2.0 * math.pi * (i + 0.5) * self.dr * self.dr * self.dz

    def column_volumes(self) -> np.ndarray:
        """Cell volumes as a function of radius only, shape (nr,)."""
        return 2.0 * math.pi * self.r_centers * self.dr * self.dz


def total_volume(grid: AxiGrid) -> float:
    return float(np.sum(grid.column_volumes()) * grid.nz)


@dataclass
class ScalarField:
    """A (nr, nz) float64 field tied to a grid."""

    grid: AxiGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.nr, self.grid.nz):
            raise ContractError(
                f"field shape {self.values.shape} does not match grid ({self.grid.nr}, {self.grid.nz})")
        if not np.isfinite(self.values).all():
            raise ContractError("field contains non-finite values")

    @staticmethod
    def full(grid: AxiGrid, value: float) -> "ScalarField":
        return ScalarField(grid, np.full((grid.nr, grid.nz), float(value)))


@dataclass
class CviState:
    """Porosity and gas molarity fields at one instant of the densification."""

    porosity: ScalarField
    molarity: ScalarField
    eps0: float
    time_s: float = 0.0

    def __post_init__(self):
        if self.porosity.grid is not self.molarity.grid and (
                self.porosity.grid != self.molarity.grid):
            raise ContractError("porosity and molarity live on different grids")
        if not (0.0 < self.eps0 < 1.0):
            raise ContractError(f"initial porosity must be in (0, 1), got {self.eps0}")
        eps = self.porosity.values
        if eps.min() < 0.0 or eps.max() > self.eps0:
            raise ContractError("porosity outside [0, eps0]")
        if self.molarity.values.min() < 0.0:
            raise ContractError("molarity must be nonnegative")

    @property
    def grid(self) -> AxiGrid:
        return self.porosity.grid

    def deposit_fraction(self) -> np.ndarray:
        """Volume fraction filled by deposit: eps0 - eps(r, z)."""
        return self.eps0 - self.porosity.values


def initial_state(grid: AxiGrid, eps0: float, c_bc: float = 0.0) -> CviState:
    return CviState(ScalarField.full(grid, eps0), ScalarField.full(grid, c_bc), eps0)


def _snap_to_face(pos_cells: float, what: str) -> int:
    """Round a face position given in cell units, warning if it was off-face."""
    j = int(round(pos_cells))
    if abs(pos_cells - j) > FACE_SNAP_TOL:
        warnings.warn(f"{what} at {pos_cells} cells snapped to face {j}", stacklevel=3)
    return j


@dataclass(frozen=True)
class SegmentSpec:
    """Axial segmentation of the preform by fractional z bounds.

    bounds must start at 0, end at 1, and increase strictly; every bound has
    to fall on a cell face of the grid in use (within FACE_SNAP_TOL).
    """

    bounds: tuple

    def __post_init__(self):
        b = tuple(float(x) for x in self.bounds)
        object.__setattr__(self, "bounds", b)
        if len(b) < 2 or b[0] != 0.0 or b[-1] != 1.0:
            raise ContractError(f"segment bounds must run from 0 to 1, got {b}")
        if any(b[i + 1] <= b[i] for i in range(len(b) - 1)):
            raise ContractError(f"segment bounds must increase strictly, got {b}")

    @property
    def nseg(self) -> int:
        return len(self.bounds) - 1

    def face_indices(self, grid: AxiGrid) -> list:
        faces = []
        for frac in self.bounds:
            pos = frac * grid.nz
            j = int(round(pos))
            if abs(pos - j) > FACE_SNAP_TOL * max(1.0, grid.nz):
                raise AlignmentError(
                    f"segment bound {frac} falls at {pos} cells on a {grid.nz}-cell axis (not a face)")
            faces.append(j)
        return faces


WHOLE = SegmentSpec((0.0, 1.0))


def _column_deposit_masses(state: CviState, rho_d: float) -> np.ndarray:
    """Deposit mass per z-column, shape (nz,). Shared by every mass reducer."""
    w = rho_d * state.grid.column_volumes()
    return w @ state.deposit_fraction()


def integrate_deposit_mass(state: CviState, rho_d: float, z_range=(0.0, 1.0)) -> float:
    """Deposited solid mass in kg over a fractional z range of the preform.

    The range ends are snapped to cell faces (with a warning when off-face);
    an empty range integrates to exactly zero.
    """
    z0, z1 = float(z_range[0]), float(z_range[1])
    if not (0.0 <= z0 <= z1 <= 1.0):
        raise ContractError(f"z range {z_range} not within [0, 1]")
    grid = state.grid
    j0 = _snap_to_face(z0 * grid.nz, "z-range start")
    j1 = _snap_to_face(z1 * grid.nz, "z-range end")
    if j1 <= j0:
        return 0.0
    col = _column_deposit_masses(state, rho_d)
    return math.fsum(col[j0:j1])


def segment_masses(state: CviState, rho_d: float, seg: SegmentSpec) -> np.ndarray:
    """Deposited mass per axial segment; sums to the whole-domain integral."""
    faces = seg.face_indices(state.grid)
    col = _column_deposit_masses(state, rho_d)
    return np.array([math.fsum(col[faces[k]:faces[k + 1]]) for k in range(seg.nseg)])


def segment_weight_matrix(grid: AxiGrid, seg: SegmentSpec, rho_d: float) -> np.ndarray:
    """(nseg, nr*nz) weights turning a flattened deposit-fraction field into
    per-segment deposit masses. Row k sums rho_d * V_cell over segment k."""
    faces = seg.face_indices(grid)
    vol = np.broadcast_to(grid.column_volumes()[:, None], (grid.nr, grid.nz))
    w = np.zeros((seg.nseg, grid.nr, grid.nz))
    for k in range(seg.nseg):
        w[k, :, faces[k]:faces[k + 1]] = vol[:, faces[k]:faces[k + 1]]
    return rho_d * w.reshape(seg.nseg, grid.ncells)


@dataclass(frozen=True)
class TrimSpec:
    """Material removed by machining: depth from the outer radius, and from
    the top (z = height) and bottom (z = 0) ends, in meters."""

    radial_m: float = 0.0
    top_m: float = 0.0
    bottom_m: float = 0.0

    def __post_init__(self):
        if min(self.radial_m, self.top_m, self.bottom_m) < 0.0:
            raise ContractError("trim depths must be nonnegative")


def machine_preform(state: CviState, trim: TrimSpec) -> tuple:
    """Trim the preform, returning (new state, removed deposit mass, rho_d-free).

    Trims snap to whole cells. The kept cells carry their porosity and
    molarity values over bitwise; the new grid reuses the parent spacing so
    kept-cell volumes are unchanged. Returns (CviState, removed_cells) where
    removed_cells = (n_radial, n_top, n_bottom).
    """
    grid = state.grid
    n_r = _snap_to_face(trim.radial_m / grid.dr, "radial trim")
    n_t = _snap_to_face(trim.top_m / grid.dz, "top trim")
    n_b = _snap_to_face(trim.bottom_m / grid.dz, "bottom trim")
    nr2, nz2 = grid.nr - n_r, grid.nz - n_t - n_b
    if nr2 < 1 or nz2 < 1:
        raise ContractError(f"trim removes entire preform: keeps {nr2}x{nz2} cells")
    g2 = AxiGrid.from_spacing(nr2, nz2, grid.dr, grid.dz)
    zsl = slice(n_b, grid.nz - n_t)
    eps2 = ScalarField(g2, state.porosity.values[:nr2, zsl].copy())
    mol2 = ScalarField(g2, state.molarity.values[:nr2, zsl].copy())
    new = CviState(eps2, mol2, state.eps0, state.time_s)
    return new, (n_r, n_t, n_b)
