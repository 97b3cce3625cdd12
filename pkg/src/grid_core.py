"""
Masked 2-D grids and the discrete operators the rest of the pipeline uses.

Arrays are stored with shape (N_x, N_y): the first axis is the column index i
(x direction) and the second the row index j (y direction). A C-order ravel of
that layout gives the column-wise vectorization n = i * N_y + j, so the
forward neighbours n + N_y and n + 1 are simply [i + 1, j] and [i, j + 1].

Cells that carry no information are flagged unavailable in a boolean mask
rather than holding an infinity. Every operator here ignores them: outputs
touching an unavailable operand are themselves unavailable and store 0.0.
"""
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class GridGeometry:
    """Size, resolution and placement of a grid. `origin` is the world (x, y) of the outer corner of cell (0, 0)."""
    nx: int
    ny: int
    cell_size: float = 0.10
    origin: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError(f"Grid needs at least one cell per axis, got {self.nx}x{self.ny}")
        if not self.cell_size > 0:
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def shape(self):
        return (self.nx, self.ny)

    @property
    def extent(self):
        return (self.nx * self.cell_size, self.ny * self.cell_size)

    @property
    def center(self):
        return (self.origin[0] + 0.5 * self.nx * self.cell_size,
                self.origin[1] + 0.5 * self.ny * self.cell_size)

    @classmethod
    def centered(cls, extent, cell_size=0.10, center=(0.0, 0.0)):
        """Square-celled grid of roughly `extent` meters per side centred on `center`."""
        n = max(1, int(round(extent / cell_size)))
        half = 0.5 * n * cell_size
        return cls(n, n, cell_size, (center[0] - half, center[1] - half))

    def cell_index(self, x, y):
        """World coordinates -> integer (i, j) arrays plus an in-bounds flag."""
        i = np.floor((np.asarray(x, dtype=float) - self.origin[0]) / self.cell_size).astype(np.int64)
        j = np.floor((np.asarray(y, dtype=float) - self.origin[1]) / self.cell_size).astype(np.int64)
        inside = (i >= 0) & (i < self.nx) & (j >= 0) & (j < self.ny)
        return i, j, inside

    def cell_centers(self):
        """World coordinates of every cell centre as two (N_x, N_y) arrays."""
        xs = self.origin[0] + (np.arange(self.nx) + 0.5) * self.cell_size
        ys = self.origin[1] + (np.arange(self.ny) + 0.5) * self.cell_size
        return np.meshgrid(xs, ys, indexing="ij")

    def contains(self, x, y):
        return (self.origin[0] <= x < self.origin[0] + self.nx * self.cell_size
                and self.origin[1] <= y < self.origin[1] + self.ny * self.cell_size)


@dataclass
class MaskedGrid:
    geometry: GridGeometry
    values: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.geometry.shape:
            raise ValueError(f"values shape {self.values.shape} does not match geometry {self.geometry.shape}")
        if self.mask is None:
            self.mask = np.ones(self.geometry.shape, dtype=bool)
        else:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.geometry.shape:
                raise ValueError(f"mask shape {self.mask.shape} does not match geometry {self.geometry.shape}")

    @classmethod
    def unavailable(cls, geometry):
        return cls(geometry, np.zeros(geometry.shape), np.zeros(geometry.shape, dtype=bool))

    @classmethod
    def from_values(cls, geometry, values, mask=None):
        """Build a grid, zeroing whatever sits under unavailable cells."""
        values = np.asarray(values, dtype=np.float64)
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            values = np.where(mask, values, 0.0)
        return cls(geometry, values, mask)

    @property
    def available_count(self):
        return int(self.mask.sum())

    def available_values(self):
        return self.values[self.mask]

    def vectorized(self):
        """Values and mask in column-wise vectorized order (n = i * N_y + j)."""
        return self.values.ravel(), self.mask.ravel()

    def copy(self):
        return MaskedGrid(self.geometry, self.values.copy(), self.mask.copy())


@dataclass
class GradientField:
    """Horizontal (dx) and vertical (dy) finite-difference components sharing one geometry."""
    dx: MaskedGrid
    dy: MaskedGrid

    def __post_init__(self):
        if self.dx.geometry != self.dy.geometry:
            raise ValueError("Gradient components must share their geometry")

    @property
    def geometry(self):
        return self.dx.geometry

    @property
    def mask(self):
        """Cells where both components are available."""
        return self.dx.mask & self.dy.mask


def gradient(g):
    """
    First-order forward differences: dx[i, j] = g[i+1, j] - g[i, j] and
    dy[i, j] = g[i, j+1] - g[i, j]. The last column (dx) and last row (dy)
    are unavailable, as is any cell whose operand pair is not fully available.
    """
    v, m = g.values, g.mask
    dx = np.zeros_like(v)
    dy = np.zeros_like(v)
    mdx = np.zeros_like(m)
    mdy = np.zeros_like(m)

    mdx[:-1, :] = m[1:, :] & m[:-1, :]
    mdy[:, :-1] = m[:, 1:] & m[:, :-1]
    with np.errstate(invalid="ignore", over="ignore"):
        dx[:-1, :] = np.where(mdx[:-1, :], v[1:, :] - v[:-1, :], 0.0)
        dy[:, :-1] = np.where(mdy[:, :-1], v[:, 1:] - v[:, :-1], 0.0)

    return GradientField(MaskedGrid(g.geometry, dx, mdx), MaskedGrid(g.geometry, dy, mdy))


def ratio_gradient(sums, counts):
    """
    Forward-difference gradient of the mean grid sums / counts, evaluated as
    (S[n'] * M[n] - S[n] * M[n']) / (M[n] * M[n']).

    The value is the same as gradient() of the mean grid, but with integer-valued
    sums the numerator is exact, so adding c * M to every sum (a constant offset
    on every sample) leaves the result bit-identical. Cells with zero count are
    unavailable.
    """
    s = np.asarray(sums, dtype=np.float64)
    c = np.asarray(counts, dtype=np.float64)
    avail = c > 0
    dx = np.zeros_like(s)
    dy = np.zeros_like(s)
    mdx = np.zeros(s.shape, dtype=bool)
    mdy = np.zeros(s.shape, dtype=bool)

    mdx[:-1, :] = avail[1:, :] & avail[:-1, :]
    mdy[:, :-1] = avail[:, 1:] & avail[:, :-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        num_x = s[1:, :] * c[:-1, :] - s[:-1, :] * c[1:, :]
        dx[:-1, :] = np.where(mdx[:-1, :], num_x / (c[1:, :] * c[:-1, :]), 0.0)
        num_y = s[:, 1:] * c[:, :-1] - s[:, :-1] * c[:, 1:]
        dy[:, :-1] = np.where(mdy[:, :-1], num_y / (c[:, 1:] * c[:, :-1]), 0.0)
    return dx, mdx, dy, mdy


def laplacian(g):
    """Five-point Laplacian, available only where the cell and its four neighbours are."""
    v, m = g.values, g.mask
    out = np.zeros_like(v)
    mout = np.zeros_like(m)
    if g.geometry.nx < 3 or g.geometry.ny < 3:
        return MaskedGrid(g.geometry, out, mout)

    mout[1:-1, 1:-1] = (m[1:-1, 1:-1] & m[2:, 1:-1] & m[:-2, 1:-1]
                        & m[1:-1, 2:] & m[1:-1, :-2])
    with np.errstate(invalid="ignore", over="ignore"):
        lap = (-4.0 * v[1:-1, 1:-1] + v[1:-1, 2:] + v[1:-1, :-2]
               + v[2:, 1:-1] + v[:-2, 1:-1])
    out[1:-1, 1:-1] = np.where(mout[1:-1, 1:-1], lap, 0.0)
    return MaskedGrid(g.geometry, out, mout)


def magnitude(f):
    """Per-cell L2 norm of a gradient field where both components are available."""
    m = f.dx.mask & f.dy.mask
    with np.errstate(invalid="ignore", over="ignore"):
        mag = np.where(m, np.hypot(f.dx.values, f.dy.values), 0.0)
    return MaskedGrid(f.geometry, mag, m)


def resample(src, pose_offset, dst_geometry):
    """
    Nearest-neighbour pull of `src` onto `dst_geometry`.

    `pose_offset` = (dx, dy, dh) is the rigid transform taking destination-frame
    coordinates into the source frame: p_src = R(dh) p_dst + (dx, dy). Each
    destination cell takes the source cell containing its mapped centre;
    out-of-bounds or unavailable source cells leave it unavailable.
    """
    tx, ty, th = (float(v) for v in pose_offset)
    if abs(th) > np.pi + 1e-12:
        raise ValueError(f"Heading offset must lie in [-pi, pi], got {th}")

    px, py = dst_geometry.cell_centers()
    c, s = np.cos(th), np.sin(th)
    wx = c * px - s * py + tx
    wy = s * px + c * py + ty

    si, sj, inside = src.geometry.cell_index(wx, wy)
    out = np.zeros(dst_geometry.shape)
    mout = np.zeros(dst_geometry.shape, dtype=bool)
    src_avail = src.mask[si[inside], sj[inside]]
    mout[inside] = src_avail
    out[inside] = np.where(src_avail, src.values[si[inside], sj[inside]], 0.0)
    return MaskedGrid(dst_geometry, out, mout)


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2.0 * np.pi)


def compose(pose, delta):
    """Apply a body-frame increment (dx, dy, dh) to a pose (x, y, h)."""
    x, y, h = pose
    dx, dy, dh = delta
    c, s = np.cos(h), np.sin(h)
    return np.array([x + c * dx - s * dy, y + s * dx + c * dy, float(wrap_angle(h + dh))])


def relative(pose_from, pose_to):
    """Body-frame increment taking `pose_from` to `pose_to` (the inverse of compose)."""
    x0, y0, h0 = pose_from
    x1, y1, h1 = pose_to
    c, s = np.cos(h0), np.sin(h0)
    ex, ey = x1 - x0, y1 - y0
    return np.array([c * ex + s * ey, -s * ex + c * ey, float(wrap_angle(h1 - h0))])


def to_frame(pose, x, y):
    """World points -> the body frame of `pose`."""
    px, py, h = pose
    c, s = np.cos(h), np.sin(h)
    ex, ey = np.asarray(x) - px, np.asarray(y) - py
    return c * ex + s * ey, -s * ex + c * ey


def from_frame(pose, x, y):
    """Body-frame points of `pose` -> world."""
    px, py, h = pose
    c, s = np.cos(h), np.sin(h)
    x, y = np.asarray(x), np.asarray(y)
    return c * x - s * y + px, s * x + c * y + py
