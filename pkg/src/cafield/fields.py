"""Density fields: providers, scene probing, object resampling, gradients,
1-D k-means and the binary grid format.

Scene coordinates live in the cube [-1, 1]^3. A provider maps (N, 3)
positions to raw non-negative densities; normalization is
``1 - exp(-d * sigma)`` with depth step ``d`` (default 2/64).
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import so3

DEFAULT_DEPTH_STEP = 2.0 / 64
PROBE_RESOLUTION = 32
GRID_MAGIC = b"CAFG"
GRID_VERSION = 1
_HEADER = struct.Struct("<4sH3I4f")
DATASET_VERSION = "cafield-dataset-v1"


class DegenerateError(ValueError):
    """Input has no usable foreground / cluster structure."""


class FormatError(ValueError):
    pass


# -- normalization ------------------------------------------------------------

def normalize_density(sigma, d=DEFAULT_DEPTH_STEP):
    sigma = np.asarray(sigma, dtype=np.float64)
    if d <= 0:
        raise ValueError("depth step must be positive")
    if np.any(sigma < 0):
        raise ValueError("raw density must be non-negative")
    return -np.expm1(-d * sigma)


# -- providers ----------------------------------------------------------------

class FieldProvider:
    """Callable density ``sigma(points) -> (N,)``, non-negative."""

    def __call__(self, points):
        raise NotImplementedError


class FunctionProvider(FieldProvider):
    def __init__(self, fn):
        self.fn = fn

    def __call__(self, points):
        return self.fn(np.asarray(points, dtype=np.float64))


class RotatedProvider(FieldProvider):
    """``base`` rotated by ``R`` about ``center``: queries base at
    ``center + R^T (x - center)``."""

    def __init__(self, base, R, center=(0.0, 0.0, 0.0)):
        self.base = base
        self.R = np.asarray(R, dtype=np.float64)
        self.center = np.asarray(center, dtype=np.float64)

    def __call__(self, points):
        p = np.asarray(points, dtype=np.float64)
        return self.base(self.center + (p - self.center) @ self.R)


class ShiftedProvider(FieldProvider):
    def __init__(self, base, t):
        self.base = base
        self.t = np.asarray(t, dtype=np.float64)

    def __call__(self, points):
        return self.base(np.asarray(points, dtype=np.float64) - self.t)


class SumProvider(FieldProvider):
    def __init__(self, parts):
        self.parts = list(parts)

    def __call__(self, points):
        return sum(p(points) for p in self.parts)


class BallProvider(FieldProvider):
    """Solid ball with a logistic edge; spherically symmetric about ``center``."""

    def __init__(self, center=(0, 0, 0), radius=0.3, peak=150.0, width=0.015):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius, self.peak, self.width = radius, peak, width

    def __call__(self, points):
        r = np.linalg.norm(np.asarray(points, float) - self.center, axis=1)
        return self.peak * _sigmoid(-(r - self.radius) / self.width)


class BoxProvider(FieldProvider):
    def __init__(self, center=(0, 0, 0), half=(0.2, 0.1, 0.1), peak=150.0, width=0.015):
        self.center = np.asarray(center, dtype=np.float64)
        self.half = np.asarray(half, dtype=np.float64)
        self.peak, self.width = peak, width

    def __call__(self, points):
        d = _sdf_box(np.asarray(points, float) - self.center, self.half)
        return self.peak * _sigmoid(-d / self.width)


class GaussianMixtureField(FieldProvider):
    """Sum of anisotropic Gaussians with closed-form gradient; used by the
    equivariance checks because rotating it is exact."""

    def __init__(self, means, covs, weights):
        self.means = np.asarray(means, dtype=np.float64)
        self.covs = np.asarray(covs, dtype=np.float64)
        self.weights = np.asarray(weights, dtype=np.float64)
        self._prec = np.linalg.inv(self.covs)

    @classmethod
    def random(cls, rng, n=3, spread=0.3, scale=(0.25, 0.45)):
        means = rng.uniform(-spread, spread, size=(n, 3))
        covs = []
        for _ in range(n):
            Q = so3.random_rotation(rng)
            covs.append(Q @ np.diag(rng.uniform(*scale, size=3) ** 2) @ Q.T)
        return cls(means, covs, rng.uniform(0.5, 1.5, size=n))

    def _terms(self, points):
        diff = np.asarray(points, float)[:, None, :] - self.means[None]
        pd = np.einsum("kij,nkj->nki", self._prec, diff)
        return self.weights * np.exp(-0.5 * np.einsum("nki,nki->nk", diff, pd)), pd

    def __call__(self, points):
        return self._terms(points)[0].sum(axis=1)

    def gradient(self, points):
        e, pd = self._terms(points)
        return -(e[:, :, None] * pd).sum(axis=1)

    def rotated(self, R):
        R = np.asarray(R, dtype=np.float64)
        return GaussianMixtureField(self.means @ R.T, R @ self.covs @ R.T, self.weights)


class GridProvider(FieldProvider):
    """Trilinear interpolation of a stored normalized grid, returned as raw
    density by inverting the normalization with ``depth_step``. Lattice
    points reproduce the stored raw values exactly; zero outside."""

    def __init__(self, grid, depth_step=DEFAULT_DEPTH_STEP):
        self.grid = grid
        vals = np.clip(grid.values, 0.0, 1.0 - 1e-7)
        self.raw = -np.log1p(-vals) / depth_step
        self.origin = grid.center - grid.side / 2 + grid.spacing / 2

    def __call__(self, points):
        p = (np.asarray(points, float) - self.origin) / self.grid.spacing
        shape = np.array(self.raw.shape)
        inside = np.all((p >= -0.5) & (p <= shape - 0.5), axis=1)
        p = np.clip(p, 0, shape - 1)
        i0 = np.minimum(np.floor(p).astype(int), shape - 2).clip(0)
        f = p - i0
        out = np.zeros(p.shape[0])
        for dx in (0, 1):
            wx = f[:, 0] if dx else 1 - f[:, 0]
            for dy in (0, 1):
                wy = f[:, 1] if dy else 1 - f[:, 1]
                for dz in (0, 1):
                    wz = f[:, 2] if dz else 1 - f[:, 2]
                    w = wx * wy * wz
                    nz = w != 0
                    idx = i0[nz] + (dx, dy, dz)
                    out[nz] += w[nz] * self.raw[idx[:, 0], idx[:, 1], idx[:, 2]]
        out[~inside] = 0.0
        return out


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _sdf_box(p, half):
    q = np.abs(p) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(np.max(q, axis=1), 0.0)
    return outside + inside


def _sdf_capsule(p, a, b, r):
    ab = b - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1) - r


def _sdf_plane(p, n, o):
    return p @ n - o


# -- synthetic catalog --------------------------------------------------------

@dataclass
class Template:
    """A category shape in its canonical frame (origin at the shape's
    reference point)."""
    category: str
    sdf: object
    extent: np.ndarray   # half-size of a box enclosing the shape
    peak: float = 150.0
    width: float = 0.015

    def density(self, points):
        return self.peak * _sigmoid(-self.sdf(np.asarray(points, float)) / self.width)

    def provider(self):
        return FunctionProvider(self.density)

    @property
    def radius(self):
        return float(np.linalg.norm(self.extent))

    def surface_points(self, n=512, seed=0, shell=0.02):
        """Rejection-sample ``n`` points with |sdf| < shell."""
        rng = np.random.default_rng(seed)
        out = []
        got = 0
        while got < n:
            cand = rng.uniform(-self.extent - shell, self.extent + shell, size=(4096, 3))
            keep = cand[np.abs(self.sdf(cand)) < shell]
            out.append(keep)
            got += len(keep)
        return np.concatenate(out)[:n]


def _wedge(rng):
    sx, sy, sz = rng.uniform(0.85, 1.15, size=3)
    half = np.array([0.35 * sx, 0.16 * sy, 0.2 * sz])
    top_lo, top_hi = (-half[0], half[1]), (half[0], -0.35 * half[1])
    n = np.array([top_lo[1] - top_hi[1], top_hi[0] - top_lo[0], 0.0])
    n /= np.linalg.norm(n)
    o = n[:2] @ np.array(top_lo)
    a = np.array([-0.55 * half[0], -0.3 * half[1], half[2]])
    b = a + np.array([0.0, 0.0, 0.17 * sz])
    rad = 0.06

    def sdf(p):
        body = np.maximum(_sdf_box(p, half), _sdf_plane(p, n, o))
        return np.minimum(body, _sdf_capsule(p, a, b, rad))

    ext = np.maximum(half, np.abs(b) + rad)
    return Template("wedge", sdf, ext)


def _lblock(rng):
    sx, sy, sz = rng.uniform(0.85, 1.15, size=3)
    base_half = np.array([0.36 * sx, 0.08 * sy, 0.14 * sz])
    base_c = np.array([0.0, -0.18 * sy, 0.0])
    arm_half = np.array([0.08 * sx, 0.24 * sy, 0.14 * sz])
    arm_c = np.array([-0.28 * sx, 0.0, 0.0])

    def sdf(p):
        return np.minimum(_sdf_box(p - base_c, base_half), _sdf_box(p - arm_c, arm_half))

    ext = np.maximum(np.abs(base_c) + base_half, np.abs(arm_c) + arm_half)
    return Template("lblock", sdf, ext)


def _slab(rng):
    sx, sy, sz = rng.uniform(0.85, 1.15, size=3)
    half = np.array([0.4 * sx, 0.05 * sy, 0.25 * sz])
    taper = 0.5 * half[2]  # z half-width shrinks from half[2] to taper along +x
    n1 = np.array([(half[2] - taper) / (2 * half[0]), 0.0, 1.0])
    n1 /= np.linalg.norm(n1)
    o1 = n1 @ np.array([-half[0], 0.0, half[2]])
    n2 = n1 * np.array([1.0, 1.0, -1.0])
    knob_c = np.array([0.25 * half[0], half[1], 0.4 * half[2]])
    knob_r = 0.07

    def sdf(p):
        body = np.maximum.reduce([_sdf_box(p, half), _sdf_plane(p, n1, o1), _sdf_plane(p, n2, o1)])
        return np.minimum(body, np.linalg.norm(p - knob_c, axis=1) - knob_r)

    ext = np.maximum(half, np.abs(knob_c) + knob_r)
    return Template("slab", sdf, ext)


CATALOG = {"wedge": _wedge, "lblock": _lblock, "slab": _slab}


@dataclass
class SyntheticInstance:
    category: str
    seed: int
    R_gt: np.ndarray
    offset: np.ndarray
    clutter: float = 0.0
    noise: float = 0.0
    template: Template = field(default=None, repr=False)


def make_template(category, seed):
    if category not in CATALOG:
        raise KeyError(f"unknown category {category!r}; known: {sorted(CATALOG)}")
    return CATALOG[category](np.random.default_rng([seed, 0]))


def synth_generate(category, seed, clutter=0.0, noise=0.0, R_gt=None, offset=None):
    """Build an instance: the category template (with seeded size jitter)
    rotated by a seeded Haar ``R_gt``, shifted, plus clutter blobs placed
    outside the object's bounding sphere and smooth additive noise."""
    template = make_template(category, seed)
    rng = np.random.default_rng([seed, 1])
    R = so3.random_rotation(rng) if R_gt is None else np.asarray(R_gt, float)
    t = rng.uniform(-0.1, 0.1, size=3) if offset is None else np.asarray(offset, float)
    obj = RotatedProvider(ShiftedProvider(template.provider(), t), R, t)
    parts = [obj]
    if clutter > 0:
        parts.append(_clutter(rng, t, template.radius + 0.08, clutter))
    if noise > 0:
        parts.append(_noise(rng, noise * template.peak))
    inst = SyntheticInstance(category, seed, R, t, clutter, noise, template)
    return inst, (obj if len(parts) == 1 else SumProvider(parts))


def _clutter(rng, center, keep_out, level, d=DEFAULT_DEPTH_STEP):
    n = max(1, int(round(level * 20)))
    amp = -math.log(0.7) / d  # normalized peak 0.3, below the foreground split
    s = 0.04
    blobs = []
    while len(blobs) < n:
        b = rng.uniform(-0.9, 0.9, size=3)
        if np.linalg.norm(b - center) > keep_out + 3 * s:
            blobs.append(b)
    blobs = np.array(blobs)

    def fn(p):
        d2 = ((p[:, None, :] - blobs[None]) ** 2).sum(-1)
        return amp * np.exp(-0.5 * d2 / s ** 2).sum(axis=1)

    return FunctionProvider(fn)


def _noise(rng, amp, n_modes=6):
    omega = rng.normal(scale=6.0, size=(n_modes, 3))
    phase = rng.uniform(0, 2 * math.pi, size=n_modes)

    def fn(p):
        return amp * 0.5 * (1.0 + np.cos(p @ omega.T + phase).mean(axis=1))

    return FunctionProvider(fn)


# -- grids --------------------------------------------------------------------

@dataclass
class DensityGrid:
    """Normalized densities on a cell-centered cubic lattice of side
    ``side`` (the diagonal length of the probed foreground) around ``center``."""
    values: np.ndarray
    center: np.ndarray
    side: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.center = np.asarray(self.center, dtype=np.float64)
        self.side = float(self.side)

    @property
    def resolution(self):
        return self.values.shape

    @property
    def spacing(self):
        return self.side / self.values.shape[0]

    def axes(self):
        return [self.center[a] - self.side / 2 + (np.arange(n) + 0.5) * self.side / n
                for a, n in enumerate(self.values.shape)]

    def coords(self):
        gx, gy, gz = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    def validate(self):
        v = self.values
        if v.ndim != 3 or min(v.shape) < 1:
            raise FormatError("grid must be 3-D and non-empty")
        if not np.all(np.isfinite(v)) or v.min() < 0 or v.max() > 1:
            raise FormatError("normalized densities must lie in [0, 1]")
        if not self.side > 0:
            raise FormatError("grid side length must be positive")
        return self


@dataclass
class SceneBounds:
    center: np.ndarray
    diagonal: float
    foreground: np.ndarray   # boolean mask over the probe lattice
    probe: DensityGrid


def lattice(center, side, n):
    return DensityGrid(np.zeros((n, n, n)), center, side).coords()


def sample_grid(provider, center, side, n, d=DEFAULT_DEPTH_STEP, R_aug=None):
    c = np.asarray(center, float)
    off = lattice(np.zeros(3), side, n)
    if R_aug is not None:
        off = off @ np.asarray(R_aug, float)   # R^T (x - c); exact for R = I
    pts = c + off
    vals = normalize_density(provider(pts), d)
    return DensityGrid(vals.reshape(n, n, n), center, side)


def scene_probe(provider, d=DEFAULT_DEPTH_STEP, resolution=PROBE_RESOLUTION, seed=0):
    """Locate the object: probe the scene cube, split densities with 2-means,
    take the higher-mean cluster's centroid and extremity-box diagonal."""
    probe = sample_grid(provider, np.zeros(3), 2.0, resolution, d)
    vals = probe.values.ravel()
    try:
        labels, means = kmeans_1d(vals, 2, seed)
    except DegenerateError as exc:
        raise DegenerateError(f"scene has no foreground: {exc}") from None
    if means[1] - means[0] < 1e-6:
        raise DegenerateError("scene has no foreground: clusters coincide")
    fg = labels == 1
    pts = probe.coords()[fg]
    c = pts.mean(axis=0)
    diag = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
    if diag <= 0:
        diag = probe.spacing
    return SceneBounds(c, diag, fg.reshape(probe.values.shape), probe)


def resample_object_grid(provider, bounds, n=32, d=DEFAULT_DEPTH_STEP, R_aug=None):
    """Resample the cube of side ``l`` at the object center, optionally with
    the field rotated about that center by ``R_aug``."""
    if n < 8:
        raise ValueError("object grid resolution must be at least 8")
    return sample_grid(provider, bounds.center, bounds.diagonal, n, d, R_aug)


def finite_gradient(grid):
    """Central differences inside, one-sided on the boundary layers; (N, N, N, 3)."""
    if min(grid.values.shape) < 3:
        raise ValueError("gradient needs at least 3 samples per axis")
    g = np.gradient(grid.values, grid.spacing, edge_order=1)
    return np.stack(g, axis=-1)


# -- 1-D k-means --------------------------------------------------------------

def kmeans_1d(values, K, seed=0, max_iter=100, tol=1e-9):
    """Lloyd's algorithm with k-means++ seeding.

    Returns ``(labels, means)`` with clusters relabeled by ascending mean.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if K < 1:
        raise ValueError("K must be >= 1")
    if np.unique(x).size < K:
        raise DegenerateError(f"need at least {K} distinct values")
    rng = np.random.default_rng(seed)
    centers = [x[rng.integers(x.size)]]
    for _ in range(1, K):
        d2 = np.min((x[:, None] - np.array(centers)[None]) ** 2, axis=1)
        total = d2.sum()
        centers.append(x[rng.choice(x.size, p=d2 / total)] if total > 0 else x[rng.integers(x.size)])
    centers = np.array(centers)
    for _ in range(max_iter):
        labels = np.argmin(np.abs(x[:, None] - centers[None]), axis=1)
        new = np.array([x[labels == k].mean() if np.any(labels == k) else centers[k]
                        for k in range(K)])
        shift = np.abs(new - centers).max()
        centers = new
        if shift < tol:
            break
    labels = np.argmin(np.abs(x[:, None] - centers[None]), axis=1)
    order = np.argsort(centers, kind="stable")
    remap = np.empty(K, dtype=int)
    remap[order] = np.arange(K)
    means = np.array([x[labels == k].mean() if np.any(labels == k) else centers[k] for k in order])
    return remap[labels], means


# -- grid files ---------------------------------------------------------------

def grid_write(path, grid):
    grid.validate()
    nx, ny, nz = grid.values.shape
    header = _HEADER.pack(GRID_MAGIC, GRID_VERSION, nx, ny, nz,
                          *[float(v) for v in grid.center], grid.side)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(grid.values, dtype="<f4").tobytes())


def grid_read(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, nx, ny, nz, cx, cy, cz, side = _HEADER.unpack_from(blob)
    if magic != GRID_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != GRID_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    count = nx * ny * nz
    if len(blob) != _HEADER.size + 4 * count:
        raise FormatError(f"{path}: payload size mismatch")
    vals = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size, count=count)
    grid = DensityGrid(vals.reshape(nx, ny, nz).astype(np.float64), (cx, cy, cz), side)
    return grid.validate()


def grid_file_size(n):
    return _HEADER.size + 4 * n ** 3


# -- dataset manifests --------------------------------------------------------

@dataclass
class ManifestEntry:
    category: str
    seed: int
    path: str
    R_gt: np.ndarray


@dataclass
class DatasetManifest:
    entries: list
    params: dict = field(default_factory=dict)
    root: str = "."

    def write(self, path):
        head = " ".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        lines = [f"# {DATASET_VERSION} {head}".rstrip()]
        for e in self.entries:
            rot = " ".join(repr(float(v)) for v in np.asarray(e.R_gt).ravel())
            lines.append(f"{e.category} {e.seed} {e.path} {rot}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
        if not lines or not lines[0].startswith(f"# {DATASET_VERSION}"):
            raise FormatError(f"{path}: not a {DATASET_VERSION} manifest")
        params = dict(tok.split("=", 1) for tok in lines[0].split()[2:])
        entries = []
        for ln in lines[1:]:
            parts = ln.split()
            if len(parts) != 12:
                raise FormatError(f"{path}: malformed entry {ln!r}")
            entries.append(ManifestEntry(parts[0], int(parts[1]), parts[2],
                                         np.array([float(v) for v in parts[3:]]).reshape(3, 3)))
        return cls(entries, params, os.path.dirname(os.path.abspath(path)))

    def provider(self, entry, source="synthetic", d=DEFAULT_DEPTH_STEP):
        """Regenerate the analytic provider, or load the stored scene grid."""
        if source == "grid":
            return GridProvider(grid_read(os.path.join(self.root, entry.path)), d)
        _, prov = synth_generate(entry.category, entry.seed,
                                 float(self.params.get("clutter", 0.0)),
                                 float(self.params.get("noise", 0.0)))
        return prov

    def instance(self, entry):
        inst, _ = synth_generate(entry.category, entry.seed,
                                 float(self.params.get("clutter", 0.0)),
                                 float(self.params.get("noise", 0.0)))
        return inst


# -- local averaging (analytic) -----------------------------------------------

def ball_quadrature(r, n_r=8, n_theta=8, n_phi=16):
    """Nodes and weights for the mean over a ball of radius ``r``."""
    t, wt = np.polynomial.legendre.leggauss(n_r)
    rad = 0.5 * r * (t + 1)
    wr = 0.5 * r * wt * rad ** 2
    dirs, wd = so3.sh_quadrature(n_theta, n_phi)
    nodes = (rad[:, None, None] * dirs[None]).reshape(-1, 3)
    w = (wr[:, None] * wd[None]).ravel()
    return nodes, w / w.sum()


def ball_mean(fn, x, r, quad=None):
    """Mean of ``fn`` over B(x, r) for each row of ``x``; ``fn`` may return
    scalars (N,) or vectors (N, p)."""
    nodes, w = ball_quadrature(r) if quad is None else quad
    x = np.atleast_2d(x)
    pts = (x[:, None, :] + nodes[None]).reshape(-1, 3)
    vals = np.asarray(fn(pts))
    vals = vals.reshape(x.shape[0], nodes.shape[0], *vals.shape[1:])
    return np.tensordot(w, vals, axes=([0], [1]))
