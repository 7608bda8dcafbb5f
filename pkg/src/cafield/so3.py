"""Real spherical harmonics, Wigner matrices, Clebsch-Gordan projections and
small rotation utilities.

Convention
----------
Orthonormal real harmonics without the Condon-Shortley phase, ordered
m = -l..l::

    Y_lm = K_lm * P_l^|m|(z) * Im((x + iy)^|m|)   m < 0
    Y_l0 = K_l0 * P_l(z)
    Y_lm = K_lm * P_l^m(z)  * Re((x + iy)^m)     m > 0

where ``P_l^m`` is the m-th derivative of the Legendre polynomial. For l = 1
this gives ``Y_1 = sqrt(3/4pi) * (y, z, x)``, so a Cartesian vector ``v`` has
type-1 coordinates ``XYZ_TO_SH @ v`` and ``D^1(R) = XYZ_TO_SH R XYZ_TO_SH^T``.
"""
from __future__ import annotations

import functools
import math

import numpy as np

L_MAX_SUPPORTED = 3
_INTERNAL_L_MAX = 2 * L_MAX_SUPPORTED

XYZ_TO_SH = np.array([[0.0, 1.0, 0.0],
                      [0.0, 0.0, 1.0],
                      [1.0, 0.0, 0.0]])

_FAULTS = set()


class RotationError(ValueError):
    pass


class SamplingError(ValueError):
    pass


def inject_fault(name, active=True):
    """Test hook for mutation checks; ``"wigner_sign"`` negates D^1."""
    (_FAULTS.add if active else _FAULTS.discard)(name)


def clear_faults():
    _FAULTS.clear()


# -- harmonics ----------------------------------------------------------------

def _reduced_legendre(l, m, z):
    # m-th derivative of P_l at z, by upward recursion in l
    pmm = np.full_like(z, float(np.prod(np.arange(1, 2 * m, 2))) if m > 0 else 1.0)
    if l == m:
        return pmm
    p1 = (2 * m + 1) * z * pmm
    if l == m + 1:
        return p1
    p0 = pmm
    for ll in range(m + 2, l + 1):
        p0, p1 = p1, ((2 * ll - 1) * z * p1 - (ll + m - 1) * p0) / (ll - m)
    return p1


def _sh_unchecked(l, dirs):
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out = np.empty((dirs.shape[0], 2 * l + 1))
    c = np.ones_like(x)
    s = np.zeros_like(x)
    trig = [(c, s)]
    for _ in range(l):
        c, s = c * x - s * y, s * x + c * y
        trig.append((c, s))
    for m in range(0, l + 1):
        p = _reduced_legendre(l, m, z)
        k = math.sqrt((2 * l + 1) / (4 * math.pi) * math.factorial(l - m) / math.factorial(l + m))
        if m == 0:
            out[:, l] = k * p
        else:
            k *= math.sqrt(2.0)
            out[:, l + m] = k * p * trig[m][0]
            out[:, l - m] = k * p * trig[m][1]
    return out


def eval_real_sh(l, dirs, tol=1e-9):
    """Real harmonics of degree ``l`` at unit directions, shape (N, 2l+1)."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    if l < 0 or l > _INTERNAL_L_MAX:
        raise ValueError(f"degree {l} outside 0..{_INTERNAL_L_MAX}")
    norms = np.linalg.norm(dirs, axis=1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise ValueError("eval_real_sh expects unit directions")
    return _sh_unchecked(l, dirs)


def sh_stack(l_max, dirs):
    """All degrees 0..l_max concatenated, shape (N, (l_max+1)^2)."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    return np.concatenate([_sh_unchecked(l, dirs) for l in range(l_max + 1)], axis=1)


def solid_sh(l, x):
    """``|x| * Y_l(x/|x|)``; zero at the origin. Accepts (3,) or (N, 3)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    r = np.linalg.norm(x, axis=1)
    safe = np.where(r > 0, r, 1.0)
    out = _sh_unchecked(l, x / safe[:, None]) * r[:, None]
    out[r == 0] = 0.0
    return out[0] if single else out


# -- rotations ----------------------------------------------------------------

def check_rotation(R, tol=1e-9):
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise RotationError("rotation must be a finite 3x3 matrix")
    if np.abs(R.T @ R - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise RotationError("matrix is not in SO(3)")
    return R


def quaternion_to_matrix(q):
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def random_rotation(rng):
    """Haar-uniform rotation from a normalized Gaussian quaternion."""
    q = rng.standard_normal(4)
    while np.linalg.norm(q) < 1e-12:
        q = rng.standard_normal(4)
    return quaternion_to_matrix(q)


def axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K


def rotation_angle(R1, R2):
    """Geodesic angle between two rotations, radians."""
    c = (np.trace(R1.T @ R2) - 1.0) / 2.0
    return float(math.acos(min(1.0, max(-1.0, c))))


def fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = math.pi * (1.0 + math.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


@functools.lru_cache(maxsize=None)
def _fit_basis(l):
    dirs = fibonacci_sphere(4 * (2 * l + 1) + 8)
    Y = _sh_unchecked(l, dirs)
    return dirs, np.linalg.pinv(Y)


def wigner_d(l, R):
    """Orthogonal ``D`` with ``Y_l(R x) = D Y_l(x)`` in the real basis.

    Solved by least squares from harmonics evaluated on a fixed
    over-determined direction set before and after rotation.
    """
    R = check_rotation(R)
    if l == 0:
        return np.ones((1, 1))
    dirs, pinv = _fit_basis(l)
    D = (pinv @ _sh_unchecked(l, dirs @ R.T)).T
    if l == 1 and "wigner_sign" in _FAULTS:
        D = -D
    return D


def wigner_blocks(l_max, R):
    return [wigner_d(l, R) for l in range(l_max + 1)]


def sh_quadrature(n_theta=16, n_phi=32):
    """Gauss-Legendre x trapezoid product rule on S^2; weights sum to 4 pi.
    Exact for harmonics of total degree < min(2 n_theta, n_phi)."""
    t, wt = np.polynomial.legendre.leggauss(n_theta)
    phi = 2 * math.pi * np.arange(n_phi) / n_phi
    st = np.sqrt(1 - t * t)
    dirs = np.stack([np.outer(st, np.cos(phi)).ravel(),
                     np.outer(st, np.sin(phi)).ravel(),
                     np.repeat(t, n_phi)], axis=1)
    w = np.repeat(wt, n_phi) * (2 * math.pi / n_phi)
    return dirs, w


# -- Clebsch-Gordan -----------------------------------------------------------

def cg_admissible(n, l, J):
    return abs(n - l) <= J <= n + l


@functools.lru_cache(maxsize=None)
def _cg_matrix(n, l, J):
    # Intertwiner Q with Q (D^n kron D^l) = D^J Q, found as the null space of
    # the commutation constraint for two generic rotations.
    rng = np.random.default_rng(1234 + 100 * n + 10 * l + J)
    dn, dl, dJ = 2 * n + 1, 2 * l + 1, 2 * J + 1
    din = dn * dl
    rows = []
    for _ in range(2):
        R = random_rotation(rng)
        A = np.kron(_wigner_any(n, R), _wigner_any(l, R))
        B = _wigner_any(J, R)
        rows.append(np.kron(np.eye(dJ), A.T) - np.kron(B, np.eye(din)))
    _, s, vt = np.linalg.svd(np.vstack(rows))
    if s[-1] > 1e-8 or (len(s) > 1 and s[-2] < 1e-6):
        raise ArithmeticError(f"CG null space for {(n, l, J)} is not one-dimensional")
    Q = vt[-1].reshape(dJ, din)
    Q *= math.sqrt(dJ) / np.linalg.norm(Q)
    flat = Q.reshape(-1)
    pivot = int(np.argmax(np.abs(flat) > np.abs(flat).max() - 1e-9))
    if flat[pivot] < 0:
        Q = -Q
    Q[np.abs(Q) < 1e-13] = 0.0
    Q.setflags(write=False)
    return Q


def _wigner_any(l, R):
    if l == 0:
        return np.ones((1, 1))
    dirs, pinv = _fit_basis(l)
    return (pinv @ _sh_unchecked(l, dirs @ R.T)).T


def cg_matrix(n, l, J):
    """(2J+1) x ((2n+1)(2l+1)) projection with orthonormal rows; columns are
    indexed ``a * (2l+1) + b`` for the Kronecker product ``a (x) b``."""
    if not cg_admissible(n, l, J) or min(n, l, J) < 0 or max(n, l) > L_MAX_SUPPORTED:
        raise ValueError(f"inadmissible Clebsch-Gordan triple {(n, l, J)}")
    return _cg_matrix(n, l, J)


class CGTable:
    """Lazily built cache of projections for degrees up to ``l_max``."""

    def __init__(self, l_max=3):
        if not 0 <= l_max <= L_MAX_SUPPORTED:
            raise ValueError(f"l_max must be in 0..{L_MAX_SUPPORTED}")
        self.l_max = l_max

    def __getitem__(self, key):
        return cg_matrix(*key)

    def triples(self, j_max=None):
        j_max = self.l_max if j_max is None else j_max
        return [(n, l, J) for n in range(self.l_max + 1) for l in range(self.l_max + 1)
                for J in range(j_max + 1) if cg_admissible(n, l, J)]


def cg_project(table, n, l, J, a, b):
    Q = table[(n, l, J)]
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != (2 * n + 1,) or b.shape != (2 * l + 1,):
        raise ValueError("operand sizes do not match the degrees")
    return Q @ np.kron(a, b)


# -- sphere sampling ----------------------------------------------------------

class SphereSampling:
    """Fixed sample directions with forward (samples -> coefficients) and
    inverse (coefficients -> samples) harmonic transforms up to ``l_max``."""

    def __init__(self, l_max=3, n_samples=64, dirs=None):
        self.l_max = l_max
        self.dirs = fibonacci_sphere(n_samples) if dirs is None else np.asarray(dirs, float)
        self.inverse_matrix = sh_stack(l_max, self.dirs)           # (S, C)
        if np.linalg.matrix_rank(self.inverse_matrix) < (l_max + 1) ** 2:
            raise SamplingError("sample directions do not resolve all harmonics")
        self.forward_matrix = np.linalg.pinv(self.inverse_matrix)  # (C, S)

    @property
    def n_samples(self):
        return self.dirs.shape[0]

    def forward(self, signal):
        """Least-squares coefficients for samples along axis 0."""
        return self.forward_matrix @ np.asarray(signal, dtype=np.float64)

    def inverse(self, coeffs):
        return self.inverse_matrix @ np.asarray(coeffs, dtype=np.float64)


# -- 3x3 SVD ------------------------------------------------------------------

def svd3(M):
    """``M = U diag(S) V^T`` with S descending and non-negative."""
    M = np.asarray(M, dtype=np.float64)
    U, S, Vt = np.linalg.svd(M)
    return U, S, Vt.T


def nearest_rotation(M):
    """Project onto SO(3) via SVD, flipping U's last column if det < 0."""
    U, _, V = svd3(M)
    if np.linalg.det(U @ V.T) < 0:
        U = U.copy()
        U[:, -1] *= -1
    return U @ V.T
