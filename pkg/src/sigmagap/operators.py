"""Discretized operator layer: the field-coupling operator A and its blocks.

The central object is A = P_Lambda F g tau P_Lambda with F the regulated
propagator: kernel A(x,y) = F(x-y) g tau(y) on the midpoint discretization
sites of the volume.  Operators are stored as integral kernels plus site
quadrature weights; all algebra (composition, traces, determinants, norms)
is carried out on the weighted matrix W^{1/2} K W^{1/2}, which has the same
spectrum as the operator acting on L^2 of the site measure.

The determinant identities tested here (factorization across the s/l block
split, the single-determinant rewriting, and |det^{-1}(1+B)| =
det^{-1/2}(1+B+B*+B*B)) are exact matrix algebra, so their residuals probe
only floating-point conditioning, not discretization error.
"""

import dataclasses
import functools
import math

import numpy as np

from .kernels import propagator_values
from .regions import classify_squares

__all__ = [
    "DiscretizedOperator", "AOperator", "site_coordinates", "site_square_labels",
    "propagator_matrix", "build_A", "operator_norm", "det_reg",
    "det_split_identity", "D_decomposition", "trace_projection_inequality",
    "link_block", "derived_link_norm",
]


@dataclasses.dataclass
class DiscretizedOperator:
    """An integral kernel sampled on discretization sites.

    matrix[x, y] holds the kernel value; site_weights are the quadrature
    weights, so the operator action is (K phi)(x) = sum_y matrix[x,y] w_y
    phi(y) and composition is (AB) = A . diag(w) . B.
    """

    matrix: np.ndarray
    site_weights: np.ndarray
    support_mask: np.ndarray = None
    hermitian_kernel: bool = False

    def __post_init__(self):
        nsite = self.matrix.shape[0]
        if self.matrix.shape != (nsite, nsite):
            raise ValueError("matrix must be square")
        if self.site_weights.shape != (nsite,):
            raise ValueError("site_weights length must match matrix dimension")
        if np.any(self.site_weights <= 0):
            raise ValueError("site_weights must be positive")

    @functools.cached_property
    def weighted(self):
        """W^{1/2} K W^{1/2}: same spectrum as the operator, Hermitian iff
        the kernel is."""
        sw = np.sqrt(self.site_weights)
        return sw[:, None] * self.matrix * sw[None, :]

    def compose(self, other):
        if self.matrix.shape != other.matrix.shape:
            raise ValueError("dimension mismatch in composition")
        prod = (self.matrix * self.site_weights[None, :]) @ other.matrix
        return DiscretizedOperator(prod, self.site_weights)

    def trace(self):
        return np.sum(np.diagonal(self.matrix) * self.site_weights)

    def eigenvalues(self):
        if self.hermitian_kernel:
            return np.linalg.eigvalsh(self.weighted)
        return np.linalg.eigvals(self.weighted)

    def masked(self, left_mask=None, right_mask=None):
        """P_left K P_right with diagonal projector masks (bool per site)."""
        mat = self.matrix
        if left_mask is not None:
            mat = mat * left_mask[:, None]
        if right_mask is not None:
            mat = mat * right_mask[None, :]
        return DiscretizedOperator(mat, self.site_weights)


def site_coordinates(geometry):
    """(nsite, 2) coordinates, flat index = ix * side + iy."""
    x = geometry.site_coordinates()
    xx, yy = np.meshgrid(x, x, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


def site_square_labels(geometry, assignment):
    """Per-site copy of the per-square s/l labels (0 = s, n >= 1 = l^n)."""
    s = geometry.sites_per_square
    side = geometry.sites_per_side
    labels = np.asarray(assignment.labels).reshape(2 * geometry.n, 2 * geometry.n)
    return np.repeat(np.repeat(labels, s, axis=0), s, axis=1).reshape(side * side)


def site_square_mask(geometry, corner):
    """Boolean site mask of one unit square given its lower-left corner."""
    s = geometry.sites_per_square
    side = geometry.sites_per_side
    bi, bj = corner[0] + geometry.n, corner[1] + geometry.n
    mask = np.zeros((side, side), dtype=bool)
    mask[bi * s:(bi + 1) * s, bj * s:(bj + 1) * s] = True
    return mask.reshape(side * side)


@functools.lru_cache(maxsize=8)
def _propagator_matrix_cached(n, sites_per_square, m_key):
    m = float(m_key)
    side = 2 * n * sites_per_square
    # all site-pair offsets share the subgrid spacing 1/s
    d = np.arange(side)
    d2 = (d[:, None] ** 2 + d[None, :] ** 2).ravel()
    uniq, inv = np.unique(d2, return_inverse=True)
    vals = propagator_values(m * m, np.sqrt(uniq) / sites_per_square)
    block = vals[inv].reshape(side, side)

    idx = np.arange(side)
    di = np.abs(idx[:, None] - idx[None, :])
    # full[ix, iy, jx, jy] = block[|ix-jx|, |iy-jy|]
    full = block[di[:, None, :, None], di[None, :, None, :]]
    nsite = side * side
    return full.reshape(nsite, nsite)


def propagator_matrix(geometry, m):
    """Symmetric matrix of exact propagator values F(|x_i - x_j|) over the
    discretization sites (positive definite: samples of a PD function)."""
    return _propagator_matrix_cached(geometry.n, geometry.sites_per_square,
                                     round(float(m), 12))


@functools.lru_cache(maxsize=8)
def _propagator_sqrt_cached(n, sites_per_square, m_key):
    from .regions import LatticeGeometry
    geo = LatticeGeometry(n=n, sites_per_square=sites_per_square)
    sf = propagator_matrix(geo, float(m_key)) * geo.site_weight
    ev, vec = np.linalg.eigh(sf)
    return (vec * np.sqrt(np.clip(ev, 0.0, None))) @ vec.T


def propagator_sqrt(geometry, m):
    """F^{1/2} in the weighted representation (W^{1/2} F W^{1/2})^{1/2}."""
    return _propagator_sqrt_cached(geometry.n, geometry.sites_per_square,
                                   round(float(m), 12))


@dataclasses.dataclass
class AOperator:
    """A = F g tau with its small/large-field block structure."""

    op: DiscretizedOperator
    small_sites: np.ndarray
    geometry: object

    @property
    def large_sites(self):
        return ~self.small_sites

    @property
    def a_s(self):
        return self.op.masked(self.small_sites, self.small_sites)

    @property
    def a_l(self):
        return self.op.masked(self.large_sites, self.large_sites)

    @property
    def a_prime(self):
        mat = (self.op.masked(self.small_sites, self.large_sites).matrix
               + self.op.masked(self.large_sites, self.small_sites).matrix)
        return DiscretizedOperator(mat, self.op.site_weights)

    @property
    def a_doubleprime(self):
        mat = self.op.matrix - self.a_s.matrix
        return DiscretizedOperator(mat, self.op.site_weights)


def build_A(field, params, geometry=None, kernel=None, assignment=None,
            symmetrize=False):
    """Assemble A(x,y) = F(x-y) g tau(y) on the site grid.

    With kernel=None the propagator is evaluated exactly at every site
    separation (cached per geometry and mass); passing a SampledKernel uses
    its interpolant instead.  With symmetrize=True the self-adjoint form
    F^{1/2} g tau F^{1/2} is built instead: it has the same spectrum and
    determinants, and is the representation in which the quadratic-form
    bounds on D = B + B* + B*B hold (they need A'' = A''*).
    """
    geometry = geometry or field.geometry
    side = geometry.sites_per_side
    if field.tau.shape != (side, side):
        raise ValueError("field grid does not match geometry")
    tau = field.tau.reshape(side * side)
    w = np.full(side * side, geometry.site_weight)
    if symmetrize:
        if kernel is not None:
            raise ValueError("symmetrize requires the exact kernel route")
        sq = propagator_sqrt(geometry, params.m)
        sw = np.sqrt(w)
        weighted = sq @ ((params.g * tau)[:, None] * sq)
        mat = weighted / sw[:, None] / sw[None, :]
    else:
        if kernel is None:
            fmat = propagator_matrix(geometry, params.m)
        else:
            coords = site_coordinates(geometry)
            diff = coords[:, None, :] - coords[None, :, :]
            fmat = kernel.eval_at(np.hypot(diff[..., 0], diff[..., 1]))
        mat = fmat * (params.g * tau)[None, :]
    if assignment is None:
        assignment = classify_squares(field, params, geometry)
    small = site_square_labels(geometry, assignment) == 0
    return AOperator(DiscretizedOperator(mat, w), small, geometry)


def operator_norm(op, seed=0, tol=1e-10, maxiter=10000):
    """Largest singular value of the weighted matrix via power iteration
    on S*S, with a seeded start vector; deterministic."""
    s = op.weighted if isinstance(op, DiscretizedOperator) else np.asarray(op)
    rng = np.random.default_rng(seed)
    v = rng.normal(size=s.shape[1]) + 1j * rng.normal(size=s.shape[1])
    v /= np.linalg.norm(v)
    sh = s.conj().T
    prev = 0.0
    for _ in range(maxiter):
        u = sh @ (s @ v)
        sigma2 = np.linalg.norm(u)
        if sigma2 == 0.0:
            return 0.0
        v = u / sigma2
        if abs(sigma2 - prev) <= 0.5 * tol * sigma2:
            return math.sqrt(sigma2)
        prev = sigma2
    raise ArithmeticError("power iteration did not converge")


def det_reg(op, order=1):
    """Regularized Fredholm determinant det_n(1 + K) from the eigenvalues:
    det(1+K) exp(-TrK + TrK^2/2 - ... +- TrK^{n-1}/(n-1))."""
    if order < 1:
        raise ValueError("order must be >= 1")
    lam = op.eigenvalues() if isinstance(op, DiscretizedOperator) \
        else np.linalg.eigvals(op)
    if np.min(np.abs(1.0 + lam)) < 1e-12:
        raise ArithmeticError("1 + K has an eigenvalue at 0")
    lam = lam.astype(complex)
    log_det = np.sum(np.log(1.0 + lam))
    for j in range(1, order):
        log_det += (-1.0) ** j * np.sum(lam ** j) / j
    return complex(np.exp(log_det))


def _logdet(mat):
    lam = np.linalg.eigvals(mat)
    if np.min(np.abs(1.0 + lam)) < 1e-12:
        raise ArithmeticError("singular 1 + K")
    return np.sum(np.log(1.0 + lam)), lam


def det_split_identity(field, params, geometry=None, kernel=None):
    """Residuals of the determinant factorization and its single-determinant
    rewriting, evaluated on log scale.

    identity 1:  det^{-1}(1+iA) = det^{-1}(1+iA_s) det^{-1}(1+B),
                 B = (1+iA_s)^{-1} iA''
    identity 2:  det_3^{-1}(1+iA_s) det_2^{-1}(1+B)
                 = det_2^{-1}(1+iA) exp Tr{-(1/2)(iA_s)^2}
    Returns the max relative residual of the two (both are exact matrix
    algebra; the residual probes conditioning only).
    """
    aop = build_A(field, params, geometry, kernel)
    A = aop.op.weighted
    As = aop.a_s.weighted
    App = aop.a_doubleprime.weighted
    n = A.shape[0]
    eye = np.eye(n)
    B = np.linalg.solve(eye + 1j * As, 1j * App)

    log_a, _ = _logdet(1j * A)
    log_as, lam_s = _logdet(1j * As)
    log_b, lam_b = _logdet(B)
    res1 = abs(-log_a - (-log_as - log_b))

    # det_3^{-1}(1+iAs) det_2^{-1}(1+B) on log scale
    tr_ias = 1j * np.trace(As)
    tr_ias2 = np.trace((1j * As) @ (1j * As))
    lhs = -(log_as - tr_ias + 0.5 * tr_ias2) - (log_b - np.trace(B))
    rhs = -(log_a - 1j * np.trace(A)) - 0.5 * tr_ias2
    res2 = abs(lhs - rhs)
    scale = max(1.0, abs(log_a))
    return float(max(res1, res2) / scale)


def D_decomposition(field, params, geometry=None, kernel=None):
    """Spectral split of D = B + B* + B*B into D_+ - D_-.

    Returns (||D_+||, ||D_-||, Tr D_-^2).  When the small-field norm bound
    holds, D_- is tiny: (phi, D phi) >= -(4/25) eta^2/(1-eta) with
    eta ~ 2||A_s||.  Uses the self-adjoint representation of A (see
    build_A), which the quadratic-form argument requires.
    """
    aop = build_A(field, params, geometry, kernel, symmetrize=True)
    As = aop.a_s.weighted
    App = aop.a_doubleprime.weighted
    n = As.shape[0]
    B = np.linalg.solve(np.eye(n) + 1j * As, 1j * App)
    D = B + B.conj().T + B.conj().T @ B
    D = 0.5 * (D + D.conj().T)
    ev, _ = np.linalg.eigh(D)
    d_plus = max(float(ev.max()), 0.0)
    d_minus = max(float(-ev.min()), 0.0)
    tr_minus_sq = float(np.sum(ev[ev < 0] ** 2))
    return d_plus, d_minus, tr_minus_sq


def trace_projection_inequality(op, mask, r):
    """(Tr (PAP)^r, Tr P A^r P) for Hermitian PSD A and diagonal projector
    mask; the first never exceeds the second."""
    if r < 1:
        raise ValueError("r must be >= 1")
    a = op.weighted if isinstance(op, DiscretizedOperator) else np.asarray(op)
    p = np.asarray(mask, dtype=bool)
    pap = a * p[:, None] * p[None, :]
    lhs = float(np.trace(np.linalg.matrix_power(pap, r)).real)
    ar = np.linalg.matrix_power(a, r)
    rhs = float(np.trace(ar[p][:, p]).real)
    return lhs, rhs


def link_block(aop, src_square, dst_square):
    """P_{dst} A P_{src}, the derivative of A with respect to the cluster
    interpolation parameter of the link (src -> dst)."""
    src = site_square_mask(aop.geometry, src_square)
    dst = site_square_mask(aop.geometry, dst_square)
    return aop.op.masked(dst, src)


def derived_link_norm(field, params, geometry=None, kernel=None,
                      square_pair=None):
    """Operator norm of the single-link block P_{Delta'} A P_{Delta}."""
    if square_pair is None:
        raise ValueError("square_pair is required")
    src, dst = square_pair
    if src == dst:
        raise ValueError("link squares must differ")
    aop = build_A(field, params, geometry, kernel)
    return operator_norm(link_block(aop, src, dst))
