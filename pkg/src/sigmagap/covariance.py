"""Reference and configuration-dependent Gaussian covariances.

The reference covariance is C0 = (1+pi)^{-1/2} (1+f)^{-1} (1+pi)^{-1/2},
built here as a matrix product of the discretized kernels.  Around a
large-field region gamma the quadratic form is opened up,

    C_gamma^{-1} = sqrt(1+pi) (1 - (1-eps) P_gamma + f) sqrt(1+pi),

with a floor eps on the gamma block so the inverse stays bounded.  The
module assembles C_gamma twice (direct inversion and the Neumann series in
the gamma-restricted kernel chain), the normalization Z_gamma with its
component factorization, the four correction terms deltaC_1..deltaC_4 of
the small/large splitting, and a seeded Gaussian sampler.

Grids: region bookkeeping lives on the inner lattice covering Lambda; the
covariance kernels are assembled on a padded grid (pad extra unit squares
per side) so that the belt around Lambda is actually represented.  All
operators returned here live on the padded grid; ``embed_tau`` maps an
inner-field configuration into it.

A note on the sharp splitting identity: with P_s + P_l = P_Lambda the
difference C_gamma^{-1} - C_ls^{-1} equals
deltaC - P_l - (1 - P_Lambda); the final term is invisible when the
quadratic forms are compared on fields supported in Lambda, but on the
padded grid it must be carried explicitly, and ``build_deltaC`` verifies
the identity in that form to machine precision.
"""

import dataclasses
import functools
from types import SimpleNamespace

import numpy as np
import scipy.linalg

from .kernels import cutoff_enforced_values, cutoff_inverse_values
from .operators import (DiscretizedOperator, build_A, propagator_matrix,
                        site_square_mask)
from .regions import (FieldConfig, LatticeGeometry, classify_squares,
                      smooth_step)


# ---------------------------------------------------------------------------
# grid plumbing

def padded_geometry(geometry, pad):
    if pad < 0:
        raise ValueError("pad must be >= 0")
    return LatticeGeometry(n=geometry.n + pad,
                           sites_per_square=geometry.sites_per_square)


def region_site_mask(geometry, corners):
    """Union of the site masks of the given unit squares, silently dropping
    squares that fall outside the grid."""
    nsite = geometry.sites_per_side ** 2
    mask = np.zeros(nsite, dtype=bool)
    for c in corners:
        if -geometry.n <= c[0] < geometry.n and -geometry.n <= c[1] < geometry.n:
            mask |= site_square_mask(geometry, c)
    return mask


def inner_site_mask(grid, geometry):
    """Sites of the padded grid that belong to the inner lattice (Lambda)."""
    s = grid.sites_per_square
    off = (grid.n - geometry.n) * s
    side = grid.sites_per_side
    inner = geometry.sites_per_side
    mask = np.zeros((side, side), dtype=bool)
    mask[off:off + inner, off:off + inner] = True
    return mask.reshape(side * side)


def embed_tau(field, grid):
    """Zero-extend an inner-lattice field onto the padded grid (flat)."""
    s = grid.sites_per_square
    off = (grid.n - field.geometry.n) * s
    side = grid.sites_per_side
    inner = field.geometry.sites_per_side
    out = np.zeros((side, side))
    out[off:off + inner, off:off + inner] = field.tau
    return out.reshape(side * side)


# ---------------------------------------------------------------------------
# cached kernel assembly

@functools.lru_cache(maxsize=4)
def _cutoff_matrix_cached(n, sites_per_square, c_key, enforced):
    """Weighted-representation matrix of the kernel of 1/(1+f)."""
    geo = LatticeGeometry(n=n, sites_per_square=sites_per_square)
    nsite = geo.sites_per_side ** 2
    c = float(c_key)
    if c == 0.0:
        return np.eye(nsite)
    side = geo.sites_per_side
    d = np.arange(side)
    d2 = (d[:, None] ** 2 + d[None, :] ** 2).ravel()
    uniq, inv = np.unique(d2, return_inverse=True)
    func = cutoff_enforced_values if enforced else cutoff_inverse_values
    vals = func(c, np.sqrt(uniq) / sites_per_square)
    block = vals[inv].reshape(side, side)
    idx = np.arange(side)
    di = np.abs(idx[:, None] - idx[None, :])
    full = block[di[:, None, :, None], di[None, :, None, :]]
    return full.reshape(nsite, nsite) * geo.site_weight


@functools.lru_cache(maxsize=4)
def _assembly_cached(n, sites_per_square, m_key, lamK_key, c_key, enforced):
    geo = LatticeGeometry(n=n, sites_per_square=sites_per_square)
    nsite = geo.sites_per_side ** 2
    w = geo.site_weight
    lamK = float(lamK_key)
    if lamK == 0.0:
        pi_w = np.zeros((nsite, nsite))
        s_plus = np.eye(nsite)
        s_minus = np.eye(nsite)
    else:
        fmat = propagator_matrix(geo, float(m_key))
        # entrywise square of a pd function is pd, so pi_w is exactly PSD
        pi_w = 0.5 * lamK * fmat * fmat * w
        ev, vec = np.linalg.eigh(np.eye(nsite) + pi_w)
        if ev.min() <= 0.0:
            raise ArithmeticError("1 + pi lost positivity on the grid")
        s_plus = (vec * np.sqrt(ev)) @ vec.T
        s_minus = (vec / np.sqrt(ev)) @ vec.T
    u_w = _cutoff_matrix_cached(n, sites_per_square, c_key, enforced)
    if float(c_key) == 0.0:
        uinv_w = np.eye(nsite)
    else:
        try:
            cf = scipy.linalg.cho_factor(u_w)
        except np.linalg.LinAlgError as exc:
            raise ArithmeticError(
                "cutoff kernel not positive definite: grid too coarse"
            ) from exc
        uinv_w = scipy.linalg.cho_solve(cf, np.eye(nsite))
        uinv_w = 0.5 * (uinv_w + uinv_w.T)
    c0_w = s_minus @ u_w @ s_minus
    return SimpleNamespace(geo=geo, nsite=nsite, w=w, pi_w=pi_w,
                           s_plus=s_plus, s_minus=s_minus,
                           u_w=u_w, uinv_w=uinv_w, c0_w=c0_w)


def _assembly(params, geometry, cutoff, pad, enforced, include_polarization):
    grid = padded_geometry(geometry, pad)
    lamK = params.lam * params.bigK if include_polarization else 0.0
    return _assembly_cached(grid.n, grid.sites_per_square,
                            round(float(params.m), 12), round(lamK, 12),
                            round(float(cutoff.c), 12), bool(enforced))


def _as_operator(weighted, w):
    nsite = weighted.shape[0]
    return DiscretizedOperator(weighted / w, np.full(nsite, w),
                               hermitian_kernel=True)


# ---------------------------------------------------------------------------
# C0 and C_gamma

def build_C0(params, geometry, cutoff, pad=0, enforced=True,
             include_polarization=True):
    """C0 = (1+pi)^{-1/2} (1+f)^{-1} (1+pi)^{-1/2} on the (padded) grid.

    Symmetric positive definite by construction; raises ArithmeticError
    when either kernel loses positivity under discretization.  With
    include_polarization=False and a zero cutoff this degenerates to the
    identity operator (delta kernel)."""
    asm = _assembly(params, geometry, cutoff, pad, enforced,
                    include_polarization)
    return _as_operator(asm.c0_w, asm.w)


@dataclasses.dataclass
class CovarianceSet:
    """C0, C_gamma, the total and per-component corrections, and the grid
    bookkeeping needed by the normalization and splitting routines."""

    C0: DiscretizedOperator
    Cgamma: DiscretizedOperator
    Cgamma_correction: DiscretizedOperator
    component_corrections: list
    component_masks: list
    gamma_mask: np.ndarray
    grid: LatticeGeometry
    geometry: LatticeGeometry
    route_residual: float
    neumann_terms: int
    enforced: bool
    epsilon: float
    cutoff_weighted: np.ndarray
    Zgamma: float = None
    deltaC: tuple = None


def _neumann_correction(asm, mask, eps, tol, max_terms=4000):
    """C^{gamma_i} by the truncated series in the gamma-restricted chain.

    Every term of sum_r [U P (1-eps)]^r with r >= 1 enters and leaves
    through the columns of gamma_i, so the series is summed as a power
    series of the (1-eps) U[gamma,gamma] block and widened back afterwards;
    the truncation is at relative tail tol in Frobenius norm."""
    idx = np.flatnonzero(mask)
    y = (1.0 - eps) * asm.u_w[np.ix_(idx, idx)]
    acc = np.eye(len(idx))
    term = np.eye(len(idx))
    for terms in range(1, max_terms + 1):
        term = y @ term
        acc += term
        if np.linalg.norm(term) <= tol * np.linalg.norm(acc):
            break
    else:
        raise ArithmeticError("Neumann series did not reach the tail target")
    # C^{gamma_i} = S^- U[:,g] (1-eps) (sum_j Y^j) U[g,:] S^-
    corr = (asm.s_minus @ asm.u_w[:, idx]) @ ((1.0 - eps) * acc) \
        @ (asm.u_w[idx, :] @ asm.s_minus)
    return corr, terms


def build_Cgamma(params, geometry, cutoff, regions, pad=2, enforced=True,
                 include_polarization=True, neumann_tol=1e-12,
                 agree_tol=1e-8, routes="both"):
    """Assemble C_gamma on the padded grid by two routes.

    Direct: Cholesky inversion of (1-eps)-floored quadratic form.  Series:
    C0 plus the per-component corrections C^{gamma_i} summed as truncated
    Neumann chains.  The sup-entry disagreement of the two routes is
    recorded and must stay below agree_tol; routes="direct" skips the
    series (used on large grids where only the direct value is needed)."""
    asm = _assembly(params, geometry, cutoff, pad, enforced,
                    include_polarization)
    eps = params.epsilon
    gmask = region_site_mask(asm.geo, regions.gamma)
    x = asm.uinv_w - np.diag((1.0 - eps) * gmask)
    try:
        cf = scipy.linalg.cho_factor(x)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - eps > 0
        raise ArithmeticError("floored quadratic form not PD") from exc
    minv = scipy.linalg.cho_solve(cf, np.eye(asm.nsite))
    cg_w = asm.s_minus @ (0.5 * (minv + minv.T)) @ asm.s_minus
    cg_w = 0.5 * (cg_w + cg_w.T)

    comp_ops, comp_masks = [], []
    total_terms = 0
    corr_sum = np.zeros_like(cg_w)
    if routes not in ("both", "direct"):
        raise ValueError("routes must be 'both' or 'direct'")
    if routes == "both":
        for comp in regions.components:
            cmask = region_site_mask(asm.geo, comp.gamma)
            corr, terms = _neumann_correction(asm, cmask, eps, neumann_tol)
            corr = 0.5 * (corr + corr.T)
            total_terms = max(total_terms, terms)
            corr_sum += corr
            comp_ops.append(_as_operator(corr, asm.w))
            comp_masks.append(cmask)
        residual = float(np.abs(cg_w - asm.c0_w - corr_sum).max() / asm.w)
        if residual > agree_tol:
            raise ArithmeticError(
                f"covariance routes disagree: sup residual {residual:.3e}")
    else:
        corr_sum = cg_w - asm.c0_w
        residual = float("nan")
        for comp in regions.components:
            comp_masks.append(region_site_mask(asm.geo, comp.gamma))

    return CovarianceSet(
        C0=_as_operator(asm.c0_w, asm.w),
        Cgamma=_as_operator(cg_w, asm.w),
        Cgamma_correction=_as_operator(corr_sum, asm.w),
        component_corrections=comp_ops,
        component_masks=comp_masks,
        gamma_mask=gmask,
        grid=asm.geo,
        geometry=geometry,
        route_residual=residual,
        neumann_terms=total_terms,
        enforced=enforced,
        epsilon=eps,
        cutoff_weighted=asm.u_w,
    )


# ---------------------------------------------------------------------------
# normalization

def compute_Zgamma(covset, regions, factor_tol=1e-8):
    """Z_gamma = det^{1/2}(C0^{-1} C_gamma) via generalized eigenvalues.

    Checks Z_gamma >= 1, the product factorization over components (exact
    for the compact-support cutoff kernel, since distinct components are
    separated by more than the kernel range), and per component the
    independent determinant route det^{-1/2}(1 - (1-eps) P_i U)."""
    c0_w = covset.C0.weighted
    cg_w = covset.Cgamma.weighted
    mu = scipy.linalg.eigh(cg_w, c0_w, eigvals_only=True)
    if mu.min() <= 0:
        raise ArithmeticError("C_gamma/C0 lost positivity")
    log_z = 0.5 * float(np.sum(np.log(mu)))
    z = float(np.exp(log_z))
    if z < 1.0 - 1e-9:
        raise ArithmeticError(f"Z_gamma = {z} below 1")

    if covset.component_corrections:
        log_parts = []
        for corr, cmask in zip(covset.component_corrections,
                               covset.component_masks):
            mu_i = scipy.linalg.eigh(c0_w + corr.weighted, c0_w,
                                     eigvals_only=True)
            log_i = 0.5 * float(np.sum(np.log(mu_i)))
            log_det = component_log_z(covset, cmask)
            if abs(log_i - log_det) > factor_tol * max(1.0, abs(log_i)):
                raise ArithmeticError(
                    "generalized-eigenvalue and determinant routes disagree "
                    f"on a component: {log_i} vs {log_det}")
            log_parts.append(log_i)
        if covset.enforced:
            rel = abs(z - np.exp(sum(log_parts))) / z
            if rel > factor_tol:
                raise ArithmeticError(
                    f"component factorization broke: rel {rel:.3e}")
    covset.Zgamma = z
    return z


def component_log_z(covset, cmask):
    """log Z_{gamma_i} = -1/2 logdet(1 - (1-eps) U P_i): the
    single-determinant route for one component's normalization."""
    scaled = covset.cutoff_weighted * ((1.0 - covset.epsilon) * cmask)[None, :]
    sign, logdet = np.linalg.slogdet(np.eye(len(cmask)) - scaled)
    if sign <= 0:
        raise ArithmeticError("component determinant changed sign")
    return -0.5 * float(logdet)


# ---------------------------------------------------------------------------
# the small/large splitting corrections

def _block(mat, left, right):
    return mat * left[:, None] * right[None, :]


@dataclasses.dataclass
class DeltaC:
    """The four correction operators of the sharp splitting, with the
    residual of the defining identity (checked on the padded grid,
    including the (1 - P_Lambda) term that the restriction to fields in
    Lambda would hide)."""

    d1: DiscretizedOperator
    d2: DiscretizedOperator
    d3: DiscretizedOperator
    d4: DiscretizedOperator
    identity_residual: float

    def __iter__(self):
        return iter((self.d1, self.d2, self.d3, self.d4))


def build_deltaC(params, geometry, cutoff, regions, pad=2, enforced=True,
                 include_polarization=True, tol=1e-8):
    """deltaC_1..deltaC_4 from the block decomposition of S(1-P_gamma)S.

    With S = sqrt(1+pi), T = S(1-P_gamma)S and blocks taken over the
    partition {s-squares, l-squares, outside Lambda}:

        deltaC_1 = - P_s S P_gamma S P_s        (negative semidefinite)
        deltaC_2 = (l,s) + (s,l) + (l,l) blocks of T
        deltaC_3 = all blocks of T touching the outside of Lambda
        deltaC_4 = eps S P_gamma S

    and the assembly is verified against the independently computed
    difference C_gamma^{-1} - C_ls^{-1} = deltaC - P_l - (1 - P_Lambda)
    where C_ls^{-1} = P_s pi P_s + 1 + S f S."""
    asm = _assembly(params, geometry, cutoff, pad, enforced,
                    include_polarization)
    eps = params.epsilon
    gmask = region_site_mask(asm.geo, regions.gamma).astype(float)
    s_mask = region_site_mask(asm.geo, regions.lambda_s).astype(float)
    l_mask = region_site_mask(asm.geo, regions.lambda_l).astype(float)
    lam_mask = inner_site_mask(asm.geo, geometry).astype(float)

    sp = asm.s_plus
    spgs = sp @ (gmask[:, None] * sp)
    t = np.eye(asm.nsite) + asm.pi_w - spgs

    d1_w = -_block(spgs, s_mask, s_mask)
    d2_w = (_block(t, l_mask, s_mask) + _block(t, s_mask, l_mask)
            + _block(t, l_mask, l_mask))
    d3_w = t - _block(t, lam_mask, lam_mask)
    d4_w = eps * spgs

    lhs = sp @ ((asm.uinv_w - np.diag((1.0 - eps) * gmask)) @ sp) \
        - (_block(asm.pi_w, s_mask, s_mask) + np.eye(asm.nsite)
           + sp @ ((asm.uinv_w - np.eye(asm.nsite)) @ sp))
    rhs = (d1_w + d2_w + d3_w + d4_w - np.diag(l_mask)
           - np.diag(1.0 - lam_mask))
    residual = float(np.abs(lhs - rhs).max())
    if residual > tol:
        raise ArithmeticError(
            f"splitting identity violated: sup residual {residual:.3e}")
    return DeltaC(*(_as_operator(m, asm.w) for m in (d1_w, d2_w, d3_w, d4_w)),
                  identity_residual=residual)


# ---------------------------------------------------------------------------
# sampling

def sample_gaussian(covariance, seed=0, count=1, geometry=None):
    """Mean-zero Gaussian draws with the given covariance kernel.

    Spectral factorization of the kernel-entry matrix (so the sample
    covariance of the site values matches the kernel entries); a fixed
    seed gives a bit-identical sequence.  With a geometry the draws are
    wrapped as FieldConfig on that grid."""
    mat = covariance.matrix
    ev, vec = np.linalg.eigh(0.5 * (mat + mat.T))
    floor = -1e-10 * max(float(ev.max()), 1.0)
    if ev.min() < floor:
        raise ArithmeticError("covariance is not positive semidefinite")
    root = vec * np.sqrt(np.clip(ev, 0.0, None))
    rng = np.random.default_rng(seed)
    draws = rng.standard_normal((count, mat.shape[0])) @ root.T
    if geometry is None:
        return [draws[i] for i in range(count)]
    side = geometry.sites_per_side
    if side * side != mat.shape[0]:
        raise ValueError("geometry does not match covariance dimension")
    return [FieldConfig.from_tau(geometry, draws[i].reshape(side, side))
            for i in range(count)]


# ---------------------------------------------------------------------------
# assembled integrand bound and the single-square normalization

@dataclasses.dataclass
class DampingReport:
    """Log of the normalized large-field integrand and the two field
    masses entering its exponential damping bound."""

    log_value: float
    mass_large: float
    mass_small: float
    required_const: float


def damping_report(field, params, regions, covset, deltac, assignment=None):
    """Evaluate log(Z_gamma |G_gamma(tau)|) for one configuration.

    G_gamma is the product of the window weights, the explicit Gaussian
    damping on the large-field squares, the two regularized determinant
    factors and the quadratic correction exp((tau, deltaC tau)/2).
    required_const is the constant that would make the bound

        log value <= -0.49 * int_{large} tau^2
                     + const * N^{-2/5} * int_{small} tau^2

    hold with equality; the fitted constant of the ensemble is its max."""
    geometry = field.geometry
    if assignment is None:
        assignment = classify_squares(field, params, geometry)
    log_theta = 0.0
    for k, lab in enumerate(assignment.labels):
        wgt = (assignment.theta_s[k] if lab == 0
               else assignment.theta_n[k, lab - 1])
        if wgt <= 0.0:
            return DampingReport(-np.inf, 0.0, 0.0, -np.inf)
        log_theta += np.log(wgt)

    mass_l = float(sum(field.mass_of(c) for c in regions.lambda_l))
    mass_s = float(sum(field.mass_of(c) for c in regions.lambda_s))

    aop = build_A(field, params, geometry, assignment=assignment,
                  symmetrize=True)
    as_w = aop.a_s.weighted
    app_w = aop.a_doubleprime.weighted
    n = as_w.shape[0]
    k3 = 1j * np.linalg.eigvalsh(as_w)
    log3 = np.sum(np.log(1.0 + k3) - k3 + 0.5 * k3 * k3)
    beta = np.linalg.eigvals(np.linalg.solve(np.eye(n) + 1j * as_w,
                                             1j * app_w))
    log2 = np.sum(np.log(1.0 + beta) - beta)

    tau_w = embed_tau(field, covset.grid) * np.sqrt(covset.grid.site_weight)
    quad = sum(float(tau_w @ op.weighted @ tau_w) for op in deltac)

    z = covset.Zgamma
    if z is None:
        z = compute_Zgamma(covset, regions)
    log_value = (np.log(z) + log_theta - 0.5 * mass_l
                 - 0.5 * params.bigN * (log3.real + log2.real) + 0.5 * quad)
    if mass_s > 0:
        required = ((log_value + 0.49 * mass_l)
                    / (params.bigN ** (-0.4) * mass_s))
    else:
        required = -np.inf
    return DampingReport(float(log_value), mass_l, mass_s, float(required))


@dataclasses.dataclass
class SquareNormalization:
    value: float
    stderr: float
    samples: int


def single_square_normalization(params, cutoff, sites_per_square=4, pad=2,
                                samples=2000, seed=0, enforced=True,
                                include_polarization=True):
    """Monte Carlo estimate of the normalized partition integral of a
    single small-field square: the free-covariance average of the window
    weight times det_3^{-N/2}(1 + iA) with the covariance restricted to
    the square.  Tends to 1 faster than N^{-1/5} as N grows."""
    geo = LatticeGeometry(n=1, sites_per_square=sites_per_square)
    asm = _assembly(params, geo, cutoff, pad, enforced, include_polarization)
    idx = np.flatnonzero(region_site_mask(asm.geo, [(0, 0)]))
    block = (asm.c0_w / asm.w)[np.ix_(idx, idx)]
    ev, vec = np.linalg.eigh(block)
    root = vec * np.sqrt(np.clip(ev, 0.0, None))
    f_block = propagator_matrix(asm.geo, params.m)[np.ix_(idx, idx)]

    rng = np.random.default_rng(seed)
    taus = rng.standard_normal((samples, len(idx))) @ root.T
    thr = params.bigN ** (1.0 / 6.0)
    vals = np.empty(samples, dtype=complex)
    for i, tau in enumerate(taus):
        u = params.lam * params.bigK * float(np.sum(tau * tau)) * asm.w
        t = 1.0 - smooth_step(u / thr - 1.0)
        if t == 0.0:
            vals[i] = 0.0
            continue
        lam_e = 1j * np.linalg.eigvals(f_block * (params.g * tau * asm.w)[None, :])
        log3 = np.sum(np.log(1.0 + lam_e) - lam_e + 0.5 * lam_e * lam_e)
        vals[i] = t * np.exp(-0.5 * params.bigN * log3)
    value = float(vals.real.mean())
    stderr = float(vals.real.std(ddof=1) / np.sqrt(samples))
    return SquareNormalization(value, stderr, samples)
