"""Exterior-control machinery: the shifted solution operator P_q - Id over an
input basis, its weighted singular system, truncated-SVD approximate controls,
the approximation/control-size trade-off, pairing reconstruction from trace
maps, a computable lower bound for the weak potential norm, and the
stability sweep with logarithmic/power model fits.

Input space: L2(0,T; H^{2s}) surrogate Gram over basis coefficients.
Output space: L2(Omega_T) with h x trapezoid diagonal weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh, qr, svd

from .dnmap import DnMatrix, ExteriorBasis, input_gram, potential_hash
from .forward import GalerkinSystem, solve_forward, solve_forward_fine
from .grid import DomainPartition, TimeGrid, trapezoid_weights

__all__ = [
    "PoissonOperatorMatrix",
    "SvdSystem",
    "RungeResult",
    "StabilityRecord",
    "assemble_poisson",
    "assemble_trace_and_poisson",
    "adjoint_identity_check",
    "svd_system",
    "runge_approximate",
    "runge_tradeoff_sweep",
    "alpha_for_error",
    "h2_surrogate_norm",
    "reconstruct_pairings",
    "z_norm_surrogate",
    "stability_sweep",
    "density_probe",
    "fit_stability_models",
]


@dataclass(frozen=True)
class PoissonOperatorMatrix:
    """Columns are interior space-time fields v = (P_q - Id) basis_j on
    idx_omega x time, flattened node-major."""

    matrix: np.ndarray  # (K_omega*(M+1), n_cols)
    basis: ExteriorBasis
    q_hash: str
    s: float

    def __post_init__(self):
        self.matrix.setflags(write=False)

    @property
    def part(self) -> DomainPartition:
        return self.basis.part

    @property
    def timegrid(self) -> TimeGrid:
        return self.basis.timegrid


def _output_weight(part: DomainPartition, timegrid: TimeGrid) -> np.ndarray:
    """Diagonal h x trapezoid weight over idx_omega x time, flattened."""
    tau = trapezoid_weights(timegrid)
    return (part.grid.h * np.ones(part.idx_omega.size)[:, None] * tau[None, :]).ravel()


def assemble_trace_and_poisson(
    system: GalerkinSystem,
    timegrid: TimeGrid,
    basis: ExteriorBasis,
    trace_idx: np.ndarray | None = None,
) -> tuple[DnMatrix, PoissonOperatorMatrix]:
    """One forward solve per basis column feeding both operator matrices."""
    part = system.part
    idx = part.idx_w2 if trace_idx is None else trace_idx
    trace_cols, interior_cols = [], []
    for j in range(basis.n_cols):
        field = solve_forward(system, timegrid, f=basis.column_signal(j))
        trace_cols.append((system.op.matrix @ field.u)[idx].ravel())
        interior_cols.append(field.v.ravel())
    q_hash = potential_hash(system.q.values)
    dn = DnMatrix(
        matrix=np.array(trace_cols).T, basis=basis, trace_idx=idx,
        q_hash=q_hash, s=system.op.s,
    )
    poisson = PoissonOperatorMatrix(
        matrix=np.array(interior_cols).T, basis=basis, q_hash=q_hash, s=system.op.s,
    )
    return dn, poisson


def assemble_poisson(
    system: GalerkinSystem, timegrid: TimeGrid, basis: ExteriorBasis
) -> PoissonOperatorMatrix:
    _, poisson = assemble_trace_and_poisson(system, timegrid, basis)
    return poisson


def adjoint_identity_check(
    poisson: PoissonOperatorMatrix,
    system: GalerkinSystem,
    trials: int,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative defect of <(P-Id) b_j, F> = <b_j, -A v_F> over random F.

    v_F is the terminal-value solve driven by F; both pairings use per-step
    Gauss quadrature of the closed-form trajectories.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    basis = poisson.basis
    part, timegrid = poisson.part, poisson.timegrid
    h = part.grid.h

    fine_cols = [
        solve_forward_fine(system, timegrid, f=basis.column_signal(j))
        for j in range(basis.n_cols)
    ]
    weights = fine_cols[0].weights
    n_fine = weights.size
    k_om = part.idx_omega.size

    worst = 0.0
    for _ in range(trials):
        f_nodes = rng.standard_normal((k_om, timegrid.M + 1))
        f_nodes[:, 0] = 0.0  # interior source may be rough; only shape matters
        # fine samples of the piecewise-linear interpolant the solver sees
        base = f_nodes[:, :-1]
        dfn = np.diff(f_nodes, axis=1)
        offs = (fine_cols[0].times - np.repeat(timegrid.t[:-1], n_fine // timegrid.M))
        frac = (offs / timegrid.dt).reshape(timegrid.M, -1)
        f_fine = (base[:, :, None] + dfn[:, :, None] * frac[None, :, :]).reshape(k_om, n_fine)

        reflected = f_nodes[:, ::-1]
        vf_fine = solve_forward_fine(system, timegrid, F=reflected)
        trace_back = (system.op.matrix @ vf_fine.u)[basis.support][:, ::-1]

        lhs = np.array([
            h * np.sum(weights * col.v * f_fine) for col in fine_cols
        ])
        rhs = np.array([
            -h * np.sum(weights * fine_cols[j].u[basis.support] * trace_back)
            for j in range(basis.n_cols)
        ])
        worst = max(worst, float(np.linalg.norm(lhs - rhs) / np.linalg.norm(rhs)))
    return worst


@dataclass(frozen=True)
class SvdSystem:
    """Weighted singular system of the shifted solution operator.

    sigma descending; phi columns orthonormal in the input Gram; w columns
    orthonormal in the weighted L2(Omega_T) product and w_j equals
    (P - Id) phi_j / sigma_j.
    """

    sigma: np.ndarray  # (r,)
    phi: np.ndarray  # (n_cols, r)
    w: np.ndarray  # (K_omega*(M+1), r)
    gram_in: np.ndarray
    out_weight: np.ndarray  # diagonal entries
    poisson: PoissonOperatorMatrix

    def __post_init__(self):
        for arr in (self.sigma, self.phi, self.w, self.gram_in, self.out_weight):
            arr.setflags(write=False)

    @property
    def rank(self) -> int:
        return self.sigma.size

    def project_output(self, field_flat: np.ndarray) -> np.ndarray:
        """Coefficients <field, w_j> in the weighted output product."""
        return self.w.T @ (self.out_weight * field_flat)

    def input_norm(self, coeffs: np.ndarray) -> float:
        return float(np.sqrt(coeffs @ (self.gram_in @ coeffs)))

    def output_norm(self, field_flat: np.ndarray) -> float:
        return float(np.sqrt(np.sum(self.out_weight * field_flat**2)))

    def adjoint_apply(self, field_flat: np.ndarray) -> np.ndarray:
        """(P - Id)* field as input-basis coefficients."""
        return np.linalg.solve(self.gram_in, self.poisson.matrix.T @ (self.out_weight * field_flat))


def svd_system(poisson: PoissonOperatorMatrix, op_matrix: np.ndarray) -> SvdSystem:
    part, timegrid = poisson.part, poisson.timegrid
    g_in = input_gram(poisson.basis, op_matrix, part.grid.h)
    vals, vecs = eigh(g_in)
    g_sqrt = (vecs * np.sqrt(vals)) @ vecs.T
    g_isqrt = (vecs / np.sqrt(vals)) @ vecs.T
    d_out = _output_weight(part, timegrid)
    weighted = (np.sqrt(d_out)[:, None] * poisson.matrix) @ g_isqrt
    u, sig, vt = svd(weighted, full_matrices=False)
    keep = sig > 0.0
    return SvdSystem(
        sigma=sig[keep],
        phi=g_isqrt @ vt[keep].T,
        w=u[:, keep] / np.sqrt(d_out)[:, None],
        gram_in=g_in,
        out_weight=d_out,
        poisson=poisson,
    )


@dataclass(frozen=True)
class RungeResult:
    alpha: float
    coeffs: np.ndarray  # input-basis coefficients of the approximate control
    achieved_error: float
    input_norm: float
    n_modes: int


def runge_approximate(system: SvdSystem, target_flat: np.ndarray, alpha: float) -> RungeResult:
    """Truncated-SVD approximate control for the interior target.

    Keeps modes with sigma_j > alpha; the returned error is the weighted
    L2(Omega_T) distance of the realized field from the target, and the
    control-size bound ||f|| <= ||target||/alpha is verified internally.
    """
    if alpha <= 0.0:
        raise ValueError("alpha must be positive")
    c = system.project_output(target_flat)
    mask = system.sigma > alpha
    coeffs = system.phi[:, mask] @ (c[mask] / system.sigma[mask])
    realized = system.poisson.matrix @ coeffs
    err = system.output_norm(realized - target_flat)
    f_norm = system.input_norm(coeffs)
    t_norm = system.output_norm(target_flat)
    if f_norm > t_norm / alpha * (1.0 + 1e-9) + 1e-300:
        raise AssertionError("control-size bound ||f|| <= ||target||/alpha violated")
    return RungeResult(
        alpha=float(alpha), coeffs=coeffs, achieved_error=err,
        input_norm=f_norm, n_modes=int(mask.sum()),
    )


def _tail_profiles(system: SvdSystem, target_flat: np.ndarray):
    """Cumulative error/control profiles by number of retained modes."""
    c = system.project_output(target_flat)
    t_norm2 = system.output_norm(target_flat) ** 2
    perp2 = max(t_norm2 - float(np.sum(c**2)), 0.0)
    # err2[k] = ||target - sum_{j<k} c_j w_j||^2, exactly nonincreasing in k
    tail = np.concatenate([[0.0], np.cumsum(c[::-1] ** 2)])[::-1]
    err2 = perp2 + tail
    norm2 = np.concatenate([[0.0], np.cumsum(c**2 / system.sigma**2)])
    return c, err2, norm2


def runge_tradeoff_sweep(
    system: SvdSystem, target_flat: np.ndarray, alphas
) -> list[dict]:
    """Error vs control size across a cutoff grid, exactly monotone by
    nested truncation (errors from cumulative tail sums)."""
    alphas = np.asarray(list(alphas), dtype=float)
    if np.any(alphas <= 0.0):
        raise ValueError("cutoffs must be positive")
    _, err2, norm2 = _tail_profiles(system, target_flat)
    rows = []
    for alpha in alphas:
        k = int(np.sum(system.sigma > alpha))
        rows.append({
            "alpha": float(alpha),
            "n_modes": k,
            "achieved_error": float(np.sqrt(err2[k])),
            "input_norm": float(np.sqrt(norm2[k])),
        })
    return rows


def alpha_for_error(system: SvdSystem, target_flat: np.ndarray, rel_error: float) -> float:
    """Largest cutoff whose truncation error is at most rel_error * ||target||."""
    _, err2, _ = _tail_profiles(system, target_flat)
    t_norm = system.output_norm(target_flat)
    goal = (rel_error * t_norm) ** 2
    k = int(np.searchsorted(-err2, -goal))  # err2 is nonincreasing
    if k == 0:
        return float(system.sigma[0] * 1.001)
    if k >= system.rank:
        return float(system.sigma[-1] * 0.5)
    return float(0.5 * (system.sigma[k - 1] + system.sigma[k]))


def h2_surrogate_norm(
    part: DomainPartition,
    timegrid: TimeGrid,
    op_matrix: np.ndarray,
    field: np.ndarray,  # (K_omega, M+1)
    s: float,
    gamma: float | None = None,
) -> float:
    """Tensor surrogate of the H^2-in-time / H^{s+gamma}-in-space norm.

    Temporal derivatives by finite differences, spatial weight
    (I + A_OmegaOmega)^theta with theta = (s+gamma)/(2s); the three component
    norms are summed, mirroring a sum-of-derivatives definition.
    """
    gamma = 0.5 * s if gamma is None else gamma
    theta = (s + gamma) / (2.0 * s)
    idx = part.idx_omega
    sub = op_matrix[np.ix_(idx, idx)]
    vals, vecs = eigh(np.eye(idx.size) + sub)
    weight = (vecs * vals**theta) @ vecs.T
    tau = trapezoid_weights(timegrid)
    dt = timegrid.dt

    def component(arr):
        return float(np.sqrt(part.grid.h * np.sum(tau * np.einsum(
            "it,ij,jt->t", arr, weight, arr))))

    d1 = np.gradient(field, dt, axis=1)
    d2 = np.empty_like(field)
    d2[:, 1:-1] = (field[:, 2:] - 2.0 * field[:, 1:-1] + field[:, :-2]) / dt**2
    d2[:, 0] = d2[:, 1]
    d2[:, -1] = d2[:, -2]
    return component(field) + component(d1) + component(d2)


def reconstruct_pairings(
    m1: DnMatrix,
    m2: DnMatrix,
    sys1: SvdSystem,
    sys2: SvdSystem,
    phi1: np.ndarray,  # (K_omega, M+1), vanishing at t=0 with zero velocity
    phi2: np.ndarray,
    target_error: float,
    qdiff: np.ndarray | None = None,
) -> dict:
    """Estimate int (q1 - q2) phi1 phi2* from the trace-map difference.

    Approximate controls f_j realize phi_j to the requested relative error;
    the boundary pairing <(M1 - M2) f1, f2*> is the estimate.  When qdiff is
    given (validation mode), the remainder terms are also evaluated directly
    and returned in the error budget.
    """
    part, timegrid = sys1.poisson.part, sys1.poisson.timegrid
    h, tau = part.grid.h, trapezoid_weights(timegrid)
    if not np.array_equal(m1.trace_idx, m1.basis.support):
        raise ValueError("pairing needs traces on the control support")

    r1 = runge_approximate(sys1, phi1.ravel(), alpha_for_error(sys1, phi1.ravel(), target_error))
    r2 = runge_approximate(sys2, phi2.ravel(), alpha_for_error(sys2, phi2.ravel(), target_error))

    gap_trace = (m1.matrix - m2.matrix) @ r1.coeffs
    m_t = timegrid.M + 1
    gap_trace = gap_trace.reshape(-1, m_t)
    f2_vals = m2.basis.signal(r2.coeffs).values
    estimate = h * np.sum(tau * gap_trace * f2_vals[:, ::-1])

    out = {
        "estimate": float(estimate),
        "achieved_error_1": r1.achieved_error,
        "achieved_error_2": r2.achieved_error,
        "input_norm_1": r1.input_norm,
        "input_norm_2": r2.input_norm,
    }
    if qdiff is not None:
        t1 = (sys1.poisson.matrix @ r1.coeffs).reshape(-1, m_t) - phi1
        t2 = (sys2.poisson.matrix @ r2.coeffs).reshape(-1, m_t) - phi2
        def pair(a, b):
            return h * np.sum(qdiff[:, None] * tau[None, :] * a * b[:, ::-1])
        direct = pair(phi1, phi2)
        out["direct"] = float(direct)
        out["remainder"] = float(pair(phi2, t1) + pair(phi1, t2) + pair(t1, t2))
        out["relative_error"] = float(abs(estimate - direct) / max(abs(direct), 1e-300))
    return out


def z_norm_surrogate(
    qdiff: np.ndarray,
    pairs,
    part: DomainPartition,
    timegrid: TimeGrid,
) -> float:
    """Max over the dictionary of |int qdiff phi1 phi2*|: a lower bound for the
    weak norm taken over normalized smooth pairs."""
    h, tau = part.grid.h, trapezoid_weights(timegrid)
    best = 0.0
    for phi1, phi2 in pairs:
        val = abs(h * np.sum(qdiff[:, None] * tau[None, :] * phi1 * phi2[:, ::-1]))
        best = max(best, float(val))
    return best


@dataclass
class StabilityRecord:
    family_param: list
    delta: list
    error: list

    def rows(self):
        return list(zip(self.family_param, self.delta, self.error))


def fit_stability_models(delta, error, floor: float = 1e-12) -> dict:
    """Least-squares fits e ~ C |log d|^-sigma and e ~ C d^a on log data."""
    delta = np.maximum(np.asarray(delta, dtype=float), floor)
    error = np.asarray(error, dtype=float)
    keep = error > 0.0
    if keep.sum() < 4:
        raise ValueError("need at least 4 usable rows to fit")
    ld = np.log(delta[keep])
    le = np.log(error[keep])
    x_log = np.log(np.abs(ld))
    a_log = np.polyfit(x_log, le, 1)
    resid_log = float(np.sqrt(np.mean((np.polyval(a_log, x_log) - le) ** 2)))
    a_pow = np.polyfit(ld, le, 1)
    resid_pow = float(np.sqrt(np.mean((np.polyval(a_pow, ld) - le) ** 2)))
    return {
        "C_log": float(np.exp(a_log[1])),
        "sigma": float(-a_log[0]),
        "C_pow": float(np.exp(a_pow[1])),
        "a": float(a_pow[0]),
        "resid_log": resid_log,
        "resid_pow": resid_pow,
    }


def stability_sweep(
    base_system: GalerkinSystem,
    perturbed_systems,
    timegrid: TimeGrid,
    basis: ExteriorBasis,
    dictionary,
    family_params,
    noise: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[StabilityRecord, dict]:
    """Trace-map gap vs weak-norm error across a family of potential pairs.

    Rows with identical potentials produce delta at the measurement floor and
    are excluded from the fits.  Optional uniform noise of magnitude ``noise``
    perturbs the trace matrices (measurement-noise mode).
    """
    from .dnmap import assemble_dn_matrix, dn_gap_norm

    part = base_system.part
    m_base = assemble_dn_matrix(base_system, timegrid, basis, trace_idx=basis.support)
    rng = rng if rng is not None else np.random.default_rng(0)
    record = StabilityRecord(family_param=[], delta=[], error=[])
    op_matrix = base_system.op.matrix
    for param, system in zip(family_params, perturbed_systems):
        m_pert = assemble_dn_matrix(system, timegrid, basis, trace_idx=basis.support)
        if noise > 0.0:
            m_pert = DnMatrix(
                matrix=m_pert.matrix + rng.uniform(-noise, noise, m_pert.matrix.shape),
                basis=m_pert.basis, trace_idx=m_pert.trace_idx,
                q_hash=m_pert.q_hash, s=m_pert.s,
            )
        delta = dn_gap_norm(m_base, m_pert, op_matrix, part)
        qdiff = system.q.values - base_system.q.values
        err = z_norm_surrogate(qdiff, dictionary, part, timegrid)
        record.family_param.append(param)
        record.delta.append(delta)
        record.error.append(err)
    usable = [i for i, e in enumerate(record.error) if e > 0.0]
    fits = fit_stability_models(
        [record.delta[i] for i in usable], [record.error[i] for i in usable]
    )
    return record, fits


def density_probe(
    poisson: PoissonOperatorMatrix,
    targets,
    sizes,
) -> np.ndarray:
    """Projection residuals of each target onto spans of leading columns.

    Householder QR of the weighted column block makes the residual sequence
    exactly nonincreasing in the span size.  Returns an array of shape
    (n_targets, n_sizes).
    """
    part, timegrid = poisson.part, poisson.timegrid
    d_out = _output_weight(part, timegrid)
    sizes = list(sizes)
    if max(sizes) > poisson.matrix.shape[1]:
        raise ValueError("requested span exceeds the assembled basis")
    q_mat, _ = qr(np.sqrt(d_out)[:, None] * poisson.matrix, mode="economic")
    out = np.empty((len(targets), len(sizes)))
    for i, target in enumerate(targets):
        t_w = np.sqrt(d_out) * np.ravel(target)
        coeff2 = (q_mat.T @ t_w) ** 2
        total = float(t_w @ t_w)
        tail = total - np.concatenate([[0.0], np.cumsum(coeff2)])
        out[i] = np.sqrt(np.maximum(tail[sizes], 0.0))
    return out
