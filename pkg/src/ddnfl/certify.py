"""Semidefinite stability certificates for neural feedback loops.

The data-driven certificate is the tuple ``(Q1, Q2, L1..L4)`` with ``Q1 = P^-1`` and
``Q2 = Lambda^-1``; ``V(x) = x' P x`` is the Lyapunov function and
``E(P) = {x : x' P x <= 1}`` the region-of-attraction estimate.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from pathlib import Path

import cvxpy as cp
import numpy as np

from . import errors
from .network import NnController, assemble_N
from .plant import ExperimentData, PlantModel, StateBox
from .sectors import SectorContext, TransformedN, loop_transform, sector_context, stacked_sector_qc

DEFAULT_SOLVER = "CLARABEL"
MARGIN_TOL = 1e-8
EQUALITY_TOL = 1e-7

_OK = (cp.OPTIMAL, cp.OPTIMAL_INACCURATE)
_INFEASIBLE = (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE)


def default_margin(data: ExperimentData) -> float:
    return 1e-6 * (1.0 + np.linalg.norm(data.X1, "fro"))


@dataclass
class Infeasible:
    """No certificate was found. This is not a proof of instability."""

    status: str
    detail: str = ""

    def __bool__(self):
        return False


@dataclass
class StabilityCertificate:
    Q1: np.ndarray
    q2: np.ndarray
    L1: np.ndarray
    L2: np.ndarray
    L3: np.ndarray
    L4: np.ndarray
    eq_residual: float
    margin: float
    required_margin: float
    solver_status: str = "optimal"
    sector_context: SectorContext | None = None

    @property
    def Q2(self):
        return np.diag(self.q2)

    @property
    def P(self):
        return np.linalg.inv(self.Q1)

    @property
    def log_det_Q1(self):
        return float(np.linalg.slogdet(self.Q1)[1])

    @property
    def L(self):
        return np.block([[self.L1, self.L2], [self.L3, self.L4]])

    def scaled(self, c):
        return StabilityCertificate(c * self.Q1, c * self.q2, c * self.L1, c * self.L2,
                                    c * self.L3, c * self.L4, c * self.eq_residual,
                                    c * self.margin, self.required_margin, self.solver_status,
                                    self.sector_context)

    def to_dict(self):
        d = {"Q1": self.Q1.tolist(), "Q2_diag": self.q2.tolist(),
             "L1": self.L1.tolist(), "L2": self.L2.tolist(),
             "L3": self.L3.tolist(), "L4": self.L4.tolist(),
             "eq_residual": self.eq_residual, "margin": self.margin,
             "required_margin": self.required_margin, "log_det_Q1": self.log_det_Q1,
             "solver_status": self.solver_status}
        d["sector_context"] = self.sector_context.to_dict() if self.sector_context else None
        return d

    @classmethod
    def from_dict(cls, d):
        ctx = d.get("sector_context")
        return cls(np.asarray(d["Q1"]), np.asarray(d["Q2_diag"]),
                   *(np.atleast_2d(np.asarray(d[k], dtype=float)) for k in ("L1", "L2", "L3", "L4")),
                   float(d["eq_residual"]), float(d["margin"]),
                   float(d.get("required_margin", 0.0)), d.get("solver_status", "optimal"),
                   SectorContext.from_dict(ctx) if ctx else None)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


# ----------------------------------------------------------------- numeric blocks

def dd_lmi_matrix(X1, Q1, q2, L1, L2, L3, L4):
    """Numeric value of the 2(n_x + n_phi) block matrix that must be positive definite."""
    n_x, n_phi = Q1.shape[0], len(q2)
    Q2 = np.diag(q2)
    Z = np.zeros
    return np.block([
        [Q1, Z((n_x, n_phi)), (X1 @ L1).T, L3.T],
        [Z((n_phi, n_x)), Q2, (X1 @ L2).T, L4.T],
        [X1 @ L1, X1 @ L2, Q1, Z((n_x, n_phi))],
        [L3, L4, Z((n_phi, n_x)), Q2],
    ])


def transformed_condition_matrix(plant: PlantModel, Nt: TransformedN, P, lam):
    """Model-based matrix that must be negative definite after the loop transformation."""
    n_x, n_phi = Nt.n_x, Nt.n_phi
    A, B = plant.A, plant.B
    Lam = np.diag(lam)
    AB = np.hstack([A, B])
    M_V = AB.T @ P @ AB
    M_V[:n_x, :n_x] -= P
    R_V = np.block([[np.eye(n_x), np.zeros((n_x, n_phi))], [Nt.Nt_pix, Nt.Nt_piz]])
    R_phi = np.block([[Nt.Nt_nux, Nt.Nt_nuz], [np.zeros((n_phi, n_x)), np.eye(n_phi)]])
    S = np.block([[Lam, np.zeros((n_phi, n_phi))], [np.zeros((n_phi, n_phi)), -Lam]])
    return R_V.T @ M_V @ R_V + R_phi.T @ S @ R_phi


def ubar(data: ExperimentData, n_phi: int):
    n_u, T = data.U0.shape
    out = np.zeros((n_u + n_phi, T + n_phi))
    out[:n_u, :T] = data.U0
    out[n_u:, T:] = np.eye(n_phi)
    return out


def equality_residual(Nt: TransformedN, U0, Q1, q2, L1, L2, L3, L4):
    """``Nt Q - Ubar L`` as a dense matrix."""
    return np.block([[Nt.Nt_pix @ Q1 - U0 @ L1, Nt.Nt_piz * q2 - U0 @ L2],
                     [Nt.Nt_nux @ Q1 - L3, Nt.Nt_nuz * q2 - L4]])


def values_from_lyapunov(Nt: TransformedN, data: ExperimentData, P, lam):
    """``(Q1, q2, L1..L4)`` with ``Q1 = P^-1``, ``Q2 = Lambda^-1`` meeting both equalities exactly.

    L1 and L2 are the minimum-norm solutions of ``[U0; X0] L = [Nt_pi Q; [I 0] Q]``.
    """
    Q1 = np.linalg.inv(P)
    Q1 = 0.5 * (Q1 + Q1.T)
    q2 = 1.0 / np.asarray(lam, dtype=float)
    S_pinv = np.linalg.pinv(np.vstack([data.U0, data.X0]))
    L1 = S_pinv @ np.vstack([Nt.Nt_pix @ Q1, Q1])
    L2 = S_pinv @ np.vstack([Nt.Nt_piz * q2, np.zeros((data.n_x, len(q2)))])
    return Q1, q2, L1, L2, Nt.Nt_nux @ Q1, Nt.Nt_nuz * q2


def state_constraint_blocks(M, box: StateBox, kind="Q1"):
    """One (1 + n_x) block per row of H; works on numpy arrays and cvxpy expressions.

    ``kind="P"`` gives ``[[xbar_i^2, h_i'], [h_i, P]]``; ``kind="Q1"`` the congruent
    ``[[xbar_i^2, h_i' Q1], [Q1 h_i, Q1]]``.
    """
    symbolic = isinstance(M, cp.Expression)
    blocks = []
    for h, xb in zip(box.H, box.xbar):
        row = h.reshape(1, -1) @ M if kind == "Q1" else h.reshape(1, -1)
        if symbolic:
            corner = np.array([[xb**2]])
            blocks.append(cp.bmat([[corner, row], [row.T, M]]))
        else:
            blocks.append(np.block([[np.array([[xb**2]]), row], [row.T, M]]))
    return blocks


def state_constraint_lmi(M, box: StateBox, kind="Q1"):
    """cvxpy PSD constraints for symbolic ``M``, or the list of blocks for numeric ``M``."""
    blocks = state_constraint_blocks(M, box, kind)
    if isinstance(M, cp.Expression):
        return [0.5 * (B + B.T) >> 0 for B in blocks]
    return blocks


def shrink_to_box(Q1, box: StateBox):
    """Factor in (0, 1] that makes ``E(Q1^-1)`` fit the box exactly (h' Q1 h <= xbar^2)."""
    worst = max(float(h @ Q1 @ h) / xb**2 for h, xb in zip(box.H, box.xbar))
    return min(1.0, 1.0 / worst) if worst > 0 else 1.0


# ----------------------------------------------------------------- conic assembly

@dataclass
class DecisionVars:
    T: int
    n_x: int
    n_phi: int
    Q1: cp.Variable = field(init=False)
    q2: cp.Variable = field(init=False)
    L1: cp.Variable = field(init=False)
    L2: cp.Variable = field(init=False)
    L3: cp.Variable = field(init=False)
    L4: cp.Variable = field(init=False)

    def __post_init__(self):
        T, n_x, n_phi = self.T, self.n_x, self.n_phi
        self.Q1 = cp.Variable((n_x, n_x), symmetric=True, name="Q1")
        self.q2 = cp.Variable(n_phi, name="q2")
        self.L1 = cp.Variable((T, n_x), name="L1")
        self.L2 = cp.Variable((T, n_phi), name="L2")
        self.L3 = cp.Variable((n_phi, n_x), name="L3")
        self.L4 = cp.Variable((n_phi, n_phi), name="L4")

    def values(self):
        return tuple(np.asarray(v.value, dtype=float).reshape(v.shape)
                     for v in (self.Q1, self.q2, self.L1, self.L2, self.L3, self.L4))


def assemble_dd_lmi(data: ExperimentData, dims, margin: float, variables: DecisionVars = None):
    """Block LMI over ``(Q1, Q2, L)`` shifted by ``-margin * I``.

    Returns ``(matrix_expression, constraint, variables)``.
    """
    if not data.pe_ok:
        raise errors.NotPersistentlyExciting("data fail the rank condition")
    if margin <= 0:
        raise ValueError("margin must be positive")
    n_x, n_phi = dims
    v = variables or DecisionVars(data.T, n_x, n_phi)
    X1 = data.X1
    Q2 = cp.diag(v.q2)
    Z = np.zeros
    M = cp.bmat([
        [v.Q1, Z((n_x, n_phi)), (X1 @ v.L1).T, v.L3.T],
        [Z((n_phi, n_x)), Q2, (X1 @ v.L2).T, v.L4.T],
        [X1 @ v.L1, X1 @ v.L2, v.Q1, Z((n_x, n_phi))],
        [v.L3, v.L4, Z((n_phi, n_x)), Q2],
    ])
    size = 2 * (n_x + n_phi)
    constraint = 0.5 * (M + M.T) - margin * np.eye(size) >> 0
    return M, constraint, v


def _symbolic_residual(Nt: TransformedN, data: ExperimentData, v: DecisionVars):
    return cp.bmat([
        [Nt.Nt_pix @ v.Q1 - data.U0 @ v.L1, Nt.Nt_piz @ cp.diag(v.q2) - data.U0 @ v.L2],
        [Nt.Nt_nux @ v.Q1 - v.L3, Nt.Nt_nuz @ cp.diag(v.q2) - v.L4],
    ])


def assemble_equality_constraints(Nt: TransformedN | None, data: ExperimentData,
                                  v: DecisionVars, hard_nt: bool = True):
    """Linear equalities: ``[I 0] Q = Xbar L`` always, ``Nt Q = Ubar L`` when ``hard_nt``."""
    if data.n_x != v.n_x or data.T != v.T:
        raise errors.InvalidDimensions("decision variables do not match the data")
    cons = [data.X0 @ v.L1 == v.Q1, data.X0 @ v.L2 == 0]
    if hard_nt:
        if Nt is None:
            raise ValueError("a transformed matrix is required for the hard equality")
        if Nt.n_x != data.n_x or Nt.n_phi != v.n_phi or Nt.Nt_pix.shape[0] != data.n_u:
            raise errors.InvalidDimensions("transformed matrix does not match data / variables")
        cons.append(_symbolic_residual(Nt, data, v) == 0)
    return cons


_TOLERANCE: ContextVar[float | None] = ContextVar("solver_tolerance", default=None)
_TOL_KEYS = {
    "CLARABEL": ("tol_gap_abs", "tol_gap_rel", "tol_feas"),
    "SCS": ("eps_abs", "eps_rel"),
    "MOSEK": (),
}


@contextmanager
def solver_tolerance(tol: float | None):
    """Temporarily override the conic solver's feasibility/optimality tolerances."""
    token = _TOLERANCE.set(tol)
    try:
        yield
    finally:
        _TOLERANCE.reset(token)


def solver_options(solver: str) -> dict:
    tol = _TOLERANCE.get()
    if tol is None:
        return {}
    return {k: tol for k in _TOL_KEYS.get(solver.upper(), ())}


def _solve(problem: cp.Problem, solver: str):
    try:
        problem.solve(solver=solver, **solver_options(solver))
    except cp.error.SolverError as exc:
        raise errors.SolverError(f"{solver} failed: {exc}") from exc
    return problem.status


# ----------------------------------------------------------------- fixed-controller verification

def polish_equalities(Nt: TransformedN, data: ExperimentData, Q1, q2, L1, L2):
    """Minimum-norm correction of L so both equalities hold to machine precision."""
    S = np.vstack([data.U0, data.X0])
    S_pinv = np.linalg.pinv(S)
    rhs1 = np.vstack([Nt.Nt_pix @ Q1, Q1])
    rhs2 = np.vstack([Nt.Nt_piz * q2, np.zeros((data.n_x, len(q2)))])
    L1 = L1 + S_pinv @ (rhs1 - S @ L1)
    L2 = L2 + S_pinv @ (rhs2 - S @ L2)
    return L1, L2, Nt.Nt_nux @ Q1, Nt.Nt_nuz * q2


def certificate_from_values(Nt, data, box, values, required_margin, status, ctx, polish=True):
    Q1, q2, L1, L2, L3, L4 = values
    Q1 = 0.5 * (Q1 + Q1.T)
    if polish:
        L1, L2, L3, L4 = polish_equalities(Nt, data, Q1, q2, L1, L2)
    c = shrink_to_box(Q1, box)
    Q1, q2, L1, L2, L3, L4 = (c * a for a in (Q1, q2, L1, L2, L3, L4))
    lmi = dd_lmi_matrix(data.X1, Q1, q2, L1, L2, L3, L4)
    margin = float(np.linalg.eigvalsh(0.5 * (lmi + lmi.T))[0])
    res = float(np.linalg.norm(equality_residual(Nt, data.U0, Q1, q2, L1, L2, L3, L4), "fro"))
    return StabilityCertificate(Q1, q2, L1, L2, L3, L4, res, margin, required_margin, status, ctx)


def _lmi_margin_problem(Nt, data, box):
    """Phase one: the largest ``t`` with the block LMI ``>= t I``; always feasible."""
    M, _, v = assemble_dd_lmi(data, (data.n_x, Nt.n_phi), 1.0)
    t = cp.Variable()
    size = 2 * (data.n_x + Nt.n_phi)
    cons = [0.5 * (M + M.T) - t * np.eye(size) >> 0]
    cons += assemble_equality_constraints(Nt, data, v, hard_nt=True)
    cons += state_constraint_lmi(v.Q1, box, kind="Q1")
    return cp.Problem(cp.Maximize(t), cons), t


def best_lmi_margin(Nt: TransformedN, data: ExperimentData, box: StateBox,
                    solver: str = DEFAULT_SOLVER) -> float:
    """Largest achievable minimum eigenvalue of the block LMI inside the box."""
    prob, t = _lmi_margin_problem(Nt, data, box)
    status = _solve(prob, solver)
    if status not in _OK:
        raise errors.SolverError(f"margin problem returned status {status}")
    return float(t.value)


def verify_transformed(Nt: TransformedN, data: ExperimentData, box: StateBox,
                       margin: float | None = None, ctx: SectorContext | None = None,
                       solver: str = DEFAULT_SOLVER):
    """Certificate search for a fixed transformed matrix, maximising ``log det Q1``.

    A margin-maximisation pass decides feasibility first; near-infeasible log-det
    problems are numerically fragile while the margin problem is always feasible.
    """
    margin = default_margin(data) if margin is None else margin
    best = best_lmi_margin(Nt, data, box, solver)
    if best < margin:
        return Infeasible("infeasible", f"best LMI margin {best:.3e} below required {margin:.3e}")
    _, lmi, v = assemble_dd_lmi(data, (data.n_x, Nt.n_phi), margin)
    cons = [lmi] + assemble_equality_constraints(Nt, data, v, hard_nt=True)
    cons += state_constraint_lmi(v.Q1, box, kind="Q1")
    prob = cp.Problem(cp.Maximize(cp.log_det(v.Q1)), cons)
    status = _solve(prob, solver)
    if status in _INFEASIBLE or status == cp.UNBOUNDED:
        return Infeasible(status)
    if status not in _OK:
        raise errors.SolverError(f"solver returned status {status}")
    cert = certificate_from_values(Nt, data, box, v.values(), margin, status, ctx)
    if cert.margin < margin - MARGIN_TOL or np.linalg.eigvalsh(cert.Q1)[0] <= 0:
        return Infeasible("inaccurate", f"polished LMI margin {cert.margin:.3e} < {margin:.3e}")
    return cert


def verify_fixed_controller(nn: NnController, data: ExperimentData, box: StateBox,
                            margin: float | None = None, solver: str = DEFAULT_SOLVER):
    if not data.pe_ok:
        raise errors.NotPersistentlyExciting("data fail the rank condition")
    if nn.n_x != data.n_x or nn.n_pi != data.n_u:
        raise errors.InvalidDimensions("controller widths do not match the data")
    ctx = sector_context(nn, box)
    Nt = loop_transform(assemble_N(nn), ctx)
    return verify_transformed(Nt, data, box, margin, ctx, solver)


# ----------------------------------------------------------------- (Q, L) update for the ALM loops

@dataclass
class QLStep:
    values: tuple
    status: str
    objective: float


def solve_ql_step(Nt: TransformedN, data: ExperimentData, box: StateBox, Y, rho: float,
                  eta2: float, margin: float | None = None, solver: str = DEFAULT_SOLVER):
    """Minimise ``-eta2 log det Q1 + <Y, R> + rho/2 ||R||_F^2`` with ``R = Nt Q - Ubar L``.

    Subject to the block LMI, ``[I 0] Q = Xbar L`` and the state-constraint LMIs.
    Returns ``QLStep`` or ``Infeasible``.
    """
    margin = default_margin(data) if margin is None else margin
    _, lmi, v = assemble_dd_lmi(data, (data.n_x, Nt.n_phi), margin)
    cons = [lmi] + assemble_equality_constraints(None, data, v, hard_nt=False)
    cons += state_constraint_lmi(v.Q1, box, kind="Q1")
    R = _symbolic_residual(Nt, data, v)
    obj = rho / 2.0 * cp.sum_squares(R)
    if Y is not None and np.any(Y):
        obj = obj + cp.sum(cp.multiply(Y, R))
    if eta2:
        obj = obj - eta2 * cp.log_det(v.Q1)
    prob = cp.Problem(cp.Minimize(obj), cons)
    status = _solve(prob, solver)
    if status in _INFEASIBLE or status == cp.UNBOUNDED:
        return Infeasible(status)
    if status not in _OK:
        raise errors.SolverError(f"solver returned status {status}")
    return QLStep(v.values(), status, float(prob.value))


# ----------------------------------------------------------------- model-based oracle

@dataclass
class ModelBasedCertificate:
    P: np.ndarray
    lam: np.ndarray
    status: str
    sector_context: SectorContext

    @property
    def log_det_Q1(self):
        return -float(np.linalg.slogdet(self.P)[1])


def model_based_condition_matrix(plant: PlantModel, nn: NnController, ctx: SectorContext, P, lam):
    """Untransformed Lyapunov/sector matrix, negative definite for a certificate."""
    N = assemble_N(nn)
    n_x, n_phi = nn.n_x, nn.n_phi
    AB = np.hstack([plant.A, plant.B])
    M_V = AB.T @ P @ AB
    M_V[:n_x, :n_x] -= P
    R_V = np.block([[np.eye(n_x), np.zeros((n_x, n_phi))], [N.N_pix, N.N_piw]])
    R_phi = np.block([[N.N_nux, N.N_nuw], [np.zeros((n_phi, n_x)), np.eye(n_phi)]])
    return R_V.T @ M_V @ R_V + R_phi.T @ stacked_sector_qc(ctx, lam) @ R_phi


def verify_model_based(plant: PlantModel, nn: NnController, box: StateBox,
                       margin: float = 1e-7, lam_min: float = 1e-8,
                       solver: str = DEFAULT_SOLVER):
    """Testing oracle with the plant known: search ``(P, lambda)`` directly.

    The condition is homogeneous in ``(P, lambda)``, so the search runs on the slice
    ``tr(P) + sum(lambda) = 1`` maximising the definiteness margin; the solution is
    then scaled up until the state-constraint LMIs hold.
    """
    ctx = sector_context(nn, box)
    N = assemble_N(nn)
    n_x, n_phi = nn.n_x, nn.n_phi
    P = cp.Variable((n_x, n_x), symmetric=True)
    lam = cp.Variable(n_phi)
    t = cp.Variable()
    AB = np.hstack([plant.A, plant.B])
    E = np.zeros((n_x + plant.n_u, n_x))
    E[:n_x] = np.eye(n_x)
    M_V = AB.T @ P @ AB - E @ P @ E.T
    R_V = np.block([[np.eye(n_x), np.zeros((n_x, n_phi))], [N.N_pix, N.N_piw]])
    R_phi = np.block([[N.N_nux, N.N_nuw], [np.zeros((n_phi, n_x)), np.eye(n_phi)]])
    a, b = ctx.alpha, ctx.beta
    S = cp.bmat([[cp.diag(cp.multiply(-2.0 * a * b, lam)), cp.diag(cp.multiply(a + b, lam))],
                 [cp.diag(cp.multiply(a + b, lam)), cp.diag(-2.0 * lam)]])
    F = R_V.T @ M_V @ R_V + R_phi.T @ S @ R_phi
    cons = [0.5 * (F + F.T) << -t * np.eye(n_x + n_phi), P >> t * np.eye(n_x),
            lam >= lam_min, cp.trace(P) + cp.sum(lam) == 1]
    prob = cp.Problem(cp.Maximize(t), cons)
    status = _solve(prob, solver)
    if status not in _OK:
        raise errors.SolverError(f"solver returned status {status}")
    if t.value < margin:
        return Infeasible("infeasible", f"best margin {float(t.value):.3e} below {margin:.3e}")
    Pv = 0.5 * (P.value + P.value.T)
    lv = np.maximum(np.asarray(lam.value), lam_min)
    Pinv = np.linalg.inv(Pv)
    scale = max(1.0, max(float(h @ Pinv @ h) / xb**2 for h, xb in zip(box.H, box.xbar)))
    Pv, lv = scale * Pv, scale * lv
    Fv = model_based_condition_matrix(plant, nn, ctx, Pv, lv)
    if np.linalg.eigvalsh(0.5 * (Fv + Fv.T))[-1] >= 0 or np.linalg.eigvalsh(Pv)[0] <= 0:
        return Infeasible("inaccurate", "recomputed condition matrix is not negative definite")
    return ModelBasedCertificate(Pv, lv, status, ctx)


# ----------------------------------------------------------------- region of attraction

@dataclass
class RoaEllipsoid:
    P: np.ndarray
    log_det_Q1: float

    def contains(self, x):
        x = np.atleast_2d(x)
        return np.einsum("ij,jk,ik->i", x, self.P, x) <= 1.0

    def semi_axes(self, dims):
        """Semi-axes of the 2-D slice through the origin on coordinates ``dims``."""
        idx = list(dims)
        return 1.0 / np.sqrt(np.linalg.eigvalsh(self.P[np.ix_(idx, idx)]))

    def slice_boundary(self, i, j, num=200):
        """Boundary of ``{x : x' P x <= 1, x_k = 0 for k not in (i, j)}``."""
        S = self.P[np.ix_([i, j], [i, j])]
        w, V = np.linalg.eigh(S)
        t = np.linspace(0.0, 2 * np.pi, num)
        circle = np.vstack([np.cos(t), np.sin(t)])
        return (V @ np.diag(1.0 / np.sqrt(w)) @ circle).T

    def projection_boundary(self, i, j, num=200):
        """Boundary of the projection of the ellipsoid onto coordinates ``(i, j)``."""
        Q = np.linalg.inv(self.P)[np.ix_([i, j], [i, j])]
        w, V = np.linalg.eigh(Q)
        t = np.linspace(0.0, 2 * np.pi, num)
        return (V @ np.diag(np.sqrt(w)) @ np.vstack([np.cos(t), np.sin(t)])).T

    def sample(self, rng, count):
        """Uniform samples from the ellipsoid."""
        n = self.P.shape[0]
        g = rng.standard_normal((count, n))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        r = rng.uniform(0.0, 1.0, count) ** (1.0 / n)
        C = np.linalg.cholesky(np.linalg.inv(self.P))
        return (g * r[:, None]) @ C.T


def roa_from_certificate(cert) -> RoaEllipsoid:
    Q1 = cert.Q1 if hasattr(cert, "Q1") else np.asarray(cert)
    Q1 = 0.5 * (Q1 + Q1.T)
    if np.linalg.cond(Q1) > 1e12:
        raise errors.IllConditionedCertificate("Q1 is numerically singular")
    try:
        C = np.linalg.cholesky(Q1)
    except np.linalg.LinAlgError as exc:
        raise errors.IllConditionedCertificate("Q1 is not positive definite") from exc
    Cinv = np.linalg.inv(C)
    P = Cinv.T @ Cinv
    return RoaEllipsoid(0.5 * (P + P.T), float(2 * np.sum(np.log(np.diag(C)))))


# ----------------------------------------------------------------- soundness checks

@dataclass
class SoundnessReport:
    lmi_margin_ok: bool
    box_lmi_ok: bool
    equality_ok: bool
    lyapunov_violations: int
    rollouts: int

    @property
    def ok(self):
        return (self.lmi_margin_ok and self.box_lmi_ok and self.equality_ok
                and self.lyapunov_violations == 0)


def lyapunov_violations(plant: PlantModel, nn: NnController, P, x0s, ball=1e-6, max_steps=200000):
    """Count rollouts on the true plant where ``V`` fails to decrease before reaching ``ball``.

    Rollouts still outside the ball after ``max_steps`` count as violations.
    """
    X = np.array(np.atleast_2d(x0s), dtype=float)
    v = np.einsum("ij,jk,ik->i", X, P, X)
    active = np.linalg.norm(X, axis=1) > ball
    bad = np.zeros(X.shape[0], dtype=bool)
    for _ in range(max_steps):
        if not active.any():
            break
        Xa = X[active]
        Xn = Xa @ plant.A.T + nn(Xa) @ plant.B.T
        vn = np.einsum("ij,jk,ik->i", Xn, P, Xn)
        idx = np.flatnonzero(active)
        fail = ~(vn < v[idx])
        bad[idx[fail]] = True
        X[idx], v[idx] = Xn, vn
        active[idx] = ~fail & (np.linalg.norm(Xn, axis=1) > ball)
    bad |= active
    return int(bad.sum())


def check_certificate(cert: StabilityCertificate, data: ExperimentData, box: StateBox,
                      plant: PlantModel | None = None, nn: NnController | None = None,
                      samples: int = 1000, seed: int = 0, tol: float = MARGIN_TOL) -> SoundnessReport:
    lmi = dd_lmi_matrix(data.X1, cert.Q1, cert.q2, cert.L1, cert.L2, cert.L3, cert.L4)
    lmi_ok = np.linalg.eigvalsh(0.5 * (lmi + lmi.T))[0] >= cert.required_margin - tol
    box_ok = all(np.linalg.eigvalsh(0.5 * (B + B.T))[0] >= -tol
                 for B in state_constraint_blocks(cert.Q1, box, "Q1"))
    eq_ok = np.linalg.norm(data.X0 @ cert.L1 - cert.Q1) <= EQUALITY_TOL and \
        np.linalg.norm(data.X0 @ cert.L2) <= EQUALITY_TOL
    if nn is not None and cert.sector_context is not None:
        Nt = loop_transform(assemble_N(nn), cert.sector_context)
        R = equality_residual(Nt, data.U0, cert.Q1, cert.q2, cert.L1, cert.L2, cert.L3, cert.L4)
        eq_ok = eq_ok and np.linalg.norm(R) <= EQUALITY_TOL
    violations = 0
    if plant is not None and nn is not None:
        roa = roa_from_certificate(cert)
        x0s = roa.sample(np.random.default_rng(seed), samples)
        violations = lyapunov_violations(plant, nn, roa.P, x0s)
    return SoundnessReport(bool(lmi_ok), bool(box_ok), bool(eq_ok), violations, samples)
