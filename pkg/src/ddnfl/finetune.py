"""Minimal weight perturbations that make an existing controller certifiably stable."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import errors
from .certify import (DEFAULT_SOLVER, StabilityCertificate, equality_residual, solve_ql_step,
                      verify_fixed_controller)
from .network import BlockMatrixN, NnController, assemble_N
from .plant import ExperimentData, StateBox
from .sectors import SectorContext, loop_transform, loop_transform_jvp, sector_context
from .synthesis import initial_values, ul_matrix


@dataclass
class FinetuneConfig:
    eta2: float = 100.0
    eta3: float = 1.0
    rho: float = 1000.0
    sigma: float = 0.005
    sigma_prime: float = 1e-4
    max_outer_iters: int = 15
    max_inner_iters: int = 100
    damping: float = 1.0
    margin: float | None = None
    solver: str = DEFAULT_SOLVER

    def __post_init__(self):
        if self.sigma_prime <= 0 or self.eta3 <= 0:
            raise ValueError("sigma_prime and eta3 must be positive")
        if self.rho <= 0 or self.sigma <= 0:
            raise ValueError("rho and sigma must be positive")
        if self.damping < 0:
            raise ValueError("damping must be nonnegative")


@dataclass
class FinetuneResult:
    original: NnController
    controller: NnController
    certificate: StabilityCertificate | None
    already_stable: bool
    outer_iterations: int = 0
    inner_iterations: list = field(default_factory=list)
    step_norms: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def N_bar(self) -> BlockMatrixN:
        return assemble_N(self.controller)

    @property
    def total_delta(self) -> float:
        return float(np.linalg.norm(self.controller.flat() - self.original.flat()))

    def to_dict(self):
        return {"already_stable": self.already_stable, "total_delta": self.total_delta,
                "outer_iterations": self.outer_iterations,
                "inner_iterations": self.inner_iterations,
                "step_norms": self.step_norms, "residual_sq": self.residuals,
                "wall_time": self.wall_time, "certified": self.certificate is not None}


def _weight_directions(nn: NnController):
    """Unit perturbations of every weight entry, expressed as BlockMatrixN."""
    theta0 = np.zeros(nn.flat().size)
    for j in range(theta0.size):
        e = theta0.copy()
        e[j] = 1.0
        yield assemble_N(nn.with_flat(e))


def transform_jacobian(nn: NnController, ctx: SectorContext):
    """Columns: d vec(Nt) / d theta_j with the sectors frozen at ``ctx``."""
    N = assemble_N(nn)
    cols = [loop_transform_jvp(N, ctx, dN).ravel() for dN in _weight_directions(nn)]
    return np.column_stack(cols)


def _stacked_Q(values):
    Q1, q2 = values[0], values[1]
    n_x, n_phi = Q1.shape[0], len(q2)
    return np.block([[Q1, np.zeros((n_x, n_phi))], [np.zeros((n_phi, n_x)), np.diag(q2)]])


class InnerQP:
    """The fine-tuning objective with ``f`` linearised at ``nn_bar`` (sectors frozen at ``ctx``).

    In the step ``d`` (flat weights) it reads
    ``eta3 ||offset + d||^2 + mu ||d||^2 + <Y, R(d)> + rho/2 ||R(d)||^2`` with
    ``R(d) = (f(N) + Df[d]) Q - Ubar L``; ``offset`` is the perturbation already
    accumulated and ``mu`` an optional proximal damping.
    """

    def __init__(self, nn_bar: NnController, values, Y, ctx: SectorContext,
                 data: ExperimentData, cfg: FinetuneConfig, offset=None):
        Q = _stacked_Q(values)
        F0 = loop_transform(assemble_N(nn_bar), ctx).full
        self.b = (F0 @ Q - ul_matrix(data, *values[2:])).ravel()
        J = transform_jacobian(nn_bar, ctx)
        # vec(D Q) for row-major vec(D) is kron(I, Q^T) vec(D)
        self.A = np.kron(np.eye(F0.shape[0]), Q.T) @ J
        self.y = np.zeros_like(self.b) if Y is None else np.asarray(Y, dtype=float).ravel()
        self.offset = np.zeros(J.shape[1]) if offset is None else np.asarray(offset, dtype=float)
        self.eta3, self.rho = cfg.eta3, cfg.rho
        self._gram = self.A.T @ self.A

    def value(self, step, mu=0.0):
        r = self.b + self.A @ step
        total = self.offset + step
        return float(self.eta3 * total @ total + mu * step @ step + self.y @ r
                     + 0.5 * self.rho * r @ r)

    def solve(self, mu=0.0):
        H = 2.0 * (self.eta3 + mu) * np.eye(self.A.shape[1]) + self.rho * self._gram
        g = self.A.T @ (self.y + self.rho * self.b) + 2.0 * self.eta3 * self.offset
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError as exc:
            raise errors.SolverError("fine-tuning QP is singular") from exc
        if not np.all(np.isfinite(step)):
            raise errors.SolverError("fine-tuning QP returned a non-finite step")
        return step


def linearized_inner_step(nn_bar: NnController, values, Y, ctx: SectorContext,
                          data: ExperimentData, cfg: FinetuneConfig, offset=None, mu=0.0):
    """Minimiser of the linearised QP at ``nn_bar``, as a flat weight step."""
    return InnerQP(nn_bar, values, Y, ctx, data, cfg, offset).solve(mu)


def finetune_objective(nn_bar: NnController, original: NnController, values, Y,
                       data: ExperimentData, box: StateBox, cfg: FinetuneConfig):
    """Fine-tuning objective at ``nn_bar`` with its own sectors; the log det term is omitted."""
    ctx = sector_context(nn_bar, box)
    R = loop_transform(assemble_N(nn_bar), ctx).full @ _stacked_Q(values) - ul_matrix(data, *values[2:])
    delta = nn_bar.flat() - original.flat()
    Y = np.zeros_like(R) if Y is None else Y
    return float(cfg.eta3 * delta @ delta + np.sum(Y * R) + 0.5 * cfg.rho * np.sum(R * R))


def inner_loop(nn_bar: NnController, original: NnController, values, Y,
               data: ExperimentData, box: StateBox, cfg: FinetuneConfig):
    """Repeated linearised QP steps until ``||N_f||_F^2 <= sigma_prime``.

    A step is kept only if the objective, re-evaluated with refreshed sectors, does not
    increase; otherwise the proximal damping grows and the QP is re-solved at the same
    point. Returns ``(nn_bar, step_norms_sq, objective_values, converged)``.
    """
    mu = cfg.damping
    current = finetune_objective(nn_bar, original, values, Y, data, box, cfg)
    norms, objectives = [], [current]
    qp = None
    while len(norms) < cfg.max_inner_iters:
        if qp is None:
            ctx = sector_context(nn_bar, box)
            qp = InnerQP(nn_bar, values, Y, ctx, data, cfg, nn_bar.flat() - original.flat())
        step = qp.solve(mu)
        norms.append(float(step @ step))
        trial = nn_bar.with_flat(nn_bar.flat() + step)
        value = finetune_objective(trial, original, values, Y, data, box, cfg)
        if value <= current:
            nn_bar, current, qp = trial, value, None
            objectives.append(current)
            mu = max(cfg.damping, mu / 4.0)
        else:
            mu = 4.0 * max(mu, cfg.eta3)
        if norms[-1] <= cfg.sigma_prime:
            return nn_bar, norms, objectives, True
    return nn_bar, norms, objectives, False


def finetune(nn: NnController, data: ExperimentData, box: StateBox,
             cfg: FinetuneConfig | None = None) -> FinetuneResult:
    """Verify ``nn``; if no certificate exists, perturb its weights until one does.

    The inner loop repeats linearised QP steps (sectors and loop transform refreshed
    after every step) until ``||N_f||_F^2 <= sigma_prime``; the outer loop updates
    ``(Q, L)`` and the multiplier as in synthesis.
    """
    cfg = cfg or FinetuneConfig()
    t_start = time.perf_counter()
    if not data.pe_ok:
        raise errors.NotPersistentlyExciting("data fail the rank condition")
    cert = verify_fixed_controller(nn, data, box, cfg.margin, cfg.solver)
    if cert:
        return FinetuneResult(nn, nn, cert, True, wall_time=time.perf_counter() - t_start)

    nn_bar = nn
    values = initial_values(nn_bar, data, box, cfg)
    n_phi = nn.n_phi
    Y = np.zeros((data.n_u + n_phi, data.n_x + n_phi))
    result = FinetuneResult(nn, nn_bar, None, False)

    def residual_sq(net):
        R = equality_residual(loop_transform(assemble_N(net), sector_context(net, box)),
                              data.U0, *values)
        return float(np.sum(R * R)), R

    res_sq, _ = residual_sq(nn_bar)
    if res_sq <= cfg.sigma:
        cert = verify_fixed_controller(nn_bar, data, box, cfg.margin, cfg.solver)
    k = 0
    while not cert and k < cfg.max_outer_iters:
        nn_bar, steps, _, ok = inner_loop(nn_bar, nn, values, Y, data, box, cfg)
        if not ok:
            result.controller = nn_bar
            result.outer_iterations = k
            result.step_norms.append(steps)
            raise errors.InnerLoopStalled(k + 1, result)
        result.inner_iterations.append(len(steps))
        result.step_norms.append(steps)

        ctx = sector_context(nn_bar, box)
        Nt = loop_transform(assemble_N(nn_bar), ctx)
        sdp = solve_ql_step(Nt, data, box, Y, cfg.rho, cfg.eta2, cfg.margin, cfg.solver)
        if not sdp:
            result.controller = nn_bar
            raise errors.SdpInfeasibleAtIteration(k + 1, sdp.status, result)
        values = sdp.values
        R = equality_residual(Nt, data.U0, *values)
        Y = Y + cfg.rho * R
        k += 1
        res_sq = float(np.sum(R * R))
        result.residuals.append(res_sq)
        if res_sq <= cfg.sigma:
            cert = verify_fixed_controller(nn_bar, data, box, cfg.margin, cfg.solver)

    result.controller = nn_bar
    result.outer_iterations = k
    result.wall_time = time.perf_counter() - t_start
    if not cert:
        raise errors.NotConverged(result)
    result.certificate = cert
    return result
