"""Stable controller synthesis by augmented-Lagrangian alternation.

Each outer iteration trains the network against the imitation loss plus the
multiplier/penalty terms of the equality ``f(N) Q = Ubar L`` (with ``(Q, L, Y)``
frozen), then re-solves the stability SDP for ``(Q, L)`` with ``f(N)`` frozen, then
takes a multiplier step.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import solve_discrete_are

from . import errors
from .certify import (DEFAULT_SOLVER, Infeasible, StabilityCertificate, equality_residual,
                      solve_ql_step, verify_fixed_controller)
from .network import (Adam, ImitationLoss, NnController, WeightedSum, assemble_N, gradient,
                      init_controller, weight_grads_from_N)
from .plant import ExperimentData, PlantModel, StateBox
from .sectors import SectorContext, loop_transform, loop_transform_vjp, sector_context


# ----------------------------------------------------------------- expert demonstrations

@dataclass
class ExpertSpec:
    """Either LQR weights or an explicit linear gain ``u = K x``."""

    Q: list | None = None
    R: list | None = None
    K: list | None = None

    def gain(self, plant: PlantModel | None):
        if self.K is not None:
            return np.atleast_2d(np.asarray(self.K, dtype=float))
        if plant is None:
            raise ValueError("an LQR expert needs the plant")
        if self.Q is None:
            Q = np.eye(plant.n_x)
        elif np.ndim(self.Q) <= 1:
            Q = np.diag(np.ravel(self.Q)) if np.size(self.Q) > 1 else float(np.ravel(self.Q)[0]) * np.eye(plant.n_x)
        else:
            Q = np.asarray(self.Q, dtype=float)
        R = np.atleast_2d(np.asarray(1.0 if self.R is None else self.R, dtype=float))
        if R.shape == (1, 1) and plant.n_u > 1:
            R = R[0, 0] * np.eye(plant.n_u)
        return lqr_gain(plant.A, plant.B, Q, R)


def lqr_gain(A, B, Q, R):
    """Discrete-time LQR gain ``K`` for ``u = K x`` (sign included)."""
    try:
        X = solve_discrete_are(A, B, Q, R)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise errors.ExpertSynthesisFailed(f"Riccati equation has no stabilising solution: {exc}") from exc
    K = -np.linalg.solve(R + B.T @ X @ B, B.T @ X @ A)
    if not np.all(np.isfinite(K)) or np.max(np.abs(np.linalg.eigvals(A + B @ K))) >= 1.0:
        raise errors.ExpertSynthesisFailed("Riccati solution does not stabilise the pair")
    return K


def generate_expert_demos(plant: PlantModel | None, box: StateBox, spec: ExpertSpec,
                          count: int = 500, seed: int = 0):
    """States uniform over the box and expert actions; returns ``(states, actions)`` as rows."""
    K = spec.gain(plant)
    states = box.sample(np.random.default_rng(seed), count)
    return states, states @ K.T


# ----------------------------------------------------------------- objectives

class ConstraintPenalty:
    """``<Y, f(N)Q - Ubar L> + rho/2 ||f(N)Q - Ubar L||_F^2`` with the sectors frozen."""

    def __init__(self, ctx: SectorContext, Q1, q2, UL, Y, rho):
        self.ctx = ctx
        self.Q = np.block([[Q1, np.zeros((Q1.shape[0], len(q2)))],
                           [np.zeros((len(q2), Q1.shape[0])), np.diag(q2)]])
        self.UL = UL
        self.Y = np.zeros_like(UL) if Y is None else Y
        self.rho = rho

    def residual(self, nn):
        return loop_transform(assemble_N(nn), self.ctx).full @ self.Q - self.UL

    def value(self, nn):
        R = self.residual(nn)
        return float(np.sum(self.Y * R) + 0.5 * self.rho * np.sum(R * R))

    def __call__(self, nn):
        N = assemble_N(nn)
        R = loop_transform(N, self.ctx).full @ self.Q - self.UL
        value = float(np.sum(self.Y * R) + 0.5 * self.rho * np.sum(R * R))
        G = (self.Y + self.rho * R) @ self.Q.T
        return value, weight_grads_from_N(loop_transform_vjp(N, self.ctx, G), nn.layer_sizes)


def ul_matrix(data: ExperimentData, L1, L2, L3, L4):
    return np.block([[data.U0 @ L1, data.U0 @ L2], [L3, L4]])


def augmented_lagrangian_value(nn: NnController, ctx: SectorContext, values, Y, cfg,
                               data: ExperimentData, loss: ImitationLoss | None = None):
    """Full augmented Lagrangian at ``(N, Q, L, Y)``."""
    Q1, q2, L1, L2, L3, L4 = values
    sign, logdet = np.linalg.slogdet(Q1)
    if sign <= 0 or np.linalg.eigvalsh(0.5 * (Q1 + Q1.T))[0] <= 0:
        raise errors.DomainError("Q1 must be positive definite")
    Nt = loop_transform(assemble_N(nn), ctx)
    R = equality_residual(Nt, data.U0, Q1, q2, L1, L2, L3, L4)
    pred = loss.value(nn) if loss is not None else 0.0
    Y = np.zeros_like(R) if Y is None else Y
    return float(cfg.eta1 * pred - cfg.eta2 * logdet + np.sum(Y * R) + 0.5 * cfg.rho * np.sum(R * R))


# ----------------------------------------------------------------- configuration and trace

@dataclass
class SynthesisConfig:
    eta1: float = 100.0
    eta2: float = 100.0
    rho: float = 1000.0
    sigma: float = 0.005
    max_outer_iters: int = 20
    inner_epochs: int = 200
    lr: float = 1e-3
    pretrain_epochs: int = 2000
    pretrain_lr: float = 1e-2
    seed: int = 0
    expert: ExpertSpec = field(default_factory=ExpertSpec)
    demo_count: int = 500
    margin: float | None = None
    solver: str = DEFAULT_SOLVER

    def __post_init__(self):
        if isinstance(self.expert, dict):
            self.expert = ExpertSpec(**self.expert)
        if self.rho <= 0 or self.sigma <= 0:
            raise ValueError("rho and sigma must be positive")
        if self.eta1 < 0 or self.eta2 < 0:
            raise ValueError("trade-off weights must be nonnegative")

    def to_dict(self):
        return asdict(self)


@dataclass
class IterationRecord:
    iteration: int
    prediction_loss: float
    log_det_Q1: float
    residual_norm: float
    residual_sq: float
    multiplier_norm: float
    sdp_status: str
    wall_time: float
    verified: bool = False


TRACE_FIELDS = [f for f in IterationRecord.__dataclass_fields__]


def write_trace(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
        w.writeheader()
        for r in records:
            w.writerow(asdict(r))


@dataclass
class SynthesisResult:
    controller: NnController
    certificate: StabilityCertificate | Infeasible | None
    trace: list
    converged: bool
    values: tuple = None
    multipliers: list = field(default_factory=list)
    residuals: list = field(default_factory=list)

    @property
    def verified(self):
        return isinstance(self.certificate, StabilityCertificate)

    @property
    def prediction_loss(self):
        return self.trace[-1].prediction_loss if self.trace else float("nan")


# ----------------------------------------------------------------- algorithm

def _fallback_values(data: ExperimentData, n_phi: int):
    """Q = I with L a least-squares fit of ``[I 0] Q = Xbar L``."""
    n_x = data.n_x
    L1 = np.linalg.lstsq(data.X0, np.eye(n_x), rcond=None)[0]
    return (np.eye(n_x), np.ones(n_phi), L1, np.zeros((data.T, n_phi)),
            np.zeros((n_phi, n_x)), np.zeros((n_phi, n_phi)))


def initial_values(nn, data, box, cfg):
    ctx = sector_context(nn, box)
    Nt = loop_transform(assemble_N(nn), ctx)
    try:
        step = solve_ql_step(Nt, data, box, None, cfg.rho, cfg.eta2, cfg.margin, cfg.solver)
    except errors.SolverError:
        step = None
    if not step:
        return _fallback_values(data, nn.n_phi)
    return step.values


def train_network(nn: NnController, objective, epochs: int, lr: float) -> NnController:
    opt = Adam(nn.weights, lr=lr)
    weights = nn.weights
    for _ in range(epochs):
        grads = gradient(NnController(weights), objective)
        weights = opt.step(weights, grads)
    return NnController(weights)


def synthesize(data: ExperimentData, box: StateBox, arch, cfg: SynthesisConfig, demos,
               initial: NnController | None = None) -> SynthesisResult:
    """Train a controller whose loop with the unknown plant is certified stable.

    ``demos`` is the ``(states, actions)`` pair driving the imitation loss. Raises
    ``SdpInfeasibleAtIteration`` if the (Q, L) problem becomes infeasible and
    ``NotConverged`` (carrying the best iterate) when the budget runs out.
    """
    if not data.pe_ok:
        raise errors.NotPersistentlyExciting("data fail the rank condition")
    arch = list(arch)
    if arch[0] != data.n_x or arch[-1] != data.n_u:
        raise errors.InvalidDimensions("architecture widths do not match the data")

    loss = ImitationLoss(*demos)
    if initial is None:
        nn = init_controller(arch, seed=cfg.seed)
        nn = train_network(nn, loss, cfg.pretrain_epochs, cfg.pretrain_lr)
    else:
        nn = initial
    values = initial_values(nn, data, box, cfg)
    n_phi = nn.n_phi
    Y = np.zeros((data.n_u + n_phi, data.n_x + n_phi))
    ctx = sector_context(nn, box)
    R = equality_residual(loop_transform(assemble_N(nn), ctx), data.U0, *values)

    trace, multipliers, residuals = [], [Y.copy()], []
    best = (np.sum(R * R), nn, values)
    cert = None
    if np.sum(R * R) <= cfg.sigma:
        cert = verify_fixed_controller(nn, data, box, cfg.margin, cfg.solver)
    k = 0
    while not cert and k < cfg.max_outer_iters:
        t0 = time.perf_counter()
        Q1, q2, L1, L2, L3, L4 = values
        penalty = ConstraintPenalty(ctx, Q1, q2, ul_matrix(data, L1, L2, L3, L4), Y, cfg.rho)
        nn = train_network(nn, WeightedSum((cfg.eta1, loss), (1.0, penalty)), cfg.inner_epochs, cfg.lr)

        ctx = sector_context(nn, box)
        Nt = loop_transform(assemble_N(nn), ctx)
        step = solve_ql_step(Nt, data, box, Y, cfg.rho, cfg.eta2, cfg.margin, cfg.solver)
        if not step:
            partial = SynthesisResult(nn, None, trace, False, values, multipliers, residuals)
            raise errors.SdpInfeasibleAtIteration(k + 1, step.status, partial)
        values = step.values
        R = equality_residual(Nt, data.U0, *values)
        Y = Y + cfg.rho * R
        res_sq = float(np.sum(R * R))
        multipliers.append(Y.copy())
        residuals.append(R)
        k += 1
        trace.append(IterationRecord(k, loss.value(nn), float(np.linalg.slogdet(values[0])[1]),
                                     float(np.sqrt(res_sq)), res_sq, float(np.linalg.norm(Y)),
                                     step.status, time.perf_counter() - t0))
        if res_sq < best[0]:
            best = (res_sq, nn, values)
        if res_sq <= cfg.sigma:
            # the residual test alone leaves f(N) Q = Ubar L inexact; only an exact
            # certificate for the current network ends the run
            cert = verify_fixed_controller(nn, data, box, cfg.margin, cfg.solver)
            trace[-1].verified = bool(cert)

    if not cert:
        result = SynthesisResult(best[1], cert or None, trace, False, best[2], multipliers, residuals)
        raise errors.NotConverged(result)
    return SynthesisResult(nn, cert, trace, True, values, multipliers, residuals)
