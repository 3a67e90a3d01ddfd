"""Pre-activation bounds, local tanh sectors and the sector-normalising loop transformation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInterval, InvalidMultiplier, SingularTransform
from .network import BlockMatrixN, NnController, assemble_N
from .plant import StateBox


@dataclass(frozen=True)
class SectorContext:
    nu_lo: np.ndarray
    nu_hi: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    @property
    def A_phi(self):
        return np.diag(self.alpha)

    @property
    def B_phi(self):
        return np.diag(self.beta)

    @property
    def half_width(self):
        """Diagonal of (B - A)/2."""
        return 0.5 * (self.beta - self.alpha)

    @property
    def center(self):
        """Diagonal of (A + B)/2."""
        return 0.5 * (self.alpha + self.beta)

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("nu_lo", "nu_hi", "alpha", "beta")}

    @classmethod
    def from_dict(cls, d):
        return cls(*(np.asarray(d[k], dtype=float) for k in ("nu_lo", "nu_hi", "alpha", "beta")))

    @classmethod
    def identity(cls, n_phi):
        """The already-normalised sector [-1, 1]."""
        ones = np.ones(n_phi)
        return cls(-np.inf * ones, np.inf * ones, -ones, ones)


@dataclass(frozen=True)
class TransformedN:
    Nt_pix: np.ndarray
    Nt_piz: np.ndarray
    Nt_nux: np.ndarray
    Nt_nuz: np.ndarray

    @property
    def full(self):
        return np.block([[self.Nt_pix, self.Nt_piz], [self.Nt_nux, self.Nt_nuz]])

    @property
    def n_x(self):
        return self.Nt_pix.shape[1]

    @property
    def n_phi(self):
        return self.Nt_nuz.shape[0]

    @classmethod
    def from_full(cls, M, n_x, n_pi):
        return cls(M[:n_pi, :n_x], M[:n_pi, n_x:], M[n_pi:, :n_x], M[n_pi:, n_x:])


def preactivation_bounds(nn: NnController, box: StateBox):
    """Interval bound propagation of the hidden pre-activations over ``box``."""
    lo, hi = box.lower, box.upper
    nu_lo, nu_hi = [], []
    for W in nn.weights[:-1]:
        Wp, Wn = np.maximum(W, 0.0), np.minimum(W, 0.0)
        l = Wp @ lo + Wn @ hi
        h = Wp @ hi + Wn @ lo
        # zero weights and a box around the origin keep 0 inside; clip guards rounding
        l, h = np.minimum(l, 0.0), np.maximum(h, 0.0)
        nu_lo.append(l)
        nu_hi.append(h)
        lo, hi = np.tanh(l), np.tanh(h)
    return np.concatenate(nu_lo), np.concatenate(nu_hi)


def _secant(v):
    v = np.abs(np.asarray(v, dtype=float))
    out = np.ones_like(v)
    nz = v > 0
    out[nz] = np.tanh(v[nz]) / v[nz]
    return out


def tanh_sector(nu_lo, nu_hi):
    """Tightest local sector ``[alpha, 1]`` of tanh on ``[nu_lo, nu_hi]``.

    Works elementwise. The secant slope tanh(v)/v is even and decreasing in |v|,
    so the endpoint of larger magnitude decides alpha.
    """
    lo = np.asarray(nu_lo, dtype=float)
    hi = np.asarray(nu_hi, dtype=float)
    if np.any(lo > 0) or np.any(hi < 0):
        raise InvalidInterval("sector interval must contain 0")
    alpha = np.minimum(_secant(lo), _secant(hi))
    beta = np.ones_like(alpha)
    if alpha.ndim == 0:
        return float(alpha), float(beta)
    return alpha, beta


def sector_context(nn: NnController, box: StateBox) -> SectorContext:
    nu_lo, nu_hi = preactivation_bounds(nn, box)
    alpha, beta = tanh_sector(nu_lo, nu_hi)
    return SectorContext(nu_lo, nu_hi, alpha, beta)


def stacked_sector_qc(ctx: SectorContext, lam):
    """Quadratic form in ``[nu; omega]`` that is nonnegative under the stacked sector."""
    lam = np.asarray(lam, dtype=float).ravel()
    if np.any(lam < 0):
        raise InvalidMultiplier("sector multipliers must be nonnegative")
    a, b = ctx.alpha, ctx.beta
    return np.block([[np.diag(-2.0 * a * b * lam), np.diag((a + b) * lam)],
                     [np.diag((a + b) * lam), np.diag(-2.0 * lam)]])


def loop_transform(N: BlockMatrixN, ctx: SectorContext) -> TransformedN:
    """Rewrite ``[u; nu] = N [x; omega]`` in terms of the normalised ``z`` (sector [-1, 1])."""
    d1, d2 = ctx.half_width, ctx.center
    C1 = N.N_piw * d1
    C2 = N.N_piw * d2
    C3 = N.N_nuw * d1
    C4 = N.N_nuw * d2
    I = np.eye(N.n_phi)
    try:
        M = np.linalg.inv(I - C4)
    except np.linalg.LinAlgError as exc:
        raise SingularTransform("I - C4 is singular") from exc
    Nt_nux = M @ N.N_nux
    Nt_nuz = M @ C3
    return TransformedN(N.N_pix + C2 @ Nt_nux, C1 + C2 @ Nt_nuz, Nt_nux, Nt_nuz)


def transformed(nn: NnController, box: StateBox):
    """Sector context and transformed matrix of ``nn`` over ``box``."""
    ctx = sector_context(nn, box)
    return ctx, loop_transform(assemble_N(nn), ctx)


def normalized_activation(nu, omega, ctx: SectorContext):
    """``z`` with ``omega = (B-A)/2 z + (A+B)/2 nu``; zero where the sector is degenerate."""
    d1, d2 = ctx.half_width, ctx.center
    num = omega - d2 * nu
    return np.divide(num, d1, out=np.zeros_like(num, dtype=float), where=d1 > 0)


def _bottom_and_inverse(N: BlockMatrixN, ctx: SectorContext):
    d1, d2 = ctx.half_width, ctx.center
    M = np.linalg.inv(np.eye(N.n_phi) - N.N_nuw * d2)
    bottom = M @ np.hstack([N.N_nux, N.N_nuw * d1])
    return M, bottom


def loop_transform_vjp(N: BlockMatrixN, ctx: SectorContext, G: np.ndarray) -> BlockMatrixN:
    """Pull a cotangent ``G = dJ/dNt`` back to ``dJ/dN`` with the sectors held fixed."""
    n_x, n_pi = N.n_x, N.n_pi
    d1, d2 = ctx.half_width, ctx.center
    M, bottom = _bottom_and_inverse(N, ctx)
    G_top, G_bot = G[:n_pi], G[n_pi:]
    g_pix = G_top[:, :n_x]
    g_piw = G_top[:, n_x:] * d1 + (G_top @ bottom.T) * d2
    Gb = G_bot + (N.N_piw * d2).T @ G_top
    H = M.T @ Gb
    g_nux = H[:, :n_x]
    g_nuw = H[:, n_x:] * d1 + (H @ bottom.T) * d2
    return BlockMatrixN(g_pix, g_piw, g_nux, g_nuw)


def loop_transform_jvp(N: BlockMatrixN, ctx: SectorContext, dN: BlockMatrixN) -> np.ndarray:
    """Directional derivative of ``Nt`` along ``dN`` with the sectors held fixed."""
    d1, d2 = ctx.half_width, ctx.center
    M, bottom = _bottom_and_inverse(N, ctx)
    dbottom = M @ ((dN.N_nuw * d2) @ bottom + np.hstack([dN.N_nux, dN.N_nuw * d1]))
    dtop = (np.hstack([dN.N_pix, dN.N_piw * d1]) + (dN.N_piw * d2) @ bottom
            + (N.N_piw * d2) @ dbottom)
    return np.vstack([dtop, dbottom])
