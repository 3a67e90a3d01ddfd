"""LTI plant simulation, experiment data collection and the rank condition."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from .errors import DataTooShort, Diverged, InvalidDimensions

RANK_TOL = 1e-9


@dataclass(frozen=True)
class PlantModel:
    """Ground-truth plant ``x+ = A x + B u``. Only simulation and test oracles read it."""

    A: np.ndarray
    B: np.ndarray
    dt: float = 1.0

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B.reshape(-1, 1)
        if A.shape[0] != A.shape[1] or A.shape[0] < 1:
            raise InvalidDimensions(f"A must be square, got {A.shape}")
        if B.ndim != 2 or B.shape[0] != A.shape[0] or B.shape[1] < 1:
            raise InvalidDimensions(f"B must have {A.shape[0]} rows, got {B.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    def step(self, x, u):
        return self.A @ x + self.B @ u


@dataclass(frozen=True)
class StateBox:
    """Axis-aligned state box plus the polytope ``|H_i x| <= xbar_i`` used for the ROA constraint."""

    lower: np.ndarray
    upper: np.ndarray
    H: np.ndarray = None
    xbar: np.ndarray = None

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float).ravel()
        upper = np.asarray(self.upper, dtype=float).ravel()
        if lower.shape != upper.shape:
            raise InvalidDimensions("box bounds have different lengths")
        if not (np.all(lower < 0) and np.all(upper > 0)):
            raise ValueError("the origin must be interior to the state box")
        H = np.eye(lower.size) if self.H is None else np.atleast_2d(np.asarray(self.H, dtype=float))
        if self.xbar is None:
            if self.H is not None:
                raise ValueError("xbar is required when H is given")
            xbar = np.minimum(np.abs(lower), upper)
        else:
            xbar = np.asarray(self.xbar, dtype=float).ravel()
        if H.shape[1] != lower.size or H.shape[0] != xbar.size:
            raise InvalidDimensions("H / xbar do not match the box dimension")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "xbar", xbar)

    @classmethod
    def symmetric(cls, half_widths):
        w = np.asarray(half_widths, dtype=float)
        return cls(-w, w)

    @property
    def n_x(self) -> int:
        return self.lower.size

    def sample(self, rng, count):
        return rng.uniform(self.lower, self.upper, size=(count, self.n_x))

    def contains(self, x) -> bool:
        x = np.asarray(x)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def to_dict(self):
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist(),
                "H": self.H.tolist(), "xbar": self.xbar.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["lower"], d["upper"], d.get("H"), d.get("xbar"))


@dataclass(frozen=True)
class Excitation:
    kind: str = "uniform"
    lo: float = -1.0
    hi: float = 1.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform", "gaussian"):
            raise ValueError(f"unknown excitation kind {self.kind!r}")

    def draw(self, rng, shape):
        if self.kind == "uniform":
            return rng.uniform(self.lo, self.hi, size=shape)
        return self.sigma * rng.standard_normal(shape)

    @classmethod
    def from_dict(cls, d):
        if d is None:
            return cls()
        return cls(**d)


@dataclass
class ExperimentData:
    """Input/state/successor matrices, one column per sample."""

    U0: np.ndarray
    X0: np.ndarray
    X1: np.ndarray
    seed: int | None = None
    rank_tol: float = RANK_TOL
    pe_ok: bool = field(init=False)

    def __post_init__(self):
        self.U0 = np.atleast_2d(np.asarray(self.U0, dtype=float))
        self.X0 = np.atleast_2d(np.asarray(self.X0, dtype=float))
        self.X1 = np.atleast_2d(np.asarray(self.X1, dtype=float))
        if not (self.U0.shape[1] == self.X0.shape[1] == self.X1.shape[1]):
            raise InvalidDimensions("U0, X0, X1 must have the same number of columns")
        if self.X0.shape[0] != self.X1.shape[0]:
            raise InvalidDimensions("X0 and X1 must have the same number of rows")
        self.pe_ok = check_rank_condition(self, self.rank_tol)

    @property
    def T(self) -> int:
        return self.U0.shape[1]

    @property
    def n_x(self) -> int:
        return self.X0.shape[0]

    @property
    def n_u(self) -> int:
        return self.U0.shape[0]

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, M in (("u", self.U0), ("x0", self.X0), ("x1", self.X1)):
            header = f"name={name} rows={M.shape[0]} cols={M.shape[1]}"
            np.savetxt(out / f"{name}.csv", M, delimiter=",", header=header, fmt="%.17g")
        manifest = {"T": self.T, "n_x": self.n_x, "n_u": self.n_u,
                    "seed": self.seed, "pe_ok": bool(self.pe_ok)}
        (out / "data.json").write_text(json.dumps(manifest, indent=2))
        return out

    @classmethod
    def load(cls, in_dir):
        src = Path(in_dir)
        mats = {}
        for name in ("u", "x0", "x1"):
            path = src / f"{name}.csv"
            with open(path) as fh:
                header = fh.readline().lstrip("# ").split()
            meta = dict(item.split("=") for item in header)
            M = np.loadtxt(path, delimiter=",", ndmin=2)
            M = M.reshape(int(meta["rows"]), int(meta["cols"]))
            mats[name] = M
        seed = None
        sidecar = src / "data.json"
        if sidecar.exists():
            seed = json.loads(sidecar.read_text()).get("seed")
        return cls(mats["u"], mats["x0"], mats["x1"], seed=seed)


def min_samples(n_x: int, n_u: int) -> int:
    """Shortest experiment for which the rank condition can hold."""
    return (n_u + 1) * n_x + n_u


def check_rank_condition(data: ExperimentData, tol: float = RANK_TOL) -> bool:
    stacked = np.vstack([data.U0, data.X0])
    s = np.linalg.svd(stacked, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return False
    rank = int(np.sum(s > tol * s[0]))
    return rank == stacked.shape[0]


def simulate_open_loop(plant: PlantModel, x0, inputs):
    x0 = np.asarray(x0, dtype=float).ravel()
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim == 1:
        inputs = inputs.reshape(-1, plant.n_u) if plant.n_u > 1 else inputs.reshape(-1, 1)
    if x0.size != plant.n_x or inputs.ndim != 2 or inputs.shape[1] != plant.n_u:
        raise InvalidDimensions("initial state or inputs do not match the plant")
    if inputs.shape[0] < 1:
        raise InvalidDimensions("at least one input is required")
    traj = np.empty((inputs.shape[0] + 1, plant.n_x))
    traj[0] = x0
    for k, u in enumerate(inputs):
        traj[k + 1] = plant.A @ traj[k] + plant.B @ u
    return traj


def collect(plant: PlantModel, T: int, excitation: Excitation | None = None, seed: int = 0,
            box: StateBox | None = None) -> ExperimentData:
    """Run one excited experiment of length ``T`` and return its data matrices.

    The initial state is drawn uniformly from ``box`` (the origin when no box is given).
    A rank-deficient result is returned as-is with ``pe_ok`` false.
    """
    bound = min_samples(plant.n_x, plant.n_u)
    if T < bound:
        raise DataTooShort(f"T={T} is below the minimum T >= (n_u+1)n_x+n_u = {bound}")
    excitation = excitation or Excitation()
    rng = np.random.default_rng(seed)
    x0 = box.sample(rng, 1)[0] if box is not None else np.zeros(plant.n_x)
    inputs = excitation.draw(rng, (T, plant.n_u))
    traj = simulate_open_loop(plant, x0, inputs)
    return ExperimentData(inputs.T.copy(), traj[:-1].T.copy(), traj[1:].T.copy(), seed=seed)


@dataclass
class ClosedLoopTrajectory:
    states: np.ndarray
    inputs: np.ndarray
    dt: float

    @property
    def norms(self):
        return np.linalg.norm(self.states, axis=1)

    @property
    def times(self):
        return self.dt * np.arange(self.states.shape[0])


def simulate_closed_loop(plant: PlantModel, controller, x0, steps: int) -> ClosedLoopTrajectory:
    x0 = np.asarray(x0, dtype=float).ravel()
    sizes = controller.layer_sizes
    if sizes[0] != plant.n_x or sizes[-1] != plant.n_u or x0.size != plant.n_x:
        raise InvalidDimensions("controller widths do not match the plant")
    states = np.empty((steps + 1, plant.n_x))
    inputs = np.empty((steps, plant.n_u))
    states[0] = x0
    for k in range(steps):
        u = controller(states[k])
        inputs[k] = u
        states[k + 1] = plant.A @ states[k] + plant.B @ u
        if not np.all(np.isfinite(states[k + 1])):
            raise Diverged(k + 1)
    return ClosedLoopTrajectory(states, inputs, plant.dt)


# Linear bicycle model in lane-error coordinates x = [e, de, e_theta, de_theta].
# Stand-in constants (mid-size sedan at highway speed); not taken from any dataset.
VEHICLE_PARAMS = {
    "mass": 1573.0,     # kg
    "inertia": 2873.0,  # kg m^2
    "lf": 1.10,         # m, CG to front axle
    "lr": 1.58,         # m, CG to rear axle
    "cf": 80000.0,      # N/rad, front cornering stiffness
    "cr": 80000.0,      # N/rad, rear cornering stiffness
    "vx": 30.0,         # m/s
}

VEHICLE_BOX = StateBox([-2.0, -5.0, -1.0, -5.0], [2.0, 5.0, 1.0, 5.0])


def vehicle_lateral(dt: float = 0.02, **overrides) -> PlantModel:
    """Zero-order-hold discretisation of the linear lateral-error bicycle model."""
    p = {**VEHICLE_PARAMS, **overrides}
    m, iz, lf, lr, cf, cr, vx = (p[k] for k in ("mass", "inertia", "lf", "lr", "cf", "cr", "vx"))
    Ac = np.array([
        [0.0, 1.0, 0.0, 0.0],
        [0.0, -2 * (cf + cr) / (m * vx), 2 * (cf + cr) / m, 2 * (cr * lr - cf * lf) / (m * vx)],
        [0.0, 0.0, 0.0, 1.0],
        [0.0, 2 * (cr * lr - cf * lf) / (iz * vx), 2 * (cf * lf - cr * lr) / iz,
         -2 * (cf * lf**2 + cr * lr**2) / (iz * vx)],
    ])
    Bc = np.array([[0.0], [2 * cf / m], [0.0], [2 * cf * lf / iz]])
    M = np.zeros((5, 5))
    M[:4, :4] = Ac
    M[:4, 4:] = Bc
    Md = expm(M * dt)
    return PlantModel(Md[:4, :4], Md[:4, 4:], dt=dt)
