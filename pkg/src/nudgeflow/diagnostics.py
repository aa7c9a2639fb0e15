"""Synchronization-condition checking, Grashof number, decay fitting, and
the manufactured-solution convergence study."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ErrorHistory",
    "TheoremReport",
    "grashof",
    "check_theorem",
    "fit_decay_rate",
    "DecayFit",
    "mms_convergence_study",
    "mms_exact_fields",
]

MACHINE_FLOOR = 1e-13


@dataclass
class ErrorHistory:
    """Time series of twin-experiment diagnostics for one run."""

    times: list = field(default_factory=list)
    rel_l2_error: list = field(default_factory=list)
    energy_reference: list = field(default_factory=list)
    energy_assimilated: list = field(default_factory=list)
    div_residual: list = field(default_factory=list)
    wall_clock: float = 0.0

    def append(self, t, err, e_ref, e_da, div_res):
        if self.times and t <= self.times[-1]:
            raise ValueError("history times must be strictly increasing")
        self.times.append(float(t))
        self.rel_l2_error.append(float(err))
        self.energy_reference.append(float(e_ref))
        self.energy_assimilated.append(float(e_da))
        self.div_residual.append(float(div_res))

    def arrays(self):
        return (
            np.asarray(self.times),
            np.asarray(self.rel_l2_error),
            np.asarray(self.energy_reference),
            np.asarray(self.energy_assimilated),
            np.asarray(self.div_residual),
        )

    def final_error(self) -> float:
        return self.rel_l2_error[-1]

    def first_crossing(self, threshold: float) -> float | None:
        """Earliest recorded time with error below the threshold."""
        for t, e in zip(self.times, self.rel_l2_error):
            if e < threshold:
                return t
        return None


def grashof(f_l2: float, nu: float, lambda1: float) -> float:
    """Dimensionless forcing strength ||f|| / (nu^2 lambda1)."""
    if nu <= 0 or lambda1 <= 0:
        raise ValueError("nu and lambda1 must be positive")
    return f_l2 / (nu**2 * lambda1)


def velocity_bound_slack(history: ErrorHistory, nu: float, grashof_number: float,
                         settle_fraction: float = 0.5) -> float:
    """Excess of the reference kinetic energy over the forced-flow a-priori
    bound ||u||^2 <= 2 nu^2 G^2, evaluated after the settling window.

    Returns max ||u||^2 / (2 nu^2 G^2) - 1; negative values mean the bound
    holds with room to spare.  Reported as a diagnostic, not asserted.
    """
    if grashof_number <= 0:
        return float("nan")
    e = np.asarray(history.energy_reference)
    tail = e[int(settle_fraction * len(e)):]
    bound = 2.0 * nu**2 * grashof_number**2
    return float((2.0 * tail / bound).max() - 1.0)


def _ratio_margin(favorable: float, unfavorable: float) -> float:
    """Signed margin favorable/unfavorable - 1; >= 0 means satisfied."""
    if unfavorable == 0.0:
        return math.inf if favorable >= 0 else -math.inf
    return favorable / unfavorable - 1.0


@dataclass
class TheoremReport:
    """Evaluation of the three synchronization conditions with margins.

    condition_1:  4 C1 mu H^2 <= nu       (resolution vs. feedback strength)
    condition_2:  mu >= 4 G^2 nu lambda1  (feedback strong enough)
    condition_3:  delta <= (C1/Cp) H      (unobserved gap thin enough)

    Margins are signed ratios with 0 on the boundary; boundary cases count
    as satisfied.
    """

    nu: float
    mu: float
    H: float
    delta: float
    lambda1: float
    grashof_number: float
    c1: float
    cp: float
    condition_1: bool = field(init=False)
    margin_1: float = field(init=False)
    condition_2: bool = field(init=False)
    margin_2: float = field(init=False)
    condition_3: bool = field(init=False)
    margin_3: float = field(init=False)
    satisfied: bool = field(init=False)

    def __post_init__(self):
        lhs1 = 4.0 * self.c1 * self.mu * self.H**2
        self.margin_1 = _ratio_margin(self.nu, lhs1)
        self.condition_1 = lhs1 <= self.nu
        rhs2 = 4.0 * self.grashof_number**2 * self.nu * self.lambda1
        self.margin_2 = _ratio_margin(self.mu, rhs2)
        self.condition_2 = self.mu >= rhs2
        rhs3 = (self.c1 / self.cp) * self.H
        self.margin_3 = _ratio_margin(rhs3, self.delta)
        self.condition_3 = self.delta <= rhs3
        self.satisfied = self.condition_1 and self.condition_2 and self.condition_3

    def rows(self):
        return [
            ("1: 4*C1*mu*H^2 <= nu", self.condition_1, self.margin_1),
            ("2: mu >= 4*G^2*nu*lambda1", self.condition_2, self.margin_2),
            ("3: delta <= (C1/Cp)*H", self.condition_3, self.margin_3),
        ]

    def as_text(self) -> str:
        lines = [
            f"nu={self.nu:.6g}  mu={self.mu:.6g}  H={self.H:.6g}  "
            f"delta={self.delta:.6g}",
            f"lambda1={self.lambda1:.6g}  G={self.grashof_number:.6g}  "
            f"C1={self.c1:.6g}  Cp={self.cp:.6g}",
        ]
        for name, ok, margin in self.rows():
            lines.append(f"condition {name}: {'ok' if ok else 'FAIL'} (margin {margin:+.3g})")
        lines.append(f"overall: {'satisfied' if self.satisfied else 'not satisfied'}")
        return "\n".join(lines)


def check_theorem(nu, mu, H, delta, lambda1, grashof_number, c1, cp) -> TheoremReport:
    """Evaluate the three synchronization inequalities with signed margins."""
    if min(nu, H, lambda1, cp) <= 0 or min(mu, delta, grashof_number, c1) < 0:
        raise ValueError("inputs must be positive (mu, delta, G, C1 may be zero)")
    return TheoremReport(
        nu=float(nu), mu=float(mu), H=float(H), delta=float(delta),
        lambda1=float(lambda1), grashof_number=float(grashof_number),
        c1=float(c1), cp=float(cp),
    )


@dataclass
class DecayFit:
    rate: float
    r_squared: float
    n_samples: int
    window: tuple
    decaying: bool


def fit_decay_rate(history: ErrorHistory, window: tuple[float, float]) -> DecayFit:
    """Least-squares slope of log(error) vs time over the window.

    The first 5% of the window is dropped as transient and samples at or
    below the machine-precision floor are excluded.  Requires at least five
    usable samples.
    """
    t, e = np.asarray(history.times), np.asarray(history.rel_l2_error)
    t0, t1 = window
    lo = t0 + 0.05 * (t1 - t0)
    sel = (t >= lo) & (t <= t1) & (e > MACHINE_FLOOR)
    if sel.sum() < 5:
        raise ValueError(f"only {int(sel.sum())} usable samples in window {window}")
    ts, log_e = t[sel], np.log(e[sel])
    a = np.vstack([ts, np.ones_like(ts)]).T
    (slope, intercept), res, *_ = np.linalg.lstsq(a, log_e, rcond=None)
    ss_tot = float(np.sum((log_e - log_e.mean()) ** 2))
    if ss_tot <= 1e-20 * max(1.0, float(np.abs(log_e).max()) ** 2):
        return DecayFit(0.0, float("nan"), int(sel.sum()), (lo, t1), False)
    ss_res = float(np.sum((a @ np.array([slope, intercept]) - log_e) ** 2))
    r2 = 1.0 - ss_res / ss_tot
    return DecayFit(float(slope), r2, int(sel.sum()), (lo, t1), slope < 0)


# ---------------------------------------------------------------------------
# manufactured-solution verification
# ---------------------------------------------------------------------------


def mms_exact_fields(nu: float):
    """Closed-form solution, pressure, and forcing for the unit square.

    velocity u = exp(-t) * curl(psi) with psi = x^2 (1-x)^2 y^2 (1-y)^2 and
    p = sin(pi x) cos(pi y), which already has zero mean.  The returned
    forcing(t, consistency_dt) satisfies the momentum equation; a positive
    consistency_dt adds the term compensating the convection linearization
    at the previous time level, (e^{dt} - 1) (u . grad) u.
    """
    import sympy as sy

    x, y, t = sy.symbols("x y t")
    psi = (x * (1 - x)) ** 2 * (y * (1 - y)) ** 2
    u1 = sy.exp(-t) * sy.diff(psi, y)
    u2 = -sy.exp(-t) * sy.diff(psi, x)
    p = sy.sin(sy.pi * x) * sy.cos(sy.pi * y)

    conv1 = u1 * sy.diff(u1, x) + u2 * sy.diff(u1, y)
    conv2 = u1 * sy.diff(u2, x) + u2 * sy.diff(u2, y)
    f1 = sy.diff(u1, t) + conv1 - nu * (sy.diff(u1, x, 2) + sy.diff(u1, y, 2)) + sy.diff(p, x)
    f2 = sy.diff(u2, t) + conv2 - nu * (sy.diff(u2, x, 2) + sy.diff(u2, y, 2)) + sy.diff(p, y)

    mods = ["numpy"]
    u_fn = sy.lambdify((x, y, t), (u1, u2), mods)
    p_fn = sy.lambdify((x, y, t), p, mods)
    f_fn = sy.lambdify((x, y, t), (f1, f2), mods)
    c_fn = sy.lambdify((x, y, t), (conv1, conv2), mods)
    g_fn = sy.lambdify(
        (x, y, t),
        (sy.diff(u1, x), sy.diff(u1, y), sy.diff(u2, x), sy.diff(u2, y)),
        mods,
    )

    def velocity(tv):
        return lambda xx, yy: u_fn(xx, yy, tv)

    def velocity_grad(tv):
        return lambda xx, yy: g_fn(xx, yy, tv)

    def pressure(tv):
        return lambda xx, yy: p_fn(xx, yy, tv)

    def forcing(tv, consistency_dt=0.0):
        def f(xx, yy):
            fx, fy = f_fn(xx, yy, tv)
            if consistency_dt > 0.0:
                cx, cy = c_fn(xx, yy, tv)
                s = math.expm1(consistency_dt)
                fx = fx + s * cx
                fy = fy + s * cy
            return fx, fy

        return f

    return velocity, pressure, forcing, velocity_grad


@dataclass
class MMSResult:
    rows: list  # (h, dt, l2_error, h1_error)
    orders_l2: list
    orders_h1: list
    max_div_residual: float

    def as_text(self) -> str:
        out = ["h            dt           L2 error     H1 error     order(L2)"]
        for i, (h, dt, e2, e1) in enumerate(self.rows):
            o = f"{self.orders_l2[i - 1]:.2f}" if i else "-"
            out.append(f"{h:<12.5g} {dt:<12.5g} {e2:<12.5g} {e1:<12.5g} {o}")
        return "\n".join(out)


def mms_convergence_study(
    levels: int = 4,
    nu: float = 1.0,
    t_final: float = 0.1,
    dt_factor: float = 0.5,
    base_divisions: int = 4,
    solver_mode: str = "direct",
) -> MMSResult:
    """Space-time refinement study on the manufactured unit-square flow.

    Level k uses h = 1/(base_divisions 2^k) and dt = dt_factor * h^2, so the
    first-order time error stays below the cubic spatial error over the
    levels compared.  Errors are measured at the final time against the
    nodal interpolant of the exact solution.
    """
    from . import fem as F
    from . import solver as S
    from .mesh import build_coarse_subregion_mesh, polygon_spec, refine_uniform

    if levels < 3:
        raise ValueError("need at least 3 levels to observe an order")
    velocity, _pressure, forcing, velocity_grad = mms_exact_fields(nu)
    square = polygon_spec([(0, 0), (1, 0), (1, 1), (0, 1)])
    base = build_coarse_subregion_mesh(square, math.sqrt(2) / base_divisions)

    rows = []
    max_div = 0.0
    for lev in range(levels):
        mesh = base if lev == 0 else refine_uniform(base, lev)[0]
        vel = F.build_dof_map(mesh, "velocity_quadratic_vector")
        pres = F.build_dof_map(mesh, "pressure_linear_scalar")
        h = mesh.h_max
        dt = dt_factor * h * h
        n_steps = max(1, math.ceil(t_final / dt))
        dt = t_final / n_steps
        bc = {name: (0.0, 0.0) for name in vel.boundary_dofs}
        sys_ = S.StepSystem(
            vel, pres, nu=nu, dt=dt, bc_values=bc, solver_mode=solver_mode
        )
        state = F.State(F.interpolate(vel, velocity(0.0)), np.zeros(pres.n_dofs), 0.0)
        for n in range(n_steps):
            t_next = (n + 1) * dt
            f_vec = F.assemble_load(vel, forcing(t_next, consistency_dt=dt))
            state, info = sys_.step(state, f_vec)
            max_div = max(max_div, info["div_residual"])
        l2, h1 = F.quadrature_errors(
            vel, state.velocity, velocity(t_final), velocity_grad(t_final)
        )
        rows.append((h, dt, l2, h1))

    orders_l2 = [
        math.log(rows[i - 1][2] / rows[i][2]) / math.log(rows[i - 1][0] / rows[i][0])
        for i in range(1, levels)
    ]
    orders_h1 = [
        math.log(rows[i - 1][3] / rows[i][3]) / math.log(rows[i - 1][0] / rows[i][0])
        for i in range(1, levels)
    ]
    return MMSResult(rows, orders_l2, orders_h1, max_div)
