"""Semi-implicit time stepping of the nudged and reference flow systems.

Each step solves the saddle-point system

    [ M/dt + nu K + C(v_n) + mu M I_H   -B^T ] [v_{n+1}]   [M v_n / dt + F + mu M I_H u_{n+1}]
    [ B                                   0  ] [q_{n+1}] = [0]

with convection linearized at the previous velocity and the nudging feedback
treated implicitly.  Dirichlet values are imposed by row replacement with
symmetric column elimination; on all-Dirichlet domains one pressure degree
of freedom is pinned and the zero-mean gauge is restored after the solve.

Two linear solver modes honor the same residual contract (relative residual
<= 1e-10, verified on the true matrix): "direct" refactors the saddle matrix
every step; "lagged" reuses the last factorization as a GMRES preconditioner
and refactors when convergence degrades.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem
from .assimilation import ObservationOperator
from .diagnostics import ErrorHistory
from .fem import DofMap, State
from .mesh import Mesh

__all__ = [
    "SolveError",
    "linear_solve",
    "steady_stokes_solve",
    "StepSystem",
    "TwinRun",
    "run_twin_experiment",
]


class SolveError(RuntimeError):
    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals or []


def linear_solve(a: sp.spmatrix, b: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """Sparse direct solve with a verified relative residual."""
    lu = spla.splu(a.tocsc())
    x = lu.solve(b)
    nb = np.linalg.norm(b)
    res = np.linalg.norm(a @ x - b) / (nb if nb > 0 else 1.0)
    if not np.isfinite(res) or res > rtol:
        raise SolveError(f"direct solve residual {res:.3e} exceeds {rtol}", [res])
    return x


def _pressure_gauge(p: np.ndarray, mp_row: np.ndarray, area: float) -> np.ndarray:
    return p - (mp_row @ p) / area


def _csr_keys(m: sp.csr_matrix) -> np.ndarray:
    """Row-major (row, col) keys; globally sorted for sorted-index CSR."""
    rows = np.repeat(np.arange(m.shape[0], dtype=np.int64), np.diff(m.indptr))
    return rows * m.shape[1] + m.indices


def _positions_in(target_keys: np.ndarray, keys: np.ndarray) -> np.ndarray:
    pos = np.searchsorted(target_keys, keys)
    if np.any(target_keys[pos] != keys):
        raise RuntimeError("sparsity pattern mapping failed")
    return pos


@dataclass
class StepSystem:
    """Assembled operators and solver state for one flow system.

    The saddle matrix changes every step only through the convection block,
    so its sparsity pattern, boundary-condition masking, and scatter indices
    are all precomputed once; a step rewrites the data array in place.
    """

    vel: DofMap
    pres: DofMap
    nu: float
    dt: float
    mu: float = 0.0
    obs: ObservationOperator | None = None
    bc_values: dict | None = None
    implicit_nudging: bool = True
    include_convection: bool = True
    solver_mode: str = "direct"  # "direct" | "lagged"
    rtol: float = 1e-10
    gmres_budget: int = 10
    gmres_maxiter: int = 40

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.mu > 0 and self.obs is None:
            raise ValueError("nudging requires an observation operator")
        self.mass = fem.assemble_mass(self.vel)
        self.stiff = fem.assemble_stiffness(self.vel)
        self.div = fem.assemble_divergence(self.vel, self.pres)
        self.mass_p = fem.assemble_mass(self.pres)
        ones_p = np.ones(self.pres.n_dofs)
        self._mp_row = self.mass_p @ ones_p
        self._area = float(ones_p @ self._mp_row)

        self.nudge_lhs = None
        self._nudge_rhs_map = None
        if self.mu > 0:
            self.nudge_lhs = (self.mu * (self.mass @ self.obs.composed)).tocsr()
            # feedback of reference data always routes through coarse nodal
            # values, so live twin runs and record/replay runs perform the
            # identical arithmetic
            self._nudge_rhs_map = (self.mu * (self.mass @ self.obs.prolongation)).tocsr()

        base = self.mass / self.dt + self.nu * self.stiff
        if self.mu > 0 and self.implicit_nudging:
            base = base + self.nudge_lhs
        self._base = base.tocsr()

        bc = self.bc_values or {}
        idx, vals = fem.dirichlet_dofs(self.vel, bc)
        self._pin_pressure = "outflow" not in self.vel.boundary_dofs
        if self._pin_pressure:
            idx = np.concatenate([idx, [self.vel.n_dofs]])
            vals = np.concatenate([vals, [0.0]])
        self._bc_idx = idx.astype(np.int64)
        self._bc_vals = vals
        self._lu = None
        self._prev = None
        self._prev2 = None
        self.wall_clock = 0.0
        self.factorizations = 0
        self.gmres_steps = 0
        self._prepare_fast_assembly()

    def _prepare_fast_assembly(self):
        vel = self.vel
        n_nodes = vel.n_nodes
        nt = vel.mesh.n_triangles
        # scalar convection pattern and element scatter slots
        ones_local = np.ones((nt, 6, 6))
        pattern = fem._scatter(vel.cell_nodes, vel.cell_nodes, ones_local, (n_nodes, n_nodes))
        pkeys = _csr_keys(pattern)
        elem_keys = (
            vel.cell_nodes[:, :, None].astype(np.int64) * n_nodes
            + vel.cell_nodes[:, None, :]
        ).ravel()
        self._pos_elem = _positions_in(pkeys, elem_keys)
        prow = np.repeat(np.arange(n_nodes, dtype=np.int64), np.diff(pattern.indptr))
        self._perm_t = _positions_in(pkeys, pattern.indices.astype(np.int64) * n_nodes + prow)
        self._n_pattern_nnz = pattern.nnz

        # saddle-point union pattern with the pinned diagonal present
        n_u, n_p = vel.n_dofs, self.pres.n_dofs
        n = n_u + n_p
        s0 = sp.bmat([[self._base, -self.div.T], [self.div, None]], format="csr")
        pin_diag = np.zeros(n)
        pin_diag[self._bc_idx] = 1.0
        s0_ones = sp.csr_matrix((np.ones(s0.nnz), s0.indices, s0.indptr), shape=(n, n))
        c_keys_a = (pkeys // n_nodes) * 2 * n + (pkeys % n_nodes) * 2
        c_keys_b = c_keys_a + n + 1  # second component entry (2i+1, 2j+1)
        c_all = np.concatenate([c_keys_a, c_keys_b])
        c_ones = sp.coo_matrix(
            (np.ones(len(c_all)), (c_all // n, c_all % n)), shape=(n, n)
        ).tocsr()
        union = (s0_ones + c_ones + sp.diags(pin_diag)).tocsr()
        union.sort_indices()
        ukeys = _csr_keys(union)
        self._u_indices = union.indices.copy()
        self._u_indptr = union.indptr.copy()
        self._n_total = n

        base_data = np.zeros(union.nnz)
        base_data[_positions_in(ukeys, _csr_keys(s0))] = s0.data
        self._base_data = base_data
        self._pos_c_a = _positions_in(ukeys, c_keys_a)
        self._pos_c_b = _positions_in(ukeys, c_keys_b)

        free = np.ones(n, dtype=bool)
        free[self._bc_idx] = False
        urow = np.repeat(np.arange(n, dtype=np.int64), np.diff(union.indptr))
        self._free_slot = (free[urow] & free[self._u_indices]).astype(float)
        self._diag_constrained = _positions_in(
            ukeys, self._bc_idx * np.int64(n) + self._bc_idx
        )
        self._g_full = np.zeros(n)
        self._g_full[self._bc_idx] = self._bc_vals
        self._has_bc_values = bool(np.any(self._bc_vals != 0.0))

    # -- system assembly ---------------------------------------------------

    def _convection_data(self, v_now: np.ndarray) -> np.ndarray:
        """Skew-symmetrized convection data on the scalar node pattern."""
        local = fem.convection_local(self.vel, v_now)
        data_n = np.bincount(
            self._pos_elem, weights=local.ravel(), minlength=self._n_pattern_nnz
        )
        return 0.5 * (data_n - data_n[self._perm_t])

    def assemble_step_system(self, v_now: np.ndarray):
        """Boundary-eliminated saddle matrix and BC right-hand-side terms."""
        data = self._base_data.copy()
        if self.include_convection:
            c_data = self._convection_data(v_now)
            data[self._pos_c_a] += c_data  # slot positions are unique
            data[self._pos_c_b] += c_data
        n = self._n_total
        if self._has_bc_values:
            s_raw = sp.csr_matrix((data, self._u_indices, self._u_indptr), shape=(n, n))
            bc_rhs = s_raw @ self._g_full
        else:
            bc_rhs = None
        data *= self._free_slot
        data[self._diag_constrained] = 1.0
        s_bc = sp.csr_matrix((data, self._u_indices, self._u_indptr), shape=(n, n))
        return s_bc, bc_rhs

    def _saddle(self, v_now: np.ndarray) -> sp.csr_matrix:
        """Reference (slow) assembly used by tests to validate the fast path."""
        a = self._base + fem.assemble_convection(self.vel, v_now)
        return sp.bmat([[a, -self.div.T], [self.div, None]], format="csr")

    def _rhs(self, v_now: np.ndarray, f_vec, obs_rhs):
        r = self.mass @ (v_now / self.dt)
        if f_vec is not None:
            r = r + f_vec
        if obs_rhs is not None:
            r = r + obs_rhs
        return np.concatenate([r, np.zeros(self.pres.n_dofs)])

    def nudging_rhs(self, observations) -> np.ndarray | None:
        """Right-hand-side feedback term from reference observations.

        observations: ("full", fine velocity coefficients) or
        ("coarse", coarse nodal values as written by the recorder).
        """
        if self.mu == 0.0 or observations is None:
            return None
        kind, data = observations
        if kind == "full":
            return self._nudge_rhs_map @ (self.obs.restriction @ data)
        if kind == "coarse":
            return self._nudge_rhs_map @ data
        raise ValueError(f"unknown observation payload {kind!r}")

    def step(self, state: State, f_vec=None, observations=None) -> tuple[State, dict]:
        """Advance one time level; returns the new state and solve info."""
        t0 = time.perf_counter()
        obs_rhs = self.nudging_rhs(observations)
        v_now = state.velocity
        if self.mu > 0 and not self.implicit_nudging and obs_rhs is not None:
            obs_rhs = obs_rhs - self.nudge_lhs @ v_now
        s_bc, bc_rhs = self.assemble_step_system(v_now)
        b = self._rhs(v_now, f_vec, obs_rhs)
        if bc_rhs is not None:
            b -= bc_rhs
        b[self._bc_idx] = self._bc_vals
        x, info = self._solve(s_bc, b)
        nu_dofs = self.vel.n_dofs
        v = x[:nu_dofs]
        p = _pressure_gauge(x[nu_dofs:], self._mp_row, self._area)
        div_res = float(np.linalg.norm(self.div @ v))
        info["div_residual"] = div_res
        self.wall_clock += time.perf_counter() - t0
        self._prev2 = self._prev
        self._prev = x
        return State(v, p, state.t + self.dt), info

    # -- linear solvers ----------------------------------------------------

    def _direct(self, s_bc, b, scale):
        self._lu = spla.splu(s_bc.tocsc())
        self.factorizations += 1
        x = self._lu.solve(b)
        res = np.linalg.norm(s_bc @ x - b) / scale
        if not np.isfinite(res) or res > self.rtol:
            raise SolveError(f"step residual {res:.3e} exceeds {self.rtol}", [res])
        return x, res

    def _solve(self, s_bc, b) -> tuple[np.ndarray, dict]:
        nb = np.linalg.norm(b)
        scale = nb if nb > 0 else 1.0
        if self.solver_mode == "direct":
            x, res = self._direct(s_bc, b, scale)
            return x, {"residual": res, "mode": "direct", "iters": 0}
        if self.solver_mode != "lagged":
            raise ValueError(f"unknown solver mode {self.solver_mode!r}")

        if self._lu is not None:
            x, iters = self._gmres(s_bc, b)
            if x is not None:
                res = np.linalg.norm(s_bc @ x - b) / scale
                if np.isfinite(res) and res <= self.rtol:
                    self.gmres_steps += iters
                    if iters > self.gmres_budget:
                        self._lu = None  # stale; refresh on the next step
                    return x, {"residual": res, "mode": "gmres", "iters": iters}
        x, res = self._direct(s_bc, b, scale)
        return x, {"residual": res, "mode": "direct", "iters": 0}

    def _gmres(self, s_bc, b):
        n = s_bc.shape[0]
        count = {"n": 0}

        def cb(_):
            count["n"] += 1

        precond = spla.LinearOperator((n, n), matvec=self._lu.solve)
        x0 = self._prev
        if x0 is not None and self._prev2 is not None:
            x0 = 2.0 * self._prev - self._prev2  # linear extrapolation in time
        x, flag = spla.gmres(
            s_bc,
            b,
            x0=x0,
            M=precond,
            rtol=0.3 * self.rtol,
            atol=0.0,
            restart=self.gmres_maxiter,
            maxiter=1,
            callback=cb,
            callback_type="pr_norm",
        )
        if flag != 0:
            return None, count["n"]
        return x, count["n"]


def steady_stokes_solve(
    vel: DofMap, pres: DofMap, nu: float, f, bc_values: dict
) -> State:
    """Stationary Stokes flow with Dirichlet data and optional forcing.

    f may be None, a precomputed load vector, or a callable (x, y) -> (fx, fy).
    """
    k = fem.assemble_stiffness(vel)
    b = fem.assemble_divergence(vel, pres)
    if f is None:
        load = np.zeros(vel.n_dofs)
    elif callable(f):
        load = fem.assemble_load(vel, f)
    else:
        load = np.asarray(f, dtype=float)
    s = sp.bmat([[nu * k, -b.T], [b, None]], format="csr")
    rhs = np.concatenate([load, np.zeros(pres.n_dofs)])
    idx, vals = fem.dirichlet_dofs(vel, bc_values)
    if "outflow" not in vel.boundary_dofs:
        idx = np.concatenate([idx, [vel.n_dofs]])
        vals = np.concatenate([vals, [0.0]])
    s_bc, rhs_bc = fem.eliminate_dofs(s, rhs, idx.astype(np.int64), vals)
    try:
        x = linear_solve(s_bc, rhs_bc)
    except (RuntimeError, SolveError) as err:
        raise SolveError(f"steady Stokes system is singular or ill-posed: {err}") from err
    u = x[: vel.n_dofs]
    mass_p = fem.assemble_mass(pres)
    ones_p = np.ones(pres.n_dofs)
    p = _pressure_gauge(x[vel.n_dofs:], mass_p @ ones_p, float(ones_p @ (mass_p @ ones_p)))
    div_res = np.linalg.norm(b @ u)
    if div_res > 1e-9 * max(1.0, np.linalg.norm(u)):
        raise SolveError(f"steady solve violates incompressibility: |Bu|={div_res:.3e}")
    return State(u, p, 0.0)


# ---------------------------------------------------------------------------
# twin experiments
# ---------------------------------------------------------------------------


class TwinRun:
    """Reference system plus any number of assimilated systems in lockstep.

    The reference trajectory is advanced once per step and its new state is
    handed to every assimilated system as the freshest observation, matching
    a twin experiment where data at t_{n+1} are available when the
    assimilating step is taken.  Sharing one reference across several
    assimilated systems produces exactly the same per-system trajectories as
    standalone runs.
    """

    def __init__(self, reference, assimilated, u0, v0, n_steps, forcing=None,
                 output_every=1, recorder=None, replay=None, snapshot=None,
                 snapshot_every=0):
        self.reference = reference
        self.assimilated = dict(assimilated)
        self.u0 = u0
        self.v0 = dict(v0)
        self.n_steps = int(n_steps)
        self.forcing = forcing
        self.output_every = max(1, int(output_every))
        self.recorder = recorder
        self.replay = replay
        self.snapshot = snapshot
        self.snapshot_every = int(snapshot_every)

    def _force_at(self, t: float):
        if self.forcing is None:
            return None
        if callable(self.forcing):
            return self.forcing(t)
        return self.forcing

    def run(self) -> dict:
        """Advance all systems; returns per-system ErrorHistory keyed by name,
        plus the reference history under the key "dns"."""
        ref = self.reference
        mass = ref.mass
        u = self.u0.copy()
        states = {k: s.copy() for k, s in self.v0.items()}
        hist = {k: ErrorHistory() for k in self.assimilated}
        dns_hist = ErrorHistory()
        dt = ref.dt
        offline = self.replay is not None

        def record_all():
            if offline:
                eu = float("nan")
            else:
                eu = 0.5 * float(u.velocity @ (mass @ u.velocity))
                div_u = float(np.linalg.norm(ref.div @ u.velocity))
                dns_hist.append(u.t, 0.0, eu, eu, div_u)
            for name, sys_ in self.assimilated.items():
                v = states[name]
                err = (
                    float("nan")
                    if offline
                    else fem.relative_l2_error(u.velocity, v.velocity, mass)
                )
                ev = 0.5 * float(v.velocity @ (mass @ v.velocity))
                div_v = float(np.linalg.norm(sys_.div @ v.velocity))
                hist[name].append(v.t, err, eu, ev, div_v)

        record_all()
        for n in range(self.n_steps):
            t_next = u.t + dt
            f_vec = self._force_at(t_next)
            if offline:
                observations = ("coarse", self.replay(n))
                u = State(u.velocity, u.pressure, t_next)
            else:
                u, _ = ref.step(u, f_vec)
                observations = ("full", u.velocity)
                if self.recorder is not None:
                    self.recorder(n, u.velocity)
            for name, sys_ in self.assimilated.items():
                payload = observations if sys_.mu > 0 else None
                states[name], _ = sys_.step(states[name], f_vec, payload)
            if (n + 1) % self.output_every == 0 or n + 1 == self.n_steps:
                record_all()
            if (
                self.snapshot is not None
                and self.snapshot_every > 0
                and ((n + 1) % self.snapshot_every == 0 or n + 1 == self.n_steps)
            ):
                self.snapshot(n + 1, u, states)
        dns_hist.wall_clock = ref.wall_clock
        for name, sys_ in self.assimilated.items():
            hist[name].wall_clock = sys_.wall_clock
        hist["dns"] = dns_hist
        self.final_states = {"dns": u, **states}
        return hist


def run_twin_experiment(
    reference: StepSystem,
    assimilated: StepSystem,
    u0: State,
    v0: State,
    n_steps: int,
    forcing=None,
    output_every: int = 1,
    recorder=None,
    replay=None,
) -> ErrorHistory:
    """Single reference/assimilated pair; see TwinRun for the sweep form."""
    runs = TwinRun(
        reference,
        {"da": assimilated},
        u0,
        {"da": v0},
        n_steps,
        forcing=forcing,
        output_every=output_every,
        recorder=recorder,
        replay=replay,
    )
    return runs.run()["da"]
