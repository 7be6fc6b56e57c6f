"""
AC power flow by full Newton-Raphson in polar coordinates.

Y-bus assembly follows the standard pi-model with complex tap
t = tap * exp(j*shift). Solutions report powers in MW/MVAr and voltage
angles in radians.
"""

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import MatrixRankWarning, spsolve

from common.netmodel import BusKind, is_connected

# Outer PV->PQ switching passes when Q limits are enforced
MAX_Q_LIMIT_PASSES = 10

_solves = 0


class PowerFlowError(RuntimeError):
    pass


class IslandedNetworkError(PowerFlowError):
    pass


class SingularJacobianError(PowerFlowError):
    pass


@dataclass(frozen=True)
class SolverOptions:
    tolerance: float = 1e-8
    max_iterations: int = 20
    flat_start: bool = True
    enforce_q_limits: bool = False

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError(f"tolerance must be positive, got {self.tolerance}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be at least 1, got {self.max_iterations}")


@dataclass(frozen=True)
class BranchFlows:
    p_from: np.ndarray
    q_from: np.ndarray
    p_to: np.ndarray
    q_to: np.ndarray
    in_service: np.ndarray


@dataclass(frozen=True)
class FlowSolution:
    v_mag: np.ndarray
    v_ang: np.ndarray
    p_inj: np.ndarray
    q_inj: np.ndarray
    branch_p_from: np.ndarray
    branch_q_from: np.ndarray
    branch_p_to: np.ndarray
    branch_q_to: np.ndarray
    in_service: np.ndarray
    p_gen: np.ndarray
    q_gen: np.ndarray
    converged: bool
    iterations: int
    max_mismatch: float

    @property
    def voltage(self):
        return self.v_mag * np.exp(1j * self.v_ang)

    def to_dict(self, net):
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "max_mismatch": float(self.max_mismatch),
            "buses": [
                {
                    "id": bus.id,
                    "v_mag": float(self.v_mag[i]),
                    "v_ang_deg": float(np.rad2deg(self.v_ang[i])),
                    "p_inj": float(self.p_inj[i]),
                    "q_inj": float(self.q_inj[i]),
                }
                for i, bus in enumerate(net.buses)
            ],
            "branches": [
                {
                    "index": j,
                    "from": br.from_bus,
                    "to": br.to_bus,
                    "in_service": bool(self.in_service[j]),
                    "p_from": float(self.branch_p_from[j]),
                    "q_from": float(self.branch_q_from[j]),
                    "p_to": float(self.branch_p_to[j]),
                    "q_to": float(self.branch_q_to[j]),
                }
                for j, br in enumerate(net.branches)
            ],
            "generators": [
                {"bus": gen.bus, "p_gen": float(self.p_gen[k]), "q_gen": float(self.q_gen[k])}
                for k, gen in enumerate(net.generators)
            ],
        }


def solve_count():
    """Number of Newton-Raphson solves performed in this process."""
    return _solves


def _branch_arrays(net):
    idx = net.bus_index
    live = np.array([br.in_service for br in net.branches], dtype=bool)
    f = np.array([idx[br.from_bus] for br in net.branches], dtype=int)
    t = np.array([idx[br.to_bus] for br in net.branches], dtype=int)
    r = np.array([br.r for br in net.branches], dtype=float)
    x = np.array([br.x for br in net.branches], dtype=float)
    if np.any((r == 0) & (x == 0)):
        bad = int(np.flatnonzero((r == 0) & (x == 0))[0])
        raise PowerFlowError(f"branch {bad} has zero series impedance")
    ys = 1.0 / (r + 1j * x)
    bc = np.array([br.b_charging for br in net.branches], dtype=float)
    shift = np.deg2rad([br.shift for br in net.branches])
    tap = np.array([br.tap for br in net.branches], dtype=float) * np.exp(1j * shift)

    ytt = ys + 1j * bc / 2
    yff = ytt / (tap * np.conj(tap))
    yft = -ys / np.conj(tap)
    ytf = -ys / tap
    return live, f, t, yff, yft, ytf, ytt


def _bus_shunts(net):
    idx = net.bus_index
    ysh = np.array([bus.g_shunt + 1j * bus.b_shunt for bus in net.buses], dtype=complex)
    for cap in net.shunt_capacitors:
        ysh[idx[cap.bus]] += 1j * cap.q_switched
    return ysh / net.base_mva


def build_ybus(net):
    """Sparse complex bus admittance matrix in p.u., in-service branches only."""
    n = len(net.buses)
    if not net.branches:
        return sp.diags(_bus_shunts(net), format="csr", shape=(n, n))
    live, f, t, yff, yft, ytf, ytt = _branch_arrays(net)
    f, t = f[live], t[live]
    rows = np.concatenate([f, f, t, t])
    cols = np.concatenate([f, t, f, t])
    data = np.concatenate([yff[live], yft[live], ytf[live], ytt[live]])
    ybus = sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()
    return (ybus + sp.diags(_bus_shunts(net), format="csr", shape=(n, n))).tocsr()


def branch_flows(net, v):
    """From/to-end P and Q of every branch in MW/MVAr. Out-of-service entries are zero."""
    v = np.asarray(v, dtype=complex)
    if v.shape != (len(net.buses),):
        raise ValueError(f"expected {len(net.buses)} bus voltages, got shape {v.shape}")
    if not net.branches:
        empty = np.zeros(0)
        return BranchFlows(empty, empty, empty, empty, np.zeros(0, dtype=bool))
    live, f, t, yff, yft, ytf, ytt = _branch_arrays(net)
    s_from = v[f] * np.conj(yff * v[f] + yft * v[t]) * net.base_mva
    s_to = v[t] * np.conj(ytf * v[f] + ytt * v[t]) * net.base_mva
    s_from[~live] = 0
    s_to[~live] = 0
    return BranchFlows(s_from.real, s_from.imag, s_to.real, s_to.imag, live)


def _gen_buses(net):
    idx = net.bus_index
    return np.array([idx[gen.bus] for gen in net.generators], dtype=int)


def _bus_roles(net):
    """Slack index plus pv/pq index arrays. PV buses without a generator solve as PQ."""
    kinds = [bus.kind for bus in net.buses]
    slack = [i for i, kind in enumerate(kinds) if kind is BusKind.SLACK]
    if len(slack) != 1:
        raise PowerFlowError(f"expected exactly one slack bus, found {len(slack)}")
    has_gen = np.zeros(len(kinds), dtype=bool)
    has_gen[_gen_buses(net)] = True
    pv = [i for i, kind in enumerate(kinds) if kind is BusKind.PV and has_gen[i]]
    controlled = set(pv) | {slack[0]}
    pq = [i for i in range(len(kinds)) if i not in controlled]
    return slack[0], np.array(pv, dtype=int), np.array(pq, dtype=int)


def _specified_power(net, q_fixed_gen=None):
    """Complex scheduled injection per bus in p.u. (generation minus load)."""
    n = len(net.buses)
    gen_bus = _gen_buses(net)
    p_gen = np.array([gen.p_out for gen in net.generators], dtype=float)
    q_gen = np.array([gen.q_out for gen in net.generators], dtype=float) if q_fixed_gen is None else q_fixed_gen
    pg = np.bincount(gen_bus, weights=p_gen, minlength=n) if len(gen_bus) else np.zeros(n)
    qg = np.bincount(gen_bus, weights=q_gen, minlength=n) if len(gen_bus) else np.zeros(n)
    pd = np.array([bus.p_load for bus in net.buses], dtype=float)
    qd = np.array([bus.q_load for bus in net.buses], dtype=float)
    return (pg - pd + 1j * (qg - qd)) / net.base_mva


def _initial_voltage(net, slack, pv, flat_start):
    idx = net.bus_index
    if flat_start:
        vm = np.ones(len(net.buses))
        va = np.zeros(len(net.buses))
    else:
        vm = np.array([bus.v_mag for bus in net.buses], dtype=float)
        va = np.deg2rad([bus.v_ang for bus in net.buses])
    va[slack] = np.deg2rad(net.buses[slack].v_ang)
    controlled = set(pv.tolist()) | {slack}
    # first generator at a bus sets its voltage
    for gen in reversed(net.generators):
        if idx[gen.bus] in controlled:
            vm[idx[gen.bus]] = gen.v_setpoint
    return vm * np.exp(1j * va)


def _mismatch_vector(ybus, v, sbus, pv, pq):
    mis = v * np.conj(ybus @ v) - sbus
    pvpq = np.concatenate([pv, pq])
    return np.concatenate([mis[pvpq].real, mis[pq].imag])


def _jacobian(ybus, v, pv, pq):
    ibus = ybus @ v
    diag_v = sp.diags(v)
    diag_i = sp.diags(ibus)
    diag_vnorm = sp.diags(v / np.abs(v))
    ds_dvm = diag_v @ (ybus @ diag_vnorm).conj() + diag_i.conj() @ diag_vnorm
    ds_dva = 1j * (diag_v @ (diag_i - ybus @ diag_v).conj())
    ds_dvm = ds_dvm.tocsr()
    ds_dva = ds_dva.tocsr()
    pvpq = np.concatenate([pv, pq])
    j11 = ds_dva[pvpq][:, pvpq].real
    j12 = ds_dvm[pvpq][:, pq].real
    j21 = ds_dva[pq][:, pvpq].imag
    j22 = ds_dvm[pq][:, pq].imag
    return sp.vstack([sp.hstack([j11, j12]), sp.hstack([j21, j22])], format="csc")


def _newton(ybus, sbus, v0, pv, pq, opts):
    """Returns (voltage, converged, iterations, max |mismatch|)."""
    v = v0.copy()
    vm = np.abs(v)
    va = np.angle(v)
    npv, npq = len(pv), len(pq)

    f = _mismatch_vector(ybus, v, sbus, pv, pq)
    norm = float(np.max(np.abs(f), initial=0.0))
    iterations = 1
    converged = norm < opts.tolerance

    for _ in range(opts.max_iterations):
        if converged or not np.isfinite(norm):
            break
        jac = _jacobian(ybus, v, pv, pq)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MatrixRankWarning)
            dx = -spsolve(jac, f)
        if not np.all(np.isfinite(dx)):
            raise SingularJacobianError(f"Jacobian is singular at iteration {iterations}")
        va[pv] += dx[:npv]
        va[pq] += dx[npv:npv + npq]
        vm[pq] += dx[npv + npq:]
        v = vm * np.exp(1j * va)

        f = _mismatch_vector(ybus, v, sbus, pv, pq)
        norm = float(np.max(np.abs(f), initial=0.0))
        iterations += 1
        converged = norm < opts.tolerance

    return v, converged, iterations, norm


def power_mismatch(net, v):
    """Mismatch vector [dP at pv+pq buses, dQ at pq buses] in p.u. for the scheduled injections."""
    slack, pv, pq = _bus_roles(net)
    return _mismatch_vector(build_ybus(net), np.asarray(v, dtype=complex), _specified_power(net), pv, pq)


def _generator_dispatch(net, s_inj, slack, pq, q_fixed_gen):
    """Per-generator P/Q in MW/MVAr; bus totals split evenly across co-located units."""
    idx = net.bus_index
    gen_bus = _gen_buses(net)
    p_gen = np.array([gen.p_out for gen in net.generators], dtype=float)
    q_gen = q_fixed_gen.copy()
    if not len(gen_bus):
        return p_gen, q_gen

    n = len(net.buses)
    counts = np.bincount(gen_bus, minlength=n)
    pd = np.array([bus.p_load for bus in net.buses], dtype=float)
    qd = np.array([bus.q_load for bus in net.buses], dtype=float)
    p_bus = s_inj.real * net.base_mva + pd
    q_bus = s_inj.imag * net.base_mva + qd

    fixed_q = np.zeros(n, dtype=bool)
    fixed_q[pq] = True
    for k, gen in enumerate(net.generators):
        i = idx[gen.bus]
        if i == slack:
            p_gen[k] = p_bus[i] / counts[i]
        if not fixed_q[i]:
            q_gen[k] = q_bus[i] / counts[i]
    return p_gen, q_gen


def solve_nr(net, opts=None):
    """
    Solve the AC power flow of `net`.

    Non-convergence is reported through `converged=False`. Raises
    IslandedNetworkError when the in-service branches leave the network split,
    and SingularJacobianError when a Newton step cannot be computed.
    """
    global _solves
    opts = opts or SolverOptions()
    if not is_connected(net):
        raise IslandedNetworkError("network is not connected over its in-service branches")

    _solves += 1
    slack, pv, pq = _bus_roles(net)
    ybus = build_ybus(net)
    q_fixed_gen = np.array([gen.q_out for gen in net.generators], dtype=float)
    v = _initial_voltage(net, slack, pv, opts.flat_start)

    iterations = 0
    for _ in range(MAX_Q_LIMIT_PASSES):
        sbus = _specified_power(net, q_fixed_gen)
        v, converged, its, norm = _newton(ybus, sbus, v, pv, pq, opts)
        iterations += its
        if not (converged and opts.enforce_q_limits and len(pv)):
            break
        s_inj = v * np.conj(ybus @ v)
        _, q_gen = _generator_dispatch(net, s_inj, slack, pq, q_fixed_gen)
        pv, pq, q_fixed_gen, switched = _switch_violating_pv(net, pv, pq, q_gen, q_fixed_gen)
        if not switched:
            break
        logging.debug(f"Switched {switched} PV buses to PQ on reactive limits")

    s_inj = v * np.conj(ybus @ v)
    p_gen, q_gen = _generator_dispatch(net, s_inj, slack, pq, q_fixed_gen)
    flows = branch_flows(net, v)
    logging.debug(
        f"NR {'converged' if converged else 'did not converge'} after {iterations} "
        f"iterations (max mismatch {norm:.2e} p.u.)"
    )
    return FlowSolution(
        v_mag=np.abs(v),
        v_ang=np.angle(v),
        p_inj=s_inj.real * net.base_mva,
        q_inj=s_inj.imag * net.base_mva,
        branch_p_from=flows.p_from,
        branch_q_from=flows.q_from,
        branch_p_to=flows.p_to,
        branch_q_to=flows.q_to,
        in_service=flows.in_service,
        p_gen=p_gen,
        q_gen=q_gen,
        converged=bool(converged),
        iterations=iterations,
        max_mismatch=norm,
    )


def _switch_violating_pv(net, pv, pq, q_gen, q_fixed_gen):
    idx = net.bus_index
    q_fixed_gen = q_fixed_gen.copy()
    violating = set()
    for i in pv:
        units = [k for k, gen in enumerate(net.generators) if idx[gen.bus] == i]
        total = sum(q_gen[k] for k in units)
        q_max = sum(net.generators[k].q_max for k in units)
        q_min = sum(net.generators[k].q_min for k in units)
        if total > q_max + 1e-9:
            limit = "q_max"
        elif total < q_min - 1e-9:
            limit = "q_min"
        else:
            continue
        violating.add(int(i))
        for k in units:
            q_fixed_gen[k] = getattr(net.generators[k], limit)
    if not violating:
        return pv, pq, q_fixed_gen, 0
    pv = np.array([i for i in pv if int(i) not in violating], dtype=int)
    pq = np.sort(np.concatenate([pq, np.array(sorted(violating), dtype=int)]))
    return pv, pq, q_fixed_gen, len(violating)
