"""Radial power-flow solver and voltage post-processing.

Solves the per-phase complex power-flow equations S_k = V_k * conj((Y V)_k) on
a radial feeder by fixed-point iteration of the backward/forward sweep, folded
into matrix form: the backward current accumulation and forward voltage drop
compose to V = V_nom + M @ I, where M[(i,p),(k,q)] sums the (p,q) impedance
entries of the lines common to both buses' paths from the substation. One
sweep is therefore a single complex matvec, which matters because training
performs hundreds of thousands of solves.

The substation (bus 0) is slack: held at 1.0 p.u. with nominal 120-degree
phase offsets, absorbing the power imbalance. Solving is a pure function of
(model, injections); the per-model structure (node list, Y, M) is built once
and cached on the model object.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import NetworkModel

ALPHA = np.exp(2j * np.pi / 3)  # 1 angle +120 degrees
NOMINAL_PHASOR = {"a": 1.0 + 0.0j, "b": ALPHA.conjugate(), "c": ALPHA}

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100


class PowerFlowDiverged(RuntimeError):
    """Fixed-point iteration failed to converge; carries the last residual.

    Signals an infeasible or collapsed operating point, not a numerical bug.
    """

    def __init__(self, residual, iterations):
        super().__init__(
            f"power flow did not converge after {iterations} iterations "
            f"(last residual {residual:.3e} p.u.)")
        self.residual = residual
        self.iterations = iterations


class FeederStructure:
    """Per-model constants for the solver: node ordering, Y, M, nominal V."""

    def __init__(self, model: NetworkModel):
        self.nodes = [(b.id, ph) for b in model.buses for ph in b.phases]
        self.index = {node: k for k, node in enumerate(self.nodes)}
        n = len(self.nodes)
        self.v_nom = np.array([NOMINAL_PHASOR[ph] for _, ph in self.nodes])
        self.slack = np.array([k for k, (bid, _) in enumerate(self.nodes) if bid == 0])
        self.nonslack = np.array([k for k, (bid, _) in enumerate(self.nodes) if bid != 0])

        self.Y = np.zeros((n, n), dtype=complex)
        for ln in model.lines:
            yb = np.linalg.inv(ln.z_pu)
            for pi, p in enumerate(ln.phases):
                fp = self.index[(ln.from_bus, p)]
                tp = self.index[(ln.to_bus, p)]
                for qi, q in enumerate(ln.phases):
                    fq = self.index[(ln.from_bus, q)]
                    tq = self.index[(ln.to_bus, q)]
                    self.Y[fp, fq] += yb[pi, qi]
                    self.Y[tp, tq] += yb[pi, qi]
                    self.Y[fp, tq] -= yb[pi, qi]
                    self.Y[tp, fq] -= yb[pi, qi]

        # subtree bus sets: every bus hanging below each non-root bus, itself included
        children = {b.id: [] for b in model.buses}
        for bid in model.order[1:]:
            children[model.parent[bid][0]].append(bid)
        subtree = {}
        for bid in reversed(model.order):
            acc = {bid}
            for c in children[bid]:
                acc |= subtree[c]
            subtree[bid] = acc

        self.M = np.zeros((n, n), dtype=complex)
        for bid in model.order[1:]:
            _, ln = model.parent[bid]
            down = [(k, q) for k in sorted(subtree[bid])
                    for q in model.bus(k).phases if q in ln.phases]
            pos = {ph: i for i, ph in enumerate(ln.phases)}
            idx = np.array([self.index[nd] for nd in down])
            zsub = np.array([[ln.z_pu[pos[p], pos[q]] for (_, q) in down]
                             for (_, p) in down])
            self.M[np.ix_(idx, idx)] += zsub

        # positive-sequence extraction, vectorized over buses:
        # three-phase rows apply (1, alpha, alpha^2)/3; others average magnitudes
        nb = len(model.buses)
        self.seq_rotation = np.zeros((nb, n), dtype=complex)
        self.mag_average = np.zeros((nb, n))
        self.three_phase = np.zeros(nb, dtype=bool)
        for r, b in enumerate(model.buses):
            cols = [self.index[(b.id, ph)] for ph in b.phases]
            if len(b.phases) == 3:
                self.three_phase[r] = True
                for ph, c in zip(b.phases, cols):
                    self.seq_rotation[r, c] = ALPHA ** "abc".index(ph) / 3.0
            else:
                self.mag_average[r, cols] = 1.0 / len(b.phases)


def structure(model: NetworkModel) -> FeederStructure:
    """The cached FeederStructure for a model (built on first use)."""
    s = getattr(model, "_pf_structure", None)
    if s is None:
        s = FeederStructure(model)
        model._pf_structure = s
    return s


@dataclass
class VoltageSolution:
    """Converged per-phase voltages over structure(model).nodes ordering."""
    model: NetworkModel
    voltages: np.ndarray
    iterations: int
    residual: float


def solve(model: NetworkModel, injections, initial_guess=None,
          tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER) -> VoltageSolution:
    """Solve the power-flow equations for complex p.u. injections.

    injections: complex array over structure(model).nodes, injection-positive;
    substation entries are ignored (slack). initial_guess warm-starts from a
    previous VoltageSolution or raw voltage array. Raises PowerFlowDiverged
    after max_iter iterations without the power-balance residual reaching tol.
    """
    st = structure(model)
    s_spec = np.asarray(injections, dtype=complex).copy()
    if s_spec.shape != st.v_nom.shape:
        raise ValueError(
            f"injections must have {len(st.nodes)} entries (one per bus-phase)")
    s_spec[st.slack] = 0.0

    if initial_guess is None:
        v = st.v_nom.copy()
    else:
        guess = getattr(initial_guess, "voltages", initial_guess)
        v = np.asarray(guess, dtype=complex).copy()
        v[st.slack] = st.v_nom[st.slack]

    ns = st.nonslack
    current = np.zeros_like(st.v_nom)
    residual = np.inf
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for it in range(1, max_iter + 1):
            current[ns] = np.conj(s_spec[ns] / v[ns])
            v = st.v_nom + st.M @ current
            mismatch = s_spec[ns] - v[ns] * np.conj(st.Y @ v)[ns]
            residual = float(np.max(np.abs(mismatch)))
            if residual <= tol:
                return VoltageSolution(model, v, it, residual)
    raise PowerFlowDiverged(residual, max_iter)


def positive_sequence_profile(solution: VoltageSolution) -> np.ndarray:
    """Positive-sequence voltage magnitude for every bus, in model.buses order.

    Three-phase buses use |(Va + alpha Vb + alpha^2 Vc)/3|; one- and two-phase
    buses fall back to the mean of the available phase magnitudes.
    """
    st = structure(solution.model)
    seq = np.abs(st.seq_rotation @ solution.voltages)
    avg = st.mag_average @ np.abs(solution.voltages)
    return np.where(st.three_phase, seq, avg)


def positive_sequence_magnitude(solution: VoltageSolution, bus_id) -> float:
    return float(positive_sequence_profile(solution)[solution.model.bus_index[bus_id]])


def total_power_balance(solution: VoltageSolution):
    """(complex line losses, complex substation import), both in p.u.

    Losses are summed line by line from branch currents; import is the slack
    bus's nodal power. For any converged solution, specified injections plus
    import minus losses is zero to within solver tolerance.
    """
    st = structure(solution.model)
    v = solution.voltages
    loss = 0.0 + 0.0j
    for ln in solution.model.lines:
        fi = np.array([st.index[(ln.from_bus, p)] for p in ln.phases])
        ti = np.array([st.index[(ln.to_bus, p)] for p in ln.phases])
        dv = v[fi] - v[ti]
        j = np.linalg.inv(ln.z_pu) @ dv
        loss += np.sum(dv * np.conj(j))
    nodal = v * np.conj(st.Y @ v)
    imported = complex(np.sum(nodal[st.slack]))
    return complex(loss), imported


def solution_table(solution: VoltageSolution) -> str:
    """Plain-text dump: one row per (bus, phase) with |V| and angle in degrees."""
    st = structure(solution.model)
    rows = ["bus,phase,v_mag,v_angle_deg"]
    for (bid, ph), vk in zip(st.nodes, solution.voltages):
        rows.append(f"{bid},{ph},{float(abs(vk))!r},"
                    f"{float(np.degrees(np.angle(vk)))!r}")
    return "\n".join(rows) + "\n"
