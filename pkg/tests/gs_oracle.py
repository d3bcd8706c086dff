"""Independent Gauss-Seidel power-flow oracle for cross-checking the solver.

Deliberately shares no code with pvgridrl.powerflow: it assembles a bus
admittance matrix directly from the model's ohmic line data and relaxes one
node voltage at a time. Slow and simple on purpose.
"""

import numpy as np

_ROT = {"a": 1.0 + 0.0j,
        "b": np.exp(-2j * np.pi / 3.0),
        "c": np.exp(2j * np.pi / 3.0)}


def admittance_matrix(model):
    """(nodes, Y): node list [(bus_id, phase), ...] and the bus admittance matrix."""
    nodes = [(b.id, ph) for b in model.buses for ph in b.phases]
    index = {node: i for i, node in enumerate(nodes)}
    z_base = 1000.0 * model.base_kv ** 2 / model.base_kva
    n = len(nodes)
    y = np.zeros((n, n), dtype=complex)
    for line in model.lines:
        z = (np.asarray(line.r_ohm) + 1j * np.asarray(line.x_ohm)) / z_base
        y_line = np.linalg.inv(z)
        f_idx = [index[(line.from_bus, ph)] for ph in line.phases]
        t_idx = [index[(line.to_bus, ph)] for ph in line.phases]
        for a, pa in enumerate(line.phases):
            for b, pb in enumerate(line.phases):
                y[f_idx[a], f_idx[b]] += y_line[a, b]
                y[t_idx[a], t_idx[b]] += y_line[a, b]
                y[f_idx[a], t_idx[b]] -= y_line[a, b]
                y[t_idx[a], f_idx[b]] -= y_line[a, b]
    return nodes, y


def gauss_seidel(model, injections_by_node, tol=1e-12, max_sweeps=100000):
    """Solve V_k conj-form fixed point by nodewise relaxation.

    injections_by_node: {(bus_id, phase): complex net power, p.u.}. Substation
    nodes are held at the nominal phasors. Returns {(bus_id, phase): V}.
    Raises RuntimeError if the residual fails to reach tol.
    """
    nodes, y = admittance_matrix(model)
    n = len(nodes)
    s = np.array([injections_by_node.get(node, 0.0) for node in nodes],
                 dtype=complex)
    v = np.array([_ROT[ph] for _, ph in nodes], dtype=complex)
    slack = [i for i, (bus, _) in enumerate(nodes) if bus == 0]
    free = [i for i in range(n) if i not in slack]
    for _ in range(max_sweeps):
        for k in free:
            rest = y[k] @ v - y[k, k] * v[k]
            v[k] = (np.conj(s[k] / v[k]) - rest) / y[k, k]
        residual = np.abs(s - v * np.conj(y @ v))[free]
        if residual.max() <= tol:
            return {node: v[i] for i, node in enumerate(nodes)}
    raise RuntimeError(f"oracle did not converge (residual {residual.max():.3e})")


def load_injections(model):
    """Net complex power per node from the model's base loads, p.u."""
    out = {}
    for b in model.buses:
        for k, ph in enumerate(b.phases):
            out[(b.id, ph)] = -(b.load_kw[k] + 1j * b.load_kvar[k]) / model.base_kva
    return out
