"""Feeder data model, grid file format, synthetic feeders, and scenario sampling.

A feeder is a radial network of buses fed from the substation (bus 0, held at
nominal voltage). Buses carry per-phase loads and optionally a PV inverter;
lines carry per-phase impedance matrices. Files store kW/kvar and ohms;
impedances are converted to per-unit on load, using base_kv as the
line-to-neutral voltage base and base_kva as the per-phase power base.

NetworkModel and Scenario are immutable after construction and safe to share
across concurrent rollouts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

PHASES = "abc"
SCHEMA_VERSION = 1

# IEEE 1547-2018 real-power cap as a fraction of apparent capacity
P_CAP_FRACTION = 0.9


class GridFileError(ValueError):
    """A grid file could not be parsed; message carries file/field context."""


class ValidationError(ValueError):
    """A structurally parsed model violates a feeder invariant."""


@dataclass(frozen=True)
class InverterSpec:
    """Static inverter datum: apparent power capacity in kVA.

    Episode-varying quantities live elsewhere: available solar power in
    Scenario.p_env, current setpoints in the environment state.
    """
    s_kva: float

    @property
    def p_max_kw(self) -> float:
        return P_CAP_FRACTION * self.s_kva


@dataclass(frozen=True)
class Bus:
    id: int
    phases: str                 # nonempty subsequence of "abc"
    load_kw: np.ndarray         # consumption-positive, aligned with phases
    load_kvar: np.ndarray
    inverter: InverterSpec | None = None


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    phases: str
    r_ohm: np.ndarray           # |phases| x |phases|, symmetric
    x_ohm: np.ndarray
    z_pu: np.ndarray = field(compare=False, default=None)  # filled by the model


class NetworkModel:
    """Validated radial feeder with derived topology.

    Derived fields (orientation, per-unit impedances, controllable set) are
    computed once at construction; instances are treated as immutable.
    """

    def __init__(self, base_kv, base_kva, buses, lines, source="<memory>"):
        self.base_kv = float(base_kv)
        self.base_kva = float(base_kva)
        self.buses = sorted(buses, key=lambda b: b.id)
        self.lines = list(lines)
        self._validate(source)
        self._orient(source)

    # -- derived topology ---------------------------------------------------

    def _validate(self, src):
        if self.base_kv <= 0 or self.base_kva <= 0:
            raise ValidationError(f"{src}: base_kv and base_kva must be positive")
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"{src}: duplicate bus ids")
        if 0 not in ids:
            raise ValidationError(f"{src}: substation bus 0 missing")
        self.bus_index = {b.id: k for k, b in enumerate(self.buses)}
        for b in self.buses:
            if not b.phases or any(p not in PHASES for p in b.phases) \
                    or list(b.phases) != sorted(set(b.phases), key=PHASES.index):
                raise ValidationError(
                    f"{src}: bus {b.id} phases {b.phases!r} must be an ordered "
                    f"nonempty subset of 'abc'")
            if len(b.load_kw) != len(b.phases) or len(b.load_kvar) != len(b.phases):
                raise ValidationError(
                    f"{src}: bus {b.id} load arrays must have one entry per phase")
            if np.any(b.load_kw < 0):
                raise ValidationError(f"{src}: bus {b.id} has negative real load")
            if b.inverter is not None and not b.inverter.s_kva > 0:
                raise ValidationError(f"{src}: bus {b.id} inverter capacity must be > 0")
        sub = self.buses[self.bus_index[0]]
        if sub.inverter is not None or np.any(sub.load_kw) or np.any(sub.load_kvar):
            raise ValidationError(f"{src}: substation bus 0 must carry no load or inverter")
        if len(self.lines) != len(self.buses) - 1:
            raise ValidationError(
                f"{src}: radiality violated: {len(self.lines)} lines for "
                f"{len(self.buses)} buses (need |buses| - 1)")
        z_base = 1000.0 * self.base_kv ** 2 / self.base_kva  # ohm
        fixed = []
        for i, ln in enumerate(self.lines):
            for end in (ln.from_bus, ln.to_bus):
                if end not in self.bus_index:
                    raise ValidationError(f"{src}: line {i} references unknown bus {end}")
            if ln.from_bus == ln.to_bus:
                raise ValidationError(f"{src}: line {i} is a self-loop")
            for end in (ln.from_bus, ln.to_bus):
                have = self.buses[self.bus_index[end]].phases
                if not set(ln.phases) <= set(have):
                    raise ValidationError(
                        f"{src}: line {i} phases {ln.phases!r} not a subset of "
                        f"bus {end} phases {have!r}")
            m = len(ln.phases)
            for name, mat in (("r_ohm", ln.r_ohm), ("x_ohm", ln.x_ohm)):
                if mat.shape != (m, m):
                    raise ValidationError(f"{src}: line {i} {name} must be {m}x{m}")
                if not np.array_equal(mat, mat.T):
                    raise ValidationError(f"{src}: line {i} {name} must be symmetric")
            z = (ln.r_ohm + 1j * ln.x_ohm) / z_base
            if np.any(np.abs(np.diag(z)) == 0):
                raise ValidationError(f"{src}: line {i} has a zero diagonal impedance")
            fixed.append(Line(ln.from_bus, ln.to_bus, ln.phases,
                              ln.r_ohm, ln.x_ohm, z_pu=z))
        self.lines = fixed
        self.controllable = [b.id for b in self.buses if b.inverter is not None]
        if not self.controllable:
            raise ValidationError(f"{src}: at least one inverter is required")

    def _orient(self, src):
        """BFS from the substation; establishes parent pointers and checks
        connectivity and that every bus phase is energized by its feeding line."""
        adj = {b.id: [] for b in self.buses}
        for ln in self.lines:
            adj[ln.from_bus].append(ln)
            adj[ln.to_bus].append(ln)
        self.parent = {0: None}      # bus id -> (parent id, Line) or None
        self.order = [0]             # bus ids, root first, parents before children
        seen = {0}
        q = [0]
        while q:
            u = q.pop(0)
            for ln in adj[u]:
                v = ln.to_bus if ln.from_bus == u else ln.from_bus
                if v in seen:
                    continue
                seen.add(v)
                self.parent[v] = (u, ln)
                self.order.append(v)
                q.append(v)
        if len(seen) != len(self.buses):
            missing = sorted(set(self.bus_index) - seen)
            raise ValidationError(f"{src}: buses {missing} not connected to the substation")
        for bid in self.order[1:]:
            bus = self.buses[self.bus_index[bid]]
            _, ln = self.parent[bid]
            if not set(bus.phases) <= set(ln.phases):
                raise ValidationError(
                    f"{src}: bus {bid} phase(s) "
                    f"{set(bus.phases) - set(ln.phases)} not energized by its feeding line")

    # -- convenience --------------------------------------------------------

    @property
    def n_agents(self) -> int:
        return len(self.controllable)

    def bus(self, bus_id) -> Bus:
        return self.buses[self.bus_index[bus_id]]

    def inverter_capacity(self) -> np.ndarray:
        """s_kva per controllable bus, in controllable (bus id) order."""
        return np.array([self.bus(i).inverter.s_kva for i in self.controllable])

    def base_load(self):
        """(kw, kvar) lists of per-phase base load arrays, aligned with buses."""
        return ([b.load_kw.copy() for b in self.buses],
                [b.load_kvar.copy() for b in self.buses])


@dataclass(frozen=True)
class Scenario:
    """One episode's frozen operating conditions.

    load_kw/load_kvar are per-bus per-phase arrays aligned with model.buses;
    p_env is in kW, aligned with model.controllable.
    """
    load_kw: tuple
    load_kvar: tuple
    p_env: np.ndarray
    seed: int | None = None

    def net_load_kw(self, model) -> np.ndarray:
        """Total real load per controllable bus (sum over phases)."""
        return np.array([self.load_kw[model.bus_index[i]].sum()
                         for i in model.controllable])


def _freeze(a):
    a = np.asarray(a, dtype=float)
    a.flags.writeable = False
    return a


# ---------------------------------------------------------------------------
# file format


def _expect(obj, key, kind, ctx):
    if key not in obj:
        raise GridFileError(f"{ctx}: missing field {key!r}")
    val = obj[key]
    if kind is float and isinstance(val, (int, float)) and not isinstance(val, bool):
        return float(val)
    if kind is int and isinstance(val, int) and not isinstance(val, bool):
        return val
    if kind in (list, str, dict) and isinstance(val, kind):
        return val
    raise GridFileError(f"{ctx}.{key}: expected {kind.__name__}, got {type(val).__name__}")


def _matrix(rows, ctx):
    try:
        m = np.array(rows, dtype=float)
    except (TypeError, ValueError) as e:
        raise GridFileError(f"{ctx}: not a numeric matrix ({e})") from None
    if m.ndim != 2:
        raise GridFileError(f"{ctx}: expected a 2-D matrix")
    return m


def from_dict(doc, source="<dict>") -> NetworkModel:
    """Build and validate a NetworkModel from the schema-1 document form."""
    if not isinstance(doc, dict):
        raise GridFileError(f"{source}: top level must be an object")
    schema = _expect(doc, "schema", int, source)
    if schema != SCHEMA_VERSION:
        raise GridFileError(f"{source}: schema {schema} unsupported, expected {SCHEMA_VERSION}")
    base_kv = _expect(doc, "base_kv", float, source)
    base_kva = _expect(doc, "base_kva", float, source)
    buses = []
    for k, b in enumerate(_expect(doc, "buses", list, source)):
        ctx = f"{source}: buses[{k}]"
        if not isinstance(b, dict):
            raise GridFileError(f"{ctx}: expected an object")
        inv = None
        if b.get("inverter") is not None:
            inv = InverterSpec(_expect(b["inverter"], "s_kva", float, f"{ctx}.inverter"))
        buses.append(Bus(
            id=_expect(b, "id", int, ctx),
            phases=_expect(b, "phases", str, ctx),
            load_kw=_freeze(np.array(_expect(b, "load_kw", list, ctx), dtype=float)),
            load_kvar=_freeze(np.array(_expect(b, "load_kvar", list, ctx), dtype=float)),
            inverter=inv))
    lines = []
    for k, ln in enumerate(_expect(doc, "lines", list, source)):
        ctx = f"{source}: lines[{k}]"
        if not isinstance(ln, dict):
            raise GridFileError(f"{ctx}: expected an object")
        lines.append(Line(
            from_bus=_expect(ln, "from", int, ctx),
            to_bus=_expect(ln, "to", int, ctx),
            phases=_expect(ln, "phases", str, ctx),
            r_ohm=_freeze(_matrix(_expect(ln, "r_ohm", list, ctx), f"{ctx}.r_ohm")),
            x_ohm=_freeze(_matrix(_expect(ln, "x_ohm", list, ctx), f"{ctx}.x_ohm"))))
    return NetworkModel(base_kv, base_kva, buses, lines, source=source)


def to_dict(model: NetworkModel) -> dict:
    """Serialize back to the schema-1 document form (ohms and kW, not p.u.)."""
    buses = []
    for b in model.buses:
        d = {"id": b.id, "phases": b.phases,
             "load_kw": b.load_kw.tolist(), "load_kvar": b.load_kvar.tolist()}
        if b.inverter is not None:
            d["inverter"] = {"s_kva": b.inverter.s_kva}
        buses.append(d)
    lines = [{"from": ln.from_bus, "to": ln.to_bus, "phases": ln.phases,
              "r_ohm": ln.r_ohm.tolist(), "x_ohm": ln.x_ohm.tolist()}
             for ln in model.lines]
    return {"schema": SCHEMA_VERSION, "base_kv": model.base_kv,
            "base_kva": model.base_kva, "buses": buses, "lines": lines}


def load_network(file_path) -> NetworkModel:
    try:
        with open(file_path) as f:
            doc = json.load(f)
    except OSError as e:
        raise GridFileError(f"{file_path}: {e.strerror or e}") from None
    except json.JSONDecodeError as e:
        raise GridFileError(f"{file_path}: line {e.lineno} col {e.colno}: {e.msg}") from None
    return from_dict(doc, source=str(file_path))


def save_network(model: NetworkModel, file_path) -> None:
    with open(file_path, "w") as f:
        json.dump(to_dict(model), f, indent=1)
        f.write("\n")


def bundled_feeder_path(name):
    """Path to a feeder file shipped with the package (e.g. 'feeder_deeppv8.json')."""
    return resources.files(__package__).joinpath("data", name)


def load_bundled(name) -> NetworkModel:
    return load_network(bundled_feeder_path(name))


# ---------------------------------------------------------------------------
# synthetic feeders


def generate_synthetic_feeder(num_buses, num_controllable, seed,
                              phase_mode="single", base_kv=2.4, base_kva=100.0,
                              r_pu_band=(0.02, 0.05), xr_band=(0.5, 1.5),
                              load_kw_band=(4.0, 12.0), chain_bias=0.7) -> NetworkModel:
    """Random radial feeder, deterministic for a fixed seed.

    phase_mode "single" builds a balanced single-phase equivalent (every bus
    on phase a); "three" builds a mixed-phase feeder where each bus carries a
    subset of its parent's phases. chain_bias is the probability that a new
    bus extends the current feeder end rather than tapping an earlier bus,
    which controls feeder depth and hence voltage spread.
    """
    if num_buses < 2:
        raise ValueError("num_buses must be at least 2")
    if not 1 <= num_controllable <= num_buses - 1:
        raise ValueError("need 1 <= num_controllable <= num_buses - 1")
    if phase_mode not in ("single", "three"):
        raise ValueError(f"unknown phase_mode {phase_mode!r}")
    rng = np.random.default_rng(seed)
    z_base = 1000.0 * base_kv ** 2 / base_kva

    phases = {0: PHASES if phase_mode == "three" else "a"}
    parent = {}
    for b in range(1, num_buses):
        p = b - 1 if (b == 1 or rng.random() < chain_bias) \
            else int(rng.integers(0, b))
        parent[b] = p
        if phase_mode == "single":
            phases[b] = "a"
        elif rng.random() < 0.6 or len(phases[p]) == 1:
            phases[b] = phases[p]
        else:
            keep = sorted(rng.choice(len(phases[p]),
                                     size=int(rng.integers(1, len(phases[p]))),
                                     replace=False))
            phases[b] = "".join(phases[p][i] for i in keep)

    controllable = sorted(rng.choice(np.arange(1, num_buses),
                                     size=num_controllable, replace=False).tolist())

    buses = []
    for b in range(num_buses):
        nph = len(phases[b])
        if b == 0:
            kw = np.zeros(nph)
            kvar = np.zeros(nph)
        else:
            kw = rng.uniform(*load_kw_band, size=nph)
            kvar = kw * rng.uniform(0.1, 0.35, size=nph)
        inv = None
        if b in controllable:
            inv = InverterSpec(s_kva=round(2.4 * float(kw.sum()), 3))
        buses.append(Bus(b, phases[b], _freeze(kw), _freeze(kvar), inv))

    lines = []
    for b in range(1, num_buses):
        ph = phases[b]
        m = len(ph)
        r_self = rng.uniform(*r_pu_band)
        x_self = r_self * rng.uniform(*xr_band)
        coupling = rng.uniform(0.2, 0.4)
        r = np.full((m, m), coupling * r_self)
        x = np.full((m, m), coupling * x_self)
        np.fill_diagonal(r, r_self)
        np.fill_diagonal(x, x_self)
        lines.append(Line(parent[b], b, ph,
                          _freeze(np.round(r * z_base, 9)),
                          _freeze(np.round(x * z_base, 9))))

    return NetworkModel(base_kv, base_kva, buses, lines,
                        source=f"<synthetic seed={seed}>")


# ---------------------------------------------------------------------------
# scenarios


def sample_scenario(model: NetworkModel, rng=None, seed=None,
                    load_scale_range=(0.5, 1.5)) -> Scenario:
    """Draw one episode's loads and available solar.

    Each non-substation bus gets one scale factor, uniform over
    load_scale_range, applied to its base P and Q together. Each controllable
    bus with sampled net load x kW gets p_env ~ Uniform(0, min(2x, 0.9 S)).
    Draw order is fixed (buses ascending, then controllable ascending), so a
    fixed rng state reproduces the Scenario exactly.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    kw, kvar = [], []
    for b in model.buses:
        scale = 1.0 if b.id == 0 else rng.uniform(*load_scale_range)
        kw.append(_freeze(b.load_kw * scale))
        kvar.append(_freeze(b.load_kvar * scale))
    p_env = np.zeros(model.n_agents)
    for k, bid in enumerate(model.controllable):
        x = kw[model.bus_index[bid]].sum()
        cap = min(2.0 * x, model.bus(bid).inverter.p_max_kw)
        p_env[k] = rng.uniform(0.0, cap) if cap > 0 else 0.0
    return Scenario(tuple(kw), tuple(kvar), _freeze(p_env), seed=seed)


def deep_pv_scenario(model: NetworkModel) -> Scenario:
    """Deterministic worst-case solar scenario: base loads, p_env at the top
    of its sampling range (min(2x, 0.9 S)) at every controllable bus."""
    kw = tuple(_freeze(b.load_kw.copy()) for b in model.buses)
    kvar = tuple(_freeze(b.load_kvar.copy()) for b in model.buses)
    p_env = np.zeros(model.n_agents)
    for k, bid in enumerate(model.controllable):
        x = kw[model.bus_index[bid]].sum()
        p_env[k] = min(2.0 * x, model.bus(bid).inverter.p_max_kw)
    return Scenario(kw, kvar, _freeze(p_env), seed=None)
