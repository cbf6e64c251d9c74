"""Scenario files: versioned TOML documents describing a microgrid experiment.

Every numeric key carries its unit as a suffix (``_V``, ``_S``, ``_H``, ``_ohm``,
``_Ws``, ``_W``, ``_var``, ``_s``, ``_rad``, ``_Hz``). Nodes are referenced by name.
The README documents every section and key.
"""

import hashlib
import math
import re
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .analysis import CommGraph, DroopParams
from .dynamics import LoadSchedule, SimOptions, SimState
from .exceptions import DomainError, ScenarioError, StructuralError
from .netgraph import NODE_KINDS, NetworkModel
from .powerflow import LineExtension

FORMAT_VERSION = 1

_TOP = {"version", "title", "network", "droop", "comm", "sim", "extension", "robust"}
_NETWORK = {"frequency_Hz", "nodes", "edges"}
_NODE = {"name", "kind", "voltage_V"}
_EDGE = {"from", "to", "susceptance_S", "inductance_H", "resistance_ohm"}
_DROOP = {"inverters", "loads"}
_INVERTER = {"node", "D_Ws", "P_star_W", "rating_W", "k_s"}
_LOAD = {"node", "P_W", "schedule"}
_COMM = {"edges"}
_COMM_EDGE = {"from", "to", "weight_Ws"}
_SIM = {
    "tspan_s", "step_s", "max_step_s", "min_step_s", "method", "mode", "eps_Ws", "frame",
    "sample_dt_s", "rtol", "atol_rad", "theta0_rad", "p0_W", "controller",
}
_EXTENSION = {"inverters", "loads"}
_EXT_INVERTER = {"node", "E_star_V", "droop_gain_V_per_var", "Q_star_var"}
_EXT_LOAD = {"node", "Q_var", "schedule"}
_ROBUST = {"nodes", "edges"}
_ROBUST_NODE = {"node", "E_lower_V"}
_ROBUST_EDGE = {"from", "to", "susceptance_lower_S"}


@dataclass(frozen=True, eq=False)
class Scenario:
    """A parsed, validated scenario."""

    net: NetworkModel
    params: DroopParams
    schedule: LoadSchedule
    comm: CommGraph
    opts: SimOptions
    tspan: tuple
    state0: SimState
    extension: LineExtension
    robust: tuple
    frequency_hz: float
    controller: str
    title: str
    digest: str
    path: str = None

    def with_load(self, P_load):
        """Same scenario with every load held constant at ``P_load`` watts."""
        P_load = np.broadcast_to(np.asarray(P_load, dtype=float), self.params.P_load.shape)
        return replace(self, params=self.params.with_loads(P_load), schedule=LoadSchedule.constant(P_load))


class _Ctx:
    def __init__(self, text, path):
        self.text = text
        self.path = path

    def locate(self, needle):
        """Best-effort (line, column) of the first ``needle =`` in the source."""
        m = re.search(r"(^|[\s{,\[])(" + re.escape(needle) + r")\s*=", self.text, re.MULTILINE)
        if not m:
            m = re.search(re.escape(needle), self.text)
            if not m:
                return None, None
            start = m.start()
        else:
            start = m.start(2)
        line = self.text.count("\n", 0, start) + 1
        col = start - (self.text.rfind("\n", 0, start) + 1) + 1
        return line, col

    def error(self, message, key=None):
        line, col = self.locate(key) if key else (None, None)
        return ScenarioError(message, line, col, self.path)


def _table(ctx, obj, allowed, where, required=()):
    if not isinstance(obj, dict):
        raise ctx.error(f"{where} must be a table")
    for k in obj:
        if k not in allowed:
            raise ctx.error(f"unknown key {k!r} in {where}; allowed: {', '.join(sorted(allowed))}", k)
    for k in required:
        if k not in obj:
            raise ctx.error(f"{where} is missing required key {k!r}")
    return obj


def _array(ctx, obj, where, key):
    if not isinstance(obj, list):
        raise ctx.error(f"{where} must be an array", key)
    return obj


def _number(ctx, value, where, key, *, positive=False, nonnegative=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ctx.error(f"{where}.{key} must be a number", key)
    x = float(value)
    if not math.isfinite(x):
        raise ctx.error(f"{where}.{key} must be finite", key)
    if positive and x <= 0:
        raise ctx.error(f"{where}.{key} must be positive", key)
    if nonnegative and x < 0:
        raise ctx.error(f"{where}.{key} must be nonnegative", key)
    return x


def _string(ctx, value, where, key):
    if not isinstance(value, str):
        raise ctx.error(f"{where}.{key} must be a string", key)
    return value


def _parse_network(ctx, doc):
    sec = _table(ctx, doc.get("network"), _NETWORK, "[network]", ("nodes", "edges"))
    freq = _number(ctx, sec.get("frequency_Hz", 60.0), "network", "frequency_Hz", positive=True)
    omega = 2 * math.pi * freq
    names, kinds, volts = [], [], []
    for k, node in enumerate(_array(ctx, sec["nodes"], "network.nodes", "nodes")):
        where = f"network.nodes[{k}]"
        _table(ctx, node, _NODE, where, ("name", "kind", "voltage_V"))
        name = _string(ctx, node["name"], where, "name")
        kind = _string(ctx, node["kind"], where, "kind")
        if kind not in NODE_KINDS:
            raise ctx.error(f"{where}.kind must be one of {NODE_KINDS}, got {kind!r}", "kind")
        if name in names:
            raise ctx.error(f"duplicate node name {name!r}", "name")
        names.append(name)
        kinds.append(kind)
        volts.append(_number(ctx, node["voltage_V"], where, "voltage_V", positive=True))
    index = {n: k for k, n in enumerate(names)}

    edges, susc, resist = [], [], []
    for k, edge in enumerate(_array(ctx, sec["edges"], "network.edges", "edges")):
        where = f"network.edges[{k}]"
        _table(ctx, edge, _EDGE, where, ("from", "to"))
        i = _node_ref(ctx, index, edge["from"], where, "from")
        j = _node_ref(ctx, index, edge["to"], where, "to")
        has_b, has_l = "susceptance_S" in edge, "inductance_H" in edge
        if has_b == has_l:
            raise ctx.error(f"{where} needs exactly one of susceptance_S or inductance_H")
        if has_b:
            b = _number(ctx, edge["susceptance_S"], where, "susceptance_S", positive=True)
        else:
            b = 1.0 / (omega * _number(ctx, edge["inductance_H"], where, "inductance_H", positive=True))
        edges.append((i, j))
        susc.append(b)
        resist.append(_number(ctx, edge.get("resistance_ohm", 0.0), where, "resistance_ohm", nonnegative=True))
    try:
        net = NetworkModel(kinds=kinds, edges=edges, susceptance=susc, voltages=volts, names=names)
    except DomainError as exc:
        raise ctx.error(f"invalid network: {exc}") from None
    return net, index, freq, np.array(resist)


def _node_ref(ctx, index, value, where, key, kind=None, kinds=None):
    name = _string(ctx, value, where, key)
    if name not in index:
        raise ctx.error(f"{where}.{key} names unknown node {name!r}", key)
    k = index[name]
    if kind is not None and kinds[k] != kind:
        raise ctx.error(f"{where}.{key}: node {name!r} is a {kinds[k]}, expected a {kind}", key)
    return k


def _per_node(ctx, net, index, entries, where, kind, allowed, required):
    """Map a list of per-node tables onto the nodes of ``kind`` (in node order)."""
    targets = net.inverter_nodes if kind == "inverter" else net.load_nodes
    found = {}
    for k, entry in enumerate(_array(ctx, entries, where, where.split(".")[-1])):
        w = f"{where}[{k}]"
        _table(ctx, entry, allowed, w, required)
        node = _node_ref(ctx, index, entry["node"], w, "node", kind, net.kinds)
        if node in found:
            raise ctx.error(f"{w}: node {net.names[node]!r} listed twice", "node")
        found[node] = (w, entry)
    missing = [net.names[t] for t in targets if t not in found]
    if missing:
        raise ctx.error(f"{where} has no entry for {kind} node(s): {', '.join(missing)}")
    return [found[t] for t in targets]


def _schedule(ctx, rows, key):
    """Merge per-load step lists into one right-continuous schedule."""
    initial, per_row, times = [], [], set()
    for w, entry in rows:
        steps = []
        for s, step in enumerate(_array(ctx, entry.get("schedule", []), f"{w}.schedule", "schedule")):
            sw = f"{w}.schedule[{s}]"
            _table(ctx, step, {"t_s", key}, sw, ("t_s", key))
            steps.append((_number(ctx, step["t_s"], sw, "t_s"), _number(ctx, step[key], sw, key)))
        ts = [t for t, _ in steps]
        if any(t1 <= t0 for t0, t1 in zip(ts, ts[1:])):
            raise ctx.error(f"{w}.schedule times must be strictly increasing", "schedule")
        initial.append(_number(ctx, entry[key], w, key))
        per_row.append(dict(steps))
        times.update(ts)
    times = sorted(times)
    values = [np.array(initial)]
    for t in times:
        row = values[-1].copy()
        for k, steps in enumerate(per_row):
            row[k] = steps.get(t, row[k])
        values.append(row)
    return LoadSchedule(np.array(times), np.vstack(values).reshape(len(times) + 1, len(rows)))


def _parse_droop(ctx, doc, net, index):
    sec = _table(ctx, doc.get("droop"), _DROOP, "[droop]", ("inverters",))
    inv = _per_node(ctx, net, index, sec["inverters"], "droop.inverters", "inverter", _INVERTER, ("node", "D_Ws", "P_star_W"))
    loads = _per_node(ctx, net, index, sec.get("loads", []), "droop.loads", "load", _LOAD, ("node", "P_W"))
    D = [_number(ctx, e["D_Ws"], w, "D_Ws", positive=True) for w, e in inv]
    P = [_number(ctx, e["P_star_W"], w, "P_star_W") for w, e in inv]
    has_rating = ["rating_W" in e for _, e in inv]
    if any(has_rating) and not all(has_rating):
        raise ctx.error("rating_W must be given for every inverter or for none", "rating_W")
    ratings = [_number(ctx, e["rating_W"], w, "rating_W", positive=True) for w, e in inv] if all(has_rating) else None
    has_k = ["k_s" in e for _, e in inv]
    if any(has_k) and not all(has_k):
        raise ctx.error("k_s must be given for every inverter or for none", "k_s")
    k = [_number(ctx, e["k_s"], w, "k_s", positive=True) for w, e in inv] if all(has_k) else None
    schedule = _schedule(ctx, loads, "P_W")
    try:
        params = DroopParams(D=D, P_star=P, P_load=schedule.values[0], ratings=ratings, k=k)
    except DomainError as exc:
        raise ctx.error(f"invalid droop parameters: {exc}") from None
    return params, schedule


def _parse_comm(ctx, doc, net, index):
    if "comm" not in doc:
        return None
    sec = _table(ctx, doc["comm"], _COMM, "[comm]", ("edges",))
    pos = {int(node): k for k, node in enumerate(net.inverter_nodes)}
    edges, weights = [], []
    for k, edge in enumerate(_array(ctx, sec["edges"], "comm.edges", "edges")):
        where = f"comm.edges[{k}]"
        _table(ctx, edge, _COMM_EDGE, where, ("from", "to", "weight_Ws"))
        i = _node_ref(ctx, index, edge["from"], where, "from", "inverter", net.kinds)
        j = _node_ref(ctx, index, edge["to"], where, "to", "inverter", net.kinds)
        edges.append((pos[i], pos[j]))
        weights.append(_number(ctx, edge["weight_Ws"], where, "weight_Ws", positive=True))
    try:
        return CommGraph.from_edges(len(pos), edges, weights)
    except (DomainError, StructuralError) as exc:
        raise ctx.error(f"invalid communication graph: {exc}") from None


def _vector(ctx, value, where, key, size):
    arr = _array(ctx, value, where, key)
    if len(arr) != size:
        raise ctx.error(f"{where}.{key} needs {size} entries, got {len(arr)}", key)
    return np.array([_number(ctx, v, where, key) for v in arr])


def _parse_sim(ctx, doc, net):
    sec = _table(ctx, doc.get("sim", {}), _SIM, "[sim]")
    tspan = _vector(ctx, sec.get("tspan_s", [0.0, 1.0]), "sim", "tspan_s", 2)
    if not tspan[1] > tspan[0]:
        raise ctx.error("sim.tspan_s must be increasing", "tspan_s")
    kw = {}
    for key, name in (("step_s", "step"), ("max_step_s", "max_step"), ("min_step_s", "min_step"),
                      ("eps_Ws", "eps"), ("sample_dt_s", "sample_dt"), ("rtol", "rtol"), ("atol_rad", "atol")):
        if key in sec:
            kw[name] = _number(ctx, sec[key], "sim", key, positive=True)
    for key in ("method", "mode", "frame"):
        if key in sec:
            kw[key] = _string(ctx, sec[key], "sim", key)
    try:
        opts = SimOptions(**kw)
    except DomainError as exc:
        raise ctx.error(f"invalid [sim] settings: {exc}") from None
    theta0 = _vector(ctx, sec["theta0_rad"], "sim", "theta0_rad", net.n_nodes) if "theta0_rad" in sec else np.zeros(net.n_nodes)
    m = net.inverter_nodes.shape[0]
    p0 = _vector(ctx, sec["p0_W"], "sim", "p0_W", m) if "p0_W" in sec else np.zeros(m)
    controller = _string(ctx, sec.get("controller", "droop"), "sim", "controller")
    if controller not in ("droop", "dapi", "dapi-volt"):
        raise ctx.error("sim.controller must be droop, dapi or dapi-volt", "controller")
    return opts, (float(tspan[0]), float(tspan[1])), SimState(theta0, p0, float(tspan[0])), controller


def _parse_extension(ctx, doc, net, index, resist):
    if "extension" not in doc:
        return None
    sec = _table(ctx, doc["extension"], _EXTENSION, "[extension]", ("inverters",))
    inv = _per_node(ctx, net, index, sec["inverters"], "extension.inverters", "inverter", _EXT_INVERTER, ("node",))
    E_star = [
        _number(ctx, e["E_star_V"], w, "E_star_V", positive=True) if "E_star_V" in e else net.voltages[n]
        for (w, e), n in zip(inv, net.inverter_nodes)
    ]
    gain = [_number(ctx, e.get("droop_gain_V_per_var", 0.0), w, "droop_gain_V_per_var", nonnegative=True) for w, e in inv]
    Q_star = [_number(ctx, e.get("Q_star_var", 0.0), w, "Q_star_var") for w, e in inv]
    load_rows = sec.get("loads")
    q_sched = None
    if load_rows is not None:
        rows = _per_node(ctx, net, index, load_rows, "extension.loads", "load", _EXT_LOAD, ("node", "Q_var"))
        q_sched = _schedule(ctx, rows, "Q_var")
    # series impedance R + jX with X = 1/|Y| from the lossless model
    X = 1.0 / net.susceptance
    z2 = resist**2 + X**2
    return LineExtension(
        conductance=resist / z2,
        E_star=E_star,
        droop_gain=gain,
        Q_star=Q_star,
        susceptance=X / z2,
        load_Q=None if q_sched is None else q_sched.values[0],
        load_Q_schedule=q_sched,
    )


def _parse_robust(ctx, doc, net, index):
    if "robust" not in doc:
        return None
    sec = _table(ctx, doc["robust"], _ROBUST, "[robust]")
    E_low = net.voltages.copy()
    Y_low = net.susceptance.copy()
    for k, entry in enumerate(_array(ctx, sec.get("nodes", []), "robust.nodes", "nodes")):
        w = f"robust.nodes[{k}]"
        _table(ctx, entry, _ROBUST_NODE, w, ("node", "E_lower_V"))
        E_low[_node_ref(ctx, index, entry["node"], w, "node")] = _number(ctx, entry["E_lower_V"], w, "E_lower_V", positive=True)
    lookup = {frozenset(e): ell for ell, e in enumerate(net.edges)}
    for k, entry in enumerate(_array(ctx, sec.get("edges", []), "robust.edges", "edges")):
        w = f"robust.edges[{k}]"
        _table(ctx, entry, _ROBUST_EDGE, w, ("from", "to", "susceptance_lower_S"))
        i = _node_ref(ctx, index, entry["from"], w, "from")
        j = _node_ref(ctx, index, entry["to"], w, "to")
        ell = lookup.get(frozenset((i, j)))
        if ell is None:
            raise ctx.error(f"{w} does not match a network line", "from")
        Y_low[ell] = _number(ctx, entry["susceptance_lower_S"], w, "susceptance_lower_S", positive=True)
    return E_low, Y_low


def loads(text, path=None):
    """Parse scenario text. Raises :class:`ScenarioError` with a location on bad input."""
    ctx = _Ctx(text, path)
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        msg = str(exc)
        m = re.search(r"\(at line (\d+), column (\d+)\)", msg)
        line, col = (int(m.group(1)), int(m.group(2))) if m else (None, None)
        raise ScenarioError(re.sub(r"\s*\(at line.*\)", "", msg), line, col, path) from None
    _table(ctx, doc, _TOP, "scenario", ("version", "network", "droop"))
    version = doc["version"]
    if version != FORMAT_VERSION:
        raise ctx.error(f"unsupported scenario version {version!r}; this reader handles {FORMAT_VERSION}", "version")
    net, index, freq, resist = _parse_network(ctx, doc)
    params, schedule = _parse_droop(ctx, doc, net, index)
    comm = _parse_comm(ctx, doc, net, index)
    opts, tspan, state0, controller = _parse_sim(ctx, doc, net)
    ext = _parse_extension(ctx, doc, net, index, resist)
    robust = _parse_robust(ctx, doc, net, index)
    return Scenario(
        net=net,
        params=params,
        schedule=schedule,
        comm=comm,
        opts=opts,
        tspan=tspan,
        state0=state0,
        extension=ext,
        robust=robust,
        frequency_hz=freq,
        controller=controller,
        title=str(doc.get("title", "")),
        digest=hashlib.sha256(text.encode()).hexdigest(),
        path=path,
    )


def load(path):
    """Read and parse a scenario file."""
    path = str(path)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ScenarioError(f"cannot read scenario: {exc}", path=path) from None
    return loads(text, path)


def bundled(name):
    """Path of a scenario shipped with the package, e.g. ``bundled("table1")``."""
    base = Path(__file__).parent / "scenarios"
    p = base / (name if name.endswith(".scn") else name + ".scn")
    if not p.exists():
        raise FileNotFoundError(f"no bundled scenario {name!r}; available: {sorted(q.stem for q in base.glob('*.scn'))}")
    return p
