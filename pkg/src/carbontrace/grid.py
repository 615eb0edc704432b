"""Network data model, case-file parsing and validation.

Two on-disk formats are understood:

* ``native_json`` -- the package's own schema, which carries an explicit
  emission rate per generator::

    {"base_mva": 100,
     "buses": [{"id": 1, "load_mw": 0.0, "slack": true}, ...],
     "lines": [{"from": 1, "to": 2, "x_pu": 0.03, "limit_mw": 400}, ...],
     "generators": [{"bus": 1, "pmin_mw": 0, "pmax_mw": 170,
                     "gamma_lbs_per_mwh": 565,
                     "cost": {"a": 0.0, "b": 15.0, "c": 0.0}}, ...]}

* ``matpower_m`` -- the matrix-literal subset of MATPOWER case files
  (``mpc.bus``, ``mpc.branch``, ``mpc.gen``, ``mpc.gencost``).  Emission
  rates come from an ``mpc.gen_emission`` column or a sidecar
  ``<case>.emissions.json`` file.

Bus ids are always the external (1-based, possibly sparse) numbers from the
case file; internal 0-based positions follow the order of ``Network.buses``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy import sparse

logger = logging.getLogger(__name__)

#: Short ton, used whenever a report says "ton".
LBS_PER_TON = 2000.0

BUILTIN_CASES = ("case5", "case5_3gen", "case24_ieee_rts", "case30", "case118")


class CaseError(ValueError):
    """Raised when a case file cannot be turned into a valid Network."""

    def __init__(self, message, diagnostics=()):
        super().__init__(message)
        self.diagnostics = list(diagnostics)


class CaseSyntaxError(CaseError):
    def __init__(self, message, line, column):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


@dataclass(frozen=True)
class CostModel:
    """Quadratic generation cost ``a*p**2 + b*p + c`` in $/h, p in MW."""

    a: float = 0.0
    b: float = 0.0
    c: float = 0.0

    def __call__(self, p):
        return self.a * np.square(p) + self.b * np.asarray(p) + self.c


@dataclass(frozen=True)
class Bus:
    id: int
    base_load: float = 0.0
    is_slack: bool = False


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    reactance: float
    flow_limit: float = math.inf


@dataclass(frozen=True)
class Generator:
    bus: int
    p_min: float
    p_max: float
    emission_rate: float = 0.0
    cost: CostModel = field(default_factory=CostModel)


@dataclass(frozen=True)
class Diagnostic:
    severity: Literal["error", "warning"]
    location: str
    message: str

    def __str__(self):
        return f"{self.severity}: {self.location}: {self.message}"


@dataclass(frozen=True)
class Network:
    """Immutable DC network description.

    Construction does not validate; use :func:`validate_network` or build
    through :func:`parse_case`, which rejects invalid input.
    """

    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    generators: tuple[Generator, ...]
    base_mva: float = 100.0
    name: str = ""

    def __post_init__(self):
        # accept lists from callers but store tuples so the object stays hashable
        for attr in ("buses", "lines", "generators"):
            object.__setattr__(self, attr, tuple(getattr(self, attr)))

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    @property
    def n_generators(self) -> int:
        return len(self.generators)

    @property
    def bus_ids(self) -> np.ndarray:
        return np.array([b.id for b in self.buses], dtype=int)

    @property
    def bus_index(self) -> dict[int, int]:
        """Map external bus id to internal 0-based position."""
        return {b.id: i for i, b in enumerate(self.buses)}

    @property
    def slack_bus(self) -> int:
        slack = [b.id for b in self.buses if b.is_slack]
        if len(slack) != 1:
            raise CaseError(f"network has {len(slack)} slack buses, expected exactly one")
        return slack[0]

    @property
    def base_loads(self) -> np.ndarray:
        return np.array([b.base_load for b in self.buses], dtype=float)

    @property
    def emission_rates(self) -> np.ndarray:
        return np.array([g.emission_rate for g in self.generators], dtype=float)

    @property
    def p_min(self) -> np.ndarray:
        return np.array([g.p_min for g in self.generators], dtype=float)

    @property
    def p_max(self) -> np.ndarray:
        return np.array([g.p_max for g in self.generators], dtype=float)

    @property
    def flow_limits(self) -> np.ndarray:
        return np.array([ln.flow_limit for ln in self.lines], dtype=float)

    def cost_coefficients(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        a = np.array([g.cost.a for g in self.generators], dtype=float)
        b = np.array([g.cost.b for g in self.generators], dtype=float)
        c = np.array([g.cost.c for g in self.generators], dtype=float)
        return a, b, c

    def generator_incidence(self) -> np.ndarray:
        """Dense N x G matrix with a one where generator g sits at bus n."""
        idx = self.bus_index
        cg = np.zeros((self.n_buses, self.n_generators))
        for g, gen in enumerate(self.generators):
            cg[idx[gen.bus], g] = 1.0
        return cg

    def generators_at(self, bus_id: int) -> list[int]:
        return [g for g, gen in enumerate(self.generators) if gen.bus == bus_id]

    def nodal_injections(self, p_g, loads) -> np.ndarray:
        """Per-bus net injection: generation at the bus minus its load."""
        return self.generator_incidence() @ np.asarray(p_g, dtype=float) - np.asarray(loads, dtype=float)

    def with_slack(self, bus_id: int) -> "Network":
        """Copy of the network with the slack designation moved to ``bus_id``."""
        if bus_id not in self.bus_index:
            raise CaseError(f"slack override refers to unknown bus {bus_id}")
        buses = [Bus(b.id, b.base_load, b.id == bus_id) for b in self.buses]
        return Network(buses, self.lines, self.generators, self.base_mva, self.name)

    def with_loads(self, loads) -> "Network":
        loads = np.asarray(loads, dtype=float)
        buses = [Bus(b.id, float(d), b.is_slack) for b, d in zip(self.buses, loads)]
        return Network(buses, self.lines, self.generators, self.base_mva, self.name)

    def to_dict(self) -> dict:
        def limit(x):
            return None if math.isinf(x) else x

        return {
            "name": self.name,
            "base_mva": self.base_mva,
            "buses": [{"id": b.id, "load_mw": b.base_load, "slack": b.is_slack} for b in self.buses],
            "lines": [
                {"from": ln.from_bus, "to": ln.to_bus, "x_pu": ln.reactance, "limit_mw": limit(ln.flow_limit)}
                for ln in self.lines
            ],
            "generators": [
                {
                    "bus": g.bus,
                    "pmin_mw": g.p_min,
                    "pmax_mw": g.p_max,
                    "gamma_lbs_per_mwh": g.emission_rate,
                    "cost": {"a": g.cost.a, "b": g.cost.b, "c": g.cost.c},
                }
                for g in self.generators
            ],
        }

    def fingerprint(self) -> str:
        """Stable SHA-256 of the canonical JSON form (name excluded)."""
        data = self.to_dict()
        data.pop("name")
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# --------------------------------------------------------------------------
# validation


def _components(net: Network) -> list[list[int]]:
    idx = net.bus_index
    n = net.n_buses
    rows, cols = [], []
    for ln in net.lines:
        if ln.from_bus in idx and ln.to_bus in idx:
            rows.append(idx[ln.from_bus])
            cols.append(idx[ln.to_bus])
    adj = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    ncomp, labels = connected_components(adj, directed=False)
    ids = net.bus_ids
    return [sorted(ids[labels == k].tolist()) for k in range(ncomp)]


def validate_network(net: Network) -> list[Diagnostic]:
    """Check every Network invariant and return one diagnostic per violation.

    An empty list means the network is valid.
    """
    diags: list[Diagnostic] = []

    def err(loc, msg):
        diags.append(Diagnostic("error", loc, msg))

    ids = [b.id for b in net.buses]
    if not ids:
        err("buses", "network has no buses")
        return diags
    seen = set()
    for b in net.buses:
        if b.id in seen:
            err(f"bus {b.id}", "duplicate bus id")
        seen.add(b.id)
        if not (b.base_load >= 0 and math.isfinite(b.base_load)):
            err(f"bus {b.id}", f"base load must be finite and >= 0, got {b.base_load}")
    n_slack = sum(b.is_slack for b in net.buses)
    if n_slack != 1:
        err("buses", f"exactly one slack bus required, found {n_slack}")

    for k, ln in enumerate(net.lines, start=1):
        loc = f"line {k} ({ln.from_bus}-{ln.to_bus})"
        for end in (ln.from_bus, ln.to_bus):
            if end not in seen:
                err(loc, f"references unknown bus {end}")
        if ln.from_bus == ln.to_bus:
            err(loc, "from_bus equals to_bus")
        if not ln.reactance > 0:
            err(loc, f"reactance must be > 0, got {ln.reactance}")
        if not ln.flow_limit > 0:
            err(loc, f"flow limit must be > 0, got {ln.flow_limit}")

    for k, g in enumerate(net.generators, start=1):
        loc = f"generator {k} (bus {g.bus})"
        if g.bus not in seen:
            err(loc, f"references unknown bus {g.bus}")
        if not (0 <= g.p_min <= g.p_max):
            err(loc, f"requires 0 <= p_min <= p_max, got p_min={g.p_min}, p_max={g.p_max}")
        if not g.emission_rate >= 0:
            err(loc, f"emission rate must be >= 0, got {g.emission_rate}")
        if not g.cost.a >= 0:
            err(loc, f"quadratic cost coefficient must be >= 0 for convexity, got {g.cost.a}")

    if not net.lines:
        err("lines", "network has no lines; connected graph requirement violated")
    else:
        comps = _components(net)
        if len(comps) > 1:
            smallest = min(comps, key=len)
            err("lines", f"network is not a connected graph: {len(comps)} components, e.g. buses {smallest}")
    return diags


def _raise_if_invalid(net: Network):
    errors = [d for d in validate_network(net) if d.severity == "error"]
    if errors:
        raise CaseError("; ".join(str(d) for d in errors), errors)


# --------------------------------------------------------------------------
# native JSON


def _parse_native(text: str, name: str = "") -> Network:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseSyntaxError(exc.msg, exc.lineno, exc.colno) from None
    try:
        buses = [Bus(int(b["id"]), float(b.get("load_mw", 0.0)), bool(b.get("slack", False))) for b in data["buses"]]
        lines = []
        for ln in data.get("lines", []):
            limit = ln.get("limit_mw")
            lines.append(
                Line(int(ln["from"]), int(ln["to"]), float(ln["x_pu"]), math.inf if limit is None else float(limit))
            )
        gens = []
        for g in data.get("generators", []):
            cost = g.get("cost", {})
            gens.append(
                Generator(
                    int(g["bus"]),
                    float(g["pmin_mw"]),
                    float(g["pmax_mw"]),
                    float(g.get("gamma_lbs_per_mwh", 0.0)),
                    CostModel(float(cost.get("a", 0.0)), float(cost.get("b", 0.0)), float(cost.get("c", 0.0))),
                )
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise CaseError(f"malformed native case: {exc!r}") from None
    return Network(buses, lines, gens, float(data.get("base_mva", 100.0)), data.get("name", name))


def dump_case(net: Network) -> str:
    """Serialise to the native JSON schema (inverse of ``parse_case``)."""
    return json.dumps(net.to_dict(), indent=1)


# --------------------------------------------------------------------------
# MATPOWER subset

_ASSIGN = re.compile(r"mpc\.(\w+)\s*=\s*")
_NUMBER = re.compile(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?|[-+]?Inf|NaN")
_KNOWN_TABLES = {"bus", "gen", "branch", "gencost", "gen_emission"}


class _MatpowerReader:
    """Tokenises the matrix-literal subset of a MATPOWER case file."""

    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.fields: dict[str, object] = {}

    def where(self, pos=None):
        pos = self.pos if pos is None else pos
        line = self.text.count("\n", 0, pos) + 1
        col = pos - (self.text.rfind("\n", 0, pos) + 1) + 1
        return line, col

    def fail(self, msg, pos=None):
        raise CaseSyntaxError(msg, *self.where(pos))

    def skip_space(self, newlines=True):
        text = self.text
        while self.pos < len(text):
            ch = text[self.pos]
            if ch == "%":
                end = text.find("\n", self.pos)
                self.pos = len(text) if end < 0 else end
            elif ch == "." and text.startswith("...", self.pos):
                end = text.find("\n", self.pos)
                self.pos = len(text) if end < 0 else end + 1
            elif ch in " \t\r" or (newlines and ch == "\n"):
                self.pos += 1
            else:
                break

    def parse(self) -> dict[str, object]:
        text = self.text
        while True:
            self.skip_space()
            if self.pos >= len(text):
                break
            if text.startswith("function", self.pos):
                end = text.find("\n", self.pos)
                header = text[self.pos : len(text) if end < 0 else end]
                if not re.fullmatch(r"function\s+mpc\s*=\s*\w+\s*", header.split("%")[0]):
                    self.fail("unsupported function header")
                self.pos = len(text) if end < 0 else end
                continue
            m = _ASSIGN.match(text, self.pos)
            if not m:
                self.fail("expected 'mpc.<field> = ...' statement")
            name = m.group(1)
            self.pos = m.end()
            self.fields[name] = self.value(name)
            self.skip_space(newlines=False)
            if self.pos < len(text) and text[self.pos] == ";":
                self.pos += 1
            self.skip_space(newlines=False)
            if self.pos < len(text) and text[self.pos] not in "\n":
                self.fail(f"unexpected trailing content after mpc.{name}")
        return self.fields

    def value(self, name):
        text = self.text
        ch = text[self.pos : self.pos + 1]
        if ch == "[":
            return self.matrix()
        if ch == "{":
            return self.cell()
        if ch == "'":
            end = text.find("'", self.pos + 1)
            if end < 0:
                self.fail("unterminated string")
            val = text[self.pos + 1 : end]
            self.pos = end + 1
            return val
        m = _NUMBER.match(text, self.pos)
        if m:
            self.pos = m.end()
            return float(m.group(0).replace("Inf", "inf"))
        self.fail(f"unsupported expression for mpc.{name}; only matrix literals, numbers and strings are allowed")

    def matrix(self):
        start = self.pos
        self.pos += 1
        rows, row = [], []
        text = self.text
        while True:
            self.skip_space(newlines=False)
            if self.pos >= len(text):
                self.fail("unterminated matrix literal", start)
            ch = text[self.pos]
            if ch == "]":
                self.pos += 1
                if row:
                    rows.append(row)
                break
            if ch in ";\n":
                self.pos += 1
                if row:
                    rows.append(row)
                    row = []
                continue
            if ch == ",":
                self.pos += 1
                continue
            m = _NUMBER.match(text, self.pos)
            if not m:
                self.fail(f"unsupported token {text[self.pos]!r} in matrix literal")
            row.append(float(m.group(0).replace("Inf", "inf")))
            self.pos = m.end()
        widths = {len(r) for r in rows}
        if len(widths) > 1:
            self.fail("matrix rows have inconsistent lengths", start)
        return rows

    def cell(self):
        start = self.pos
        end = self.text.find("}", self.pos)
        if end < 0:
            self.fail("unterminated cell array", start)
        body = self.text[self.pos + 1 : end]
        # only cell arrays of quoted strings, e.g. mpc.bus_name
        stripped = re.sub(r"%[^\n]*", "", body)
        stripped = re.sub(r"'[^'\n]*'", "", stripped)
        if stripped.replace(";", "").replace(",", "").strip():
            self.fail("only cell arrays of strings are supported", start)
        self.pos = end + 1
        return re.findall(r"'([^'\n]*)'", re.sub(r"%[^\n]*", "", body))


def _gencost_row(row, k) -> CostModel:
    model = int(row[0])
    if model != 2:
        raise CaseError(f"gencost row {k}: only polynomial cost model 2 is supported, got {model}")
    n = int(row[3])
    coeffs = list(row[4 : 4 + n])
    if len(coeffs) != n:
        raise CaseError(f"gencost row {k}: declares {n} coefficients but has {len(coeffs)}")
    if n > 3:
        if any(abs(c) > 0 for c in coeffs[: n - 3]):
            raise CaseError(f"gencost row {k}: polynomial degree above 2 is not supported")
        coeffs = coeffs[n - 3 :]
    coeffs = [0.0] * (3 - len(coeffs)) + coeffs
    return CostModel(*coeffs)


def _parse_matpower(text: str, emissions: dict | None = None, name: str = "") -> Network:
    fields = _MatpowerReader(text).parse()
    for key in ("bus", "gen", "branch"):
        if key not in fields:
            raise CaseError(f"MATPOWER case lacks mpc.{key}")
    for key in fields:
        if key not in _KNOWN_TABLES and key not in ("baseMVA", "version"):
            logger.warning("ignoring unsupported field mpc.%s", key)
    base_mva = float(fields.get("baseMVA", 100.0))

    buses = []
    for k, row in enumerate(fields["bus"], start=1):
        if len(row) < 4:
            raise CaseError(f"bus row {k} has too few columns")
        if len(row) > 5 and (row[4] or row[5]):
            logger.warning("bus %d: shunt values ignored in DC model", int(row[0]))
        buses.append(Bus(int(row[0]), float(row[2]), int(row[1]) == 3))

    lines = []
    ignored_r = False
    for k, row in enumerate(fields["branch"], start=1):
        if len(row) < 6:
            raise CaseError(f"branch row {k} has too few columns")
        if len(row) > 10 and row[10] == 0:
            continue
        ratio = row[8] if len(row) > 8 and row[8] != 0 else 1.0
        if len(row) > 9 and row[9] != 0:
            logger.warning("branch %d: phase shift %.3g ignored", k, row[9])
        ignored_r = ignored_r or row[2] != 0
        limit = row[5] if row[5] > 0 else math.inf
        lines.append(Line(int(row[0]), int(row[1]), float(row[3]) * ratio, float(limit)))
    if ignored_r:
        logger.warning("branch resistances and charging ignored in DC model")

    costs = fields.get("gencost", [])
    gen_rows = fields["gen"]
    if costs and len(costs) < len(gen_rows):
        raise CaseError(f"gencost has {len(costs)} rows for {len(gen_rows)} generators")
    gamma = [0.0] * len(gen_rows)
    if "gen_emission" in fields:
        flat = [v for r in fields["gen_emission"] for v in r]
        if len(flat) != len(gen_rows):
            raise CaseError("mpc.gen_emission must have one entry per generator")
        gamma = flat
    if emissions is not None:
        for key, val in emissions.items():
            k = int(key)
            if not 1 <= k <= len(gen_rows):
                raise CaseError(f"emission sidecar refers to generator {k}, case has {len(gen_rows)}")
            gamma[k - 1] = float(val)
    elif "gen_emission" not in fields:
        logger.warning("no emission rates supplied; all generator emission rates set to 0")

    gens = []
    for k, row in enumerate(gen_rows, start=1):
        if len(row) < 10:
            raise CaseError(f"gen row {k} has too few columns")
        if row[7] <= 0:
            continue
        cost = _gencost_row(costs[k - 1], k) if costs else CostModel()
        gens.append(Generator(int(row[0]), float(row[9]), float(row[8]), float(gamma[k - 1]), cost))
    return Network(buses, lines, gens, base_mva, name)


# --------------------------------------------------------------------------
# public entry points


def parse_case(
    text: str,
    format: Literal["native_json", "matpower_m"] = "native_json",
    *,
    emissions: dict | None = None,
    slack_bus: int | None = None,
    name: str = "",
) -> Network:
    """Parse case text into a validated :class:`Network`.

    Parameters
    ----------
    text : str
        Case file contents.
    format : {"native_json", "matpower_m"}
        Input format.
    emissions : dict, optional
        Mapping of 1-based generator row number to emission rate in lbs/MWh
        (MATPOWER only; content of a ``.emissions.json`` sidecar).
    slack_bus : int, optional
        Override the slack designation found in the file.

    Raises
    ------
    CaseSyntaxError
        Malformed text, with line and column.
    CaseError
        Any Network invariant is violated.
    """
    if format == "native_json":
        net = _parse_native(text, name)
    elif format == "matpower_m":
        net = _parse_matpower(text, emissions, name)
    else:
        raise ValueError(f"unknown case format {format!r}")
    if slack_bus is not None:
        net = net.with_slack(slack_bus)
    _raise_if_invalid(net)
    return net


def _sidecar_rates(path: Path) -> dict | None:
    side = path.with_name(path.stem + ".emissions.json")
    if not side.exists():
        return None
    data = json.loads(side.read_text())
    return data.get("gamma_lbs_per_mwh", data)


def guess_format(path) -> str:
    return "matpower_m" if str(path).endswith(".m") else "native_json"


def load_case(path, format: str | None = None, *, slack_bus: int | None = None) -> Network:
    """Read a case from disk, picking up a MATPOWER emissions sidecar if present.

    ``path`` may also be the name of a bundled case (see ``BUILTIN_CASES``).
    """
    if str(path) in BUILTIN_CASES:
        return load_builtin(str(path), slack_bus=slack_bus)
    path = Path(path)
    fmt = format or guess_format(path)
    emissions = _sidecar_rates(path) if fmt == "matpower_m" else None
    return parse_case(path.read_text(), fmt, emissions=emissions, slack_bus=slack_bus, name=path.stem)


def load_builtin(name: str, *, slack_bus: int | None = None) -> Network:
    """Load one of the bundled test systems by name."""
    if name not in BUILTIN_CASES:
        raise CaseError(f"unknown bundled case {name!r}; choose from {', '.join(BUILTIN_CASES)}")
    root = resources.files("carbontrace") / "cases"
    native = root / f"{name}.json"
    if native.is_file():
        return parse_case(native.read_text(), "native_json", slack_bus=slack_bus, name=name)
    text = (root / f"{name}.m").read_text()
    side = root / f"{name}.emissions.json"
    emissions = None
    if side.is_file():
        data = json.loads(side.read_text())
        emissions = data.get("gamma_lbs_per_mwh", data)
    return parse_case(text, "matpower_m", emissions=emissions, slack_bus=slack_bus, name=name)


def tons_to_lbs(tons: float) -> float:
    return float(tons) * LBS_PER_TON


def lbs_to_tons(lbs: float) -> float:
    return float(lbs) / LBS_PER_TON


def parse_mass(text: str) -> float:
    """Parse an emission quantity such as ``"95ton"`` or ``"190000lbs"`` into lbs."""
    m = re.fullmatch(r"\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?|inf)\s*(lbs?|tons?)?\s*", str(text), re.I)
    if not m:
        raise ValueError(f"cannot parse emission quantity {text!r}; use e.g. '95ton' or '190000lbs'")
    value = float(m.group(1))
    unit = (m.group(2) or "lbs").lower()
    return value * LBS_PER_TON if unit.startswith("ton") else value


def as_float_array(values: Iterable[float] | Sequence[float], length: int, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.shape != (length,):
        raise ValueError(f"{what} must have shape ({length},), got {arr.shape}")
    return arr
