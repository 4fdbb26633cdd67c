"""SPICE-subset netlist parser and circuit validation.

Strict grammar: R/C/L/V/I/D/M elements, .tran/.end directives, * and ;
comments, + continuations, engineering suffixes. Anything else is a hard
error.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field


class ParseError(ValueError):
    def __init__(self, msg, line=None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


class UnknownDevice(ParseError):
    pass


class InvalidParam(ParseError):
    pass


_SUFFIXES = [
    ("meg", 1e6),
    ("f", 1e-15), ("p", 1e-12), ("n", 1e-9), ("u", 1e-6), ("m", 1e-3),
    ("k", 1e3), ("g", 1e9), ("t", 1e12),
]


def parse_value(tok, line=None):
    """Number with optional engineering suffix (trailing unit letters ignored)."""
    t = tok.strip().lower()
    m = re.match(r"^([+-]?(?:\d+\.?\d*|\.\d+)(?:e[+-]?\d+)?)([a-z]*)$", t)
    if not m:
        raise InvalidParam(f"bad numeric value {tok!r}", line)
    num, suffix = float(m.group(1)), m.group(2)
    if suffix.startswith("meg"):
        return num * 1e6
    if suffix:
        for s, mult in _SUFFIXES:
            if suffix.startswith(s):
                return num * mult
        # plain unit like "V" or "s"
        if suffix.isalpha() and not suffix[0] in "fpnumkgt":
            return num
        raise InvalidParam(f"bad numeric value {tok!r}", line)
    return num


@dataclass(frozen=True)
class SourceSpec:
    kind: str  # DC | SIN | PULSE | PWL
    params: tuple

    def __call__(self, t):
        """Value at time t (scalar or ndarray)."""
        import numpy as np

        p = self.params
        if self.kind == "DC":
            return p[0] * np.ones_like(np.asarray(t, dtype=float))
        if self.kind == "SIN":
            voff, vamp, freq = p[0], p[1], p[2]
            return voff + vamp * np.sin(2 * math.pi * freq * np.asarray(t, dtype=float))
        if self.kind == "PULSE":
            v1, v2, tdelay, trise, tfall, twidth, tperiod = p
            tt = np.mod(np.asarray(t, dtype=float) - tdelay, tperiod)
            tt = np.where(np.asarray(t) < tdelay, -1.0, tt)
            xs = [0.0, trise, trise + twidth, trise + twidth + tfall, tperiod]
            ys = [v1, v2, v2, v1, v1]
            return np.where(tt < 0, v1, np.interp(tt, xs, ys))
        if self.kind == "PWL":
            xs = np.array(p[0::2])
            ys = np.array(p[1::2])
            return np.interp(np.asarray(t, dtype=float), xs, ys)
        raise ValueError(f"unknown source kind {self.kind}")

    def corner_times(self, tstop):
        """Discontinuity / corner times in [0, tstop] (for step forcing)."""
        out = []
        p = self.params
        if self.kind == "PULSE":
            v1, v2, tdelay, trise, tfall, twidth, tperiod = p
            t = tdelay
            while t <= tstop:
                for c in (0.0, trise, trise + twidth, trise + twidth + tfall):
                    if 0 <= t + c <= tstop:
                        out.append(t + c)
                t += tperiod
        elif self.kind == "PWL":
            out = [x for x in p[0::2] if 0 <= x <= tstop]
        return out


_TERMINALS = {"R": 2, "C": 2, "L": 2, "V": 2, "I": 2, "D": 2, "M": 3}


@dataclass(frozen=True)
class Device:
    kind: str  # R C L V I D MOS
    name: str
    terminals: tuple
    params: dict = field(default_factory=dict)
    source_spec: SourceSpec | None = None


@dataclass(frozen=True)
class Analysis:
    kind: str  # tran
    params: tuple


@dataclass(frozen=True)
class Circuit:
    title: str
    devices: tuple
    analyses: tuple

    @property
    def nodes(self):
        out = {"0"}
        for d in self.devices:
            out.update(d.terminals)
        return out


_MOS_DEFAULTS = {"KP": 2e-5, "VT0": 1.0, "LAMBDA": 0.0, "W": 1e-5, "L": 1e-5,
                 "CGS": 0.0, "CGD": 0.0}
_DIODE_DEFAULTS = {"IS": 1e-14, "N": 1.0}


def _logical_lines(text):
    """Strip comments, join + continuations; yields (lineno, line)."""
    raw = []
    for i, line in enumerate(text.splitlines(), start=1):
        line = line.split(";")[0]
        if line.strip().startswith("*"):
            line = ""
        raw.append((i, line.rstrip()))
    joined = []
    for i, line in raw:
        if not line.strip():
            continue
        if line.lstrip().startswith("+"):
            if not joined:
                raise ParseError("continuation with nothing to continue", i)
            pno, prev = joined[-1]
            joined[-1] = (pno, prev + " " + line.lstrip()[1:])
        else:
            joined.append((i, line))
    return joined


def _parse_source(tokens, lineno):
    """DC v | SIN(...) | PULSE(...) | PWL(...) from the remaining tokens."""
    text = " ".join(tokens)
    m = re.match(r"^(?i:(SIN|PULSE|PWL))\s*\(([^)]*)\)\s*$", text.strip())
    if m:
        kind = m.group(1).upper()
        vals = tuple(parse_value(v, lineno) for v in m.group(2).replace(",", " ").split())
        if kind == "SIN" and len(vals) != 3:
            raise InvalidParam("SIN needs (voff vamp freq)", lineno)
        if kind == "PULSE" and len(vals) != 7:
            raise InvalidParam("PULSE needs (v1 v2 tdelay trise tfall twidth tperiod)", lineno)
        if kind == "PWL" and (len(vals) < 4 or len(vals) % 2):
            raise InvalidParam("PWL needs t/v pairs", lineno)
        if kind == "PWL":
            ts = vals[0::2]
            if any(b <= a for a, b in zip(ts, ts[1:])):
                raise InvalidParam("PWL times must increase", lineno)
        return SourceSpec(kind, vals)
    toks = text.split()
    if toks and toks[0].upper() == "DC":
        toks = toks[1:]
    if len(toks) != 1:
        raise InvalidParam(f"bad source specification {text!r}", lineno)
    return SourceSpec("DC", (parse_value(toks[0], lineno),))


def _parse_kv(tokens, lineno):
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise InvalidParam(f"expected NAME=value, got {tok!r}", lineno)
        k, v = tok.split("=", 1)
        out[k.upper()] = v
    return out


def parse(text: str) -> Circuit:
    devices = []
    analyses = []
    title = ""
    for lineno, line in _logical_lines(text):
        tokens = line.split()
        head = tokens[0]
        if head.startswith("."):
            directive = head.lower()
            if directive == ".tran":
                if len(tokens) < 2:
                    raise ParseError(".tran needs a stop time", lineno)
                vals = tuple(parse_value(v, lineno) for v in tokens[1:3])
                if vals[0] <= 0:
                    raise InvalidParam(".tran stop time must be positive", lineno)
                analyses.append(Analysis("tran", vals))
            elif directive == ".end":
                break
            elif directive == ".title":
                title = " ".join(tokens[1:])
            else:
                raise ParseError(f"unsupported directive {head}", lineno)
            continue
        letter = head[0].upper()
        if letter not in _TERMINALS:
            raise UnknownDevice(f"unknown device letter {head[0]!r}", lineno)
        nterm = _TERMINALS[letter]
        if len(tokens) < 1 + nterm:
            raise ParseError(f"{head}: expected {nterm} terminals", lineno)
        terms = tuple(tokens[1:1 + nterm])
        for t in terms:
            if not re.match(r"^\w+$", t):
                raise ParseError(f"bad node name {t!r}", lineno)
        rest = tokens[1 + nterm:]
        if letter in "RCL":
            if len(rest) != 1:
                raise ParseError(f"{head}: expected a single value", lineno)
            val = parse_value(rest[0], lineno)
            if letter == "R" and val == 0:
                raise InvalidParam(f"{head}: resistance must be nonzero", lineno)
            if letter in "CL" and val <= 0:
                raise InvalidParam(f"{head}: value must be positive", lineno)
            devices.append(Device(letter, head, terms, {"value": val}))
        elif letter in "VI":
            spec = _parse_source(rest, lineno)
            devices.append(Device(letter, head, terms, {}, spec))
        elif letter == "D":
            kv = _parse_kv(rest, lineno)
            params = dict(_DIODE_DEFAULTS)
            for k, v in kv.items():
                if k not in params:
                    raise InvalidParam(f"{head}: unknown diode parameter {k}", lineno)
                params[k] = parse_value(v, lineno)
            if params["IS"] <= 0 or params["N"] <= 0:
                raise InvalidParam(f"{head}: IS and N must be positive", lineno)
            devices.append(Device("D", head, terms, params))
        elif letter == "M":
            kv = _parse_kv(rest, lineno)
            if kv.get("TYPE", "").upper() not in ("NMOS", "PMOS"):
                raise InvalidParam(f"{head}: TYPE=(NMOS|PMOS) required", lineno)
            params = dict(_MOS_DEFAULTS)
            params["TYPE"] = kv.pop("TYPE").upper()
            for k, v in kv.items():
                if k not in _MOS_DEFAULTS:
                    raise InvalidParam(f"{head}: unknown MOS parameter {k}", lineno)
                params[k] = parse_value(v, lineno)
            if params["KP"] <= 0 or params["W"] <= 0 or params["L"] <= 0:
                raise InvalidParam(f"{head}: KP, W, L must be positive", lineno)
            if params["CGS"] < 0 or params["CGD"] < 0:
                raise InvalidParam(f"{head}: capacitances must be >= 0", lineno)
            devices.append(Device("MOS", head, terms, params))
    return Circuit(title, tuple(devices), tuple(analyses))


def serialize(c: Circuit) -> str:
    lines = []
    if c.title:
        lines.append(f".title {c.title}")
    for d in c.devices:
        terms = " ".join(d.terminals)
        if d.kind in "RCL":
            lines.append(f"{d.name} {terms} {d.params['value']:.17g}")
        elif d.kind in "VI":
            s = d.source_spec
            if s.kind == "DC":
                lines.append(f"{d.name} {terms} DC {s.params[0]:.17g}")
            else:
                vals = " ".join(f"{v:.17g}" for v in s.params)
                lines.append(f"{d.name} {terms} {s.kind}({vals})")
        elif d.kind == "D":
            kv = " ".join(f"{k}={v:.17g}" for k, v in d.params.items())
            lines.append(f"{d.name} {terms} {kv}")
        elif d.kind == "MOS":
            kv = " ".join(
                f"{k}={v}" if k == "TYPE" else f"{k}={v:.17g}"
                for k, v in d.params.items()
            )
            lines.append(f"{d.name} {terms} {kv}")
    for a in c.analyses:
        lines.append(".tran " + " ".join(f"{v:.17g}" for v in a.params))
    lines.append(".end")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Diagnostic:
    kind: str  # FloatingNode | VoltageLoop | MissingAnalysis | NoSource
    message: str


def validate(c: Circuit):
    """Empty list when runnable, otherwise diagnostics. Never raises."""
    diags = []
    nodes = c.nodes
    # DC path to ground: union-find over DC-conducting branches
    parent = {n: n for n in nodes}

    def find(n):
        while parent[n] != n:
            parent[n] = parent[parent[n]]
            n = parent[n]
        return n

    def union(a, b):
        parent[find(a)] = find(b)

    for d in c.devices:
        if d.kind in ("R", "L", "V", "D"):
            union(d.terminals[0], d.terminals[1])
        elif d.kind == "MOS":
            union(d.terminals[0], d.terminals[2])  # channel
    ground = find("0")
    for n in sorted(nodes):
        if find(n) != ground:
            diags.append(Diagnostic("FloatingNode", f"node {n} has no DC path to ground"))
    # loops of ideal voltage sources: a V edge closing an existing V path
    vparent = {n: n for n in nodes}

    def vfind(n):
        while vparent[n] != n:
            vparent[n] = vparent[vparent[n]]
            n = vparent[n]
        return n

    for d in c.devices:
        if d.kind == "V":
            a, b = vfind(d.terminals[0]), vfind(d.terminals[1])
            if a == b:
                diags.append(Diagnostic("VoltageLoop", f"{d.name} closes a voltage source loop"))
            else:
                vparent[a] = b
    if not any(d.kind in "VI" for d in c.devices):
        diags.append(Diagnostic("NoSource", "no independent source"))
    if not c.analyses:
        diags.append(Diagnostic("MissingAnalysis", "no .tran directive"))
    return diags
