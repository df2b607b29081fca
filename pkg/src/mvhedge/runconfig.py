"""Flat INI run configuration and the small coefficient expression grammar.

Sections: [model] (coefficients, correlation, horizon, payoff, capital),
[solver] (tree depth, tolerances, mesh geometry, h_tilde sign convention),
[mc] (paths, steps, seed), [output] (directory, formats). Coefficients are
arithmetic expressions in t and x (constants and deterministic curves are
just expressions that ignore x); the grammar admits +, -, *, /, **, parentheses,
numbers, t, x, pi, e and the functions sin, cos, tan, exp, log, sqrt, tanh, abs.
"""

from __future__ import annotations

import ast
import configparser
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .model import DiffusionSpec, PayoffSpec, make_payoff

_FUNCS = {"sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp,
          "log": np.log, "sqrt": np.sqrt, "tanh": np.tanh, "abs": np.abs}
_CONSTS = {"pi": np.pi, "e": np.e}
_BINOPS = {ast.Add: np.add, ast.Sub: np.subtract, ast.Mult: np.multiply,
           ast.Div: np.divide, ast.Pow: np.power, ast.Mod: np.mod}
_UNOPS = {ast.UAdd: lambda v: v, ast.USub: np.negative}


@dataclass
class Expression:
    """Compiled coefficient expression; callable as f(t, x)."""

    source: str
    uses_x: bool = False
    uses_t: bool = False
    _fn: object = None

    def __call__(self, t, x):
        out = self._fn(t, np.asarray(x, dtype=float))
        return np.broadcast_to(np.asarray(out, dtype=float),
                               np.broadcast(np.asarray(t), np.asarray(x)).shape).copy()

    @property
    def is_constant(self) -> bool:
        return not (self.uses_x or self.uses_t)

    @property
    def is_deterministic(self) -> bool:
        return not self.uses_x


def parse_expression(source: str, where: str = "expression") -> Expression:
    """Compile the restricted arithmetic grammar to a numpy callable."""
    try:
        tree = ast.parse(source, mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"{where}: cannot parse {source!r}: {exc.msg}") from None
    names = set()

    def build(node):
        if isinstance(node, ast.Expression):
            return build(node.body)
        if isinstance(node, ast.Constant):
            if not isinstance(node.value, (int, float)):
                raise ConfigError(f"{where}: non-numeric constant {node.value!r}")
            v = float(node.value)
            return lambda t, x: v
        if isinstance(node, ast.Name):
            if node.id in ("t", "x"):
                names.add(node.id)
                return (lambda t, x: t) if node.id == "t" else (lambda t, x: x)
            if node.id in _CONSTS:
                v = _CONSTS[node.id]
                return lambda t, x: v
            raise ConfigError(f"{where}: unknown name {node.id!r}")
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            op = _BINOPS[type(node.op)]
            lhs, rhs = build(node.left), build(node.right)
            return lambda t, x: op(lhs(t, x), rhs(t, x))
        if isinstance(node, ast.UnaryOp) and type(node.op) in _UNOPS:
            op = _UNOPS[type(node.op)]
            arg = build(node.operand)
            return lambda t, x: op(arg(t, x))
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name):
            if node.func.id not in _FUNCS or node.keywords or len(node.args) != 1:
                raise ConfigError(f"{where}: unsupported call {ast.dump(node)[:60]}")
            fn = _FUNCS[node.func.id]
            arg = build(node.args[0])
            return lambda t, x: fn(arg(t, x))
        raise ConfigError(f"{where}: unsupported syntax {type(node).__name__}")

    fn = build(tree)
    return Expression(source=source, uses_x="x" in names, uses_t="t" in names, _fn=fn)


@dataclass
class RunConfig:
    """Validated run parameters; build_spec() yields the market model."""

    theta: Expression
    sigma: Expression
    rho: float
    horizon: float
    payoff_kind: str
    payoff_family: str
    payoff_a: float
    payoff_b: float
    payoff_strike: float
    initial_capital: float
    lattice_steps: int
    tolerance: float
    max_iter: int            # 0 means the solver default (10 * dim)
    newton_tol: float
    h_tilde_sign: str
    pde_nx: int
    pde_nt: int
    pde_xmin: float
    pde_xmax: float
    n_paths: int
    n_steps: int
    seed: int
    out_dir: str
    formats: tuple = ("csv", "json")

    def build_payoff(self) -> PayoffSpec:
        return make_payoff(self.payoff_kind, self.payoff_family,
                           a=self.payoff_a, b=self.payoff_b,
                           strike=self.payoff_strike)

    def build_spec(self) -> DiffusionSpec:
        return DiffusionSpec(theta=self.theta, sigma=self.sigma, rho=self.rho,
                             horizon=self.horizon, payoff=self.build_payoff(),
                             initial_capital=self.initial_capital)


_DEFAULTS = {
    ("model", "theta"): "1.0",
    ("model", "sigma"): "1.0",
    ("model", "rho"): "0.0",
    ("model", "horizon"): "1.0",
    ("model", "payoff_kind"): "constant",
    ("model", "payoff_family"): "linear",
    ("model", "payoff_a"): "1.0",
    ("model", "payoff_b"): "1.0",
    ("model", "payoff_strike"): "0.0",
    ("model", "initial_capital"): "0.0",
    ("solver", "lattice_steps"): "8",
    ("solver", "tolerance"): "1e-10",
    ("solver", "max_iter"): "0",
    ("solver", "newton_tol"): "1e-12",
    ("solver", "h_tilde_sign"): "section3",
    ("solver", "pde_nx"): "401",
    ("solver", "pde_nt"): "400",
    ("solver", "pde_xmin"): "-6.0",
    ("solver", "pde_xmax"): "6.0",
    ("mc", "n_paths"): "100000",
    ("mc", "n_steps"): "256",
    ("mc", "seed"): "20240807",
    ("output", "directory"): "out",
    ("output", "formats"): "csv,json",
}


def _get(cp, section, key):
    if cp.has_option(section, key):
        return cp.get(section, key)
    return _DEFAULTS[(section, key)]


def _number(cp, section, key, conv, check=None, describe=""):
    raw = _get(cp, section, key)
    try:
        value = conv(raw)
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r}") from None
    if check is not None and not check(value):
        raise ConfigError(f"{section}.{key}: {value!r} invalid ({describe})")
    return value


def load_config(path) -> RunConfig:
    """Parse and validate an INI run configuration file."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    read = cp.read(path)
    if not read:
        raise ConfigError(f"config file {path!r} not found or unreadable")
    for section in cp.sections():
        if section not in ("model", "solver", "mc", "output"):
            raise ConfigError(f"unknown config section [{section}]")
        for key in cp.options(section):
            if (section, key) not in _DEFAULTS:
                raise ConfigError(f"{section}.{key}: unknown option")

    theta = parse_expression(_get(cp, "model", "theta"), "model.theta")
    sigma = parse_expression(_get(cp, "model", "sigma"), "model.sigma")
    rho = _number(cp, "model", "rho", float,
                  lambda v: v ** 2 < 1.0, "needs rho**2 < 1, the strict information gap")
    horizon = _number(cp, "model", "horizon", float, lambda v: v > 0, "needs > 0")
    payoff_kind = _get(cp, "model", "payoff_kind")
    if payoff_kind not in ("constant", "observable", "hidden"):
        raise ConfigError(f"model.payoff_kind: unknown kind {payoff_kind!r}")
    payoff_family = _get(cp, "model", "payoff_family")
    if payoff_family not in ("linear", "square", "call", "put"):
        raise ConfigError(f"model.payoff_family: unknown family {payoff_family!r}")

    cfg = RunConfig(
        theta=theta, sigma=sigma, rho=rho, horizon=horizon,
        payoff_kind=payoff_kind, payoff_family=payoff_family,
        payoff_a=_number(cp, "model", "payoff_a", float),
        payoff_b=_number(cp, "model", "payoff_b", float),
        payoff_strike=_number(cp, "model", "payoff_strike", float),
        initial_capital=_number(cp, "model", "initial_capital", float),
        lattice_steps=_number(cp, "solver", "lattice_steps", int,
                              lambda v: v >= 1, "needs >= 1"),
        tolerance=_number(cp, "solver", "tolerance", float,
                          lambda v: v > 0, "needs > 0"),
        max_iter=_number(cp, "solver", "max_iter", int,
                         lambda v: v >= 0, "needs >= 0"),
        newton_tol=_number(cp, "solver", "newton_tol", float,
                           lambda v: v > 0, "needs > 0"),
        h_tilde_sign=_get(cp, "solver", "h_tilde_sign"),
        pde_nx=_number(cp, "solver", "pde_nx", int, lambda v: v >= 3, "needs >= 3"),
        pde_nt=_number(cp, "solver", "pde_nt", int, lambda v: v >= 2, "needs >= 2"),
        pde_xmin=_number(cp, "solver", "pde_xmin", float),
        pde_xmax=_number(cp, "solver", "pde_xmax", float),
        n_paths=_number(cp, "mc", "n_paths", int, lambda v: v >= 1, "needs >= 1"),
        n_steps=_number(cp, "mc", "n_steps", int, lambda v: v >= 1, "needs >= 1"),
        seed=_number(cp, "mc", "seed", int),
        out_dir=_get(cp, "output", "directory"),
        formats=tuple(f.strip() for f in _get(cp, "output", "formats").split(",")),
    )
    if cfg.h_tilde_sign not in ("section3", "section1"):
        raise ConfigError(f"solver.h_tilde_sign: {cfg.h_tilde_sign!r} is not "
                          "'section3' (primary) or 'section1' (flipped legacy)")
    if cfg.pde_xmax <= cfg.pde_xmin:
        raise ConfigError("solver.pde_xmax: must exceed solver.pde_xmin")
    for f in cfg.formats:
        if f not in ("csv", "json"):
            raise ConfigError(f"output.formats: unknown format {f!r}")
    return cfg
