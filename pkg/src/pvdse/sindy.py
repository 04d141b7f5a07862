"""Candidate-function libraries, STLS and feature-selection sparse regression.

Library variables are the concatenation ``z = [x, u]``; variable ``i`` is
``x{i+1}`` for ``i < n`` and ``u{i-n+1}`` otherwise. A fitted model evaluates
``xdot^T = theta(x, u) @ Xi``.
"""
from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from . import pv_models as pm
from .errors import IdentificationError, InvalidInputError, SingularityError

TERM_KINDS = ("const", "lin", "poly2", "poly3", "sin", "rational")
_ARITY = {"const": 0, "lin": 1, "poly2": 2, "poly3": 3, "sin": 1, "rational": 3}

# relative singular-value cutoff for the least-squares solves
RANK_RTOL = 1e-10


@dataclass(frozen=True)
class Term:
    kind: str
    vars: tuple = ()

    def __post_init__(self):
        if self.kind not in TERM_KINDS:
            raise InvalidInputError(f"unknown term kind {self.kind!r}")
        if len(self.vars) != _ARITY[self.kind]:
            raise InvalidInputError(f"{self.kind} term takes {_ARITY[self.kind]} variables, got {self.vars}")
        object.__setattr__(self, "vars", tuple(int(v) for v in self.vars))

    def name(self, names) -> str:
        v = [names[i] for i in self.vars]
        if self.kind == "const":
            return "1"
        if self.kind in ("lin", "poly2", "poly3"):
            return " ".join(v)
        if self.kind == "sin":
            return f"sin({v[0]})"
        return f"{v[0]} {v[1]}/{v[2]}"

    def to_list(self) -> list:
        return [self.kind, *self.vars]

    @classmethod
    def from_list(cls, item) -> "Term":
        return cls(item[0], tuple(item[1:]))


def variable_names(n_states: int, n_inputs: int) -> list[str]:
    return [f"x{i + 1}" for i in range(n_states)] + [f"u{i + 1}" for i in range(n_inputs)]


class LibrarySpec:
    """Ordered, duplicate-free list of candidate terms over ``z = [x, u]``."""

    def __init__(self, terms, n_states: int, n_inputs: int, floor: float = pm.VDC_FLOOR):
        self.terms = tuple(terms)
        self.n_states = int(n_states)
        self.n_inputs = int(n_inputs)
        self.floor = float(floor)
        n_vars = self.n_states + self.n_inputs
        keys = [self._key(t) for t in self.terms]
        if len(set(keys)) != len(keys):
            raise InvalidInputError("library terms must be unique")
        for t in self.terms:
            if any(not 0 <= v < n_vars for v in t.vars):
                raise InvalidInputError(f"term {t} refers to a variable outside 0..{n_vars - 1}")
        self._compile()

    @staticmethod
    def _key(t: Term):
        if t.kind in ("const", "lin", "poly2", "poly3"):
            return ("mono", tuple(sorted(t.vars)))
        if t.kind == "rational":
            return ("rational", tuple(sorted(t.vars[:2])), t.vars[2])
        return (t.kind, t.vars)

    def _compile(self):
        one = self.n_states + self.n_inputs  # index of an appended column of ones
        mono_pos, mono_idx, sin_pos, sin_idx, rat_pos, rat_idx = [], [], [], [], [], []
        for pos, t in enumerate(self.terms):
            if t.kind in ("const", "lin", "poly2", "poly3"):
                mono_pos.append(pos)
                mono_idx.append(list(t.vars) + [one] * (3 - len(t.vars)))
            elif t.kind == "sin":
                sin_pos.append(pos)
                sin_idx.append(t.vars[0])
            else:
                rat_pos.append(pos)
                rat_idx.append(t.vars)
        self._mono_pos = np.array(mono_pos, dtype=int)
        self._mono_idx = np.array(mono_idx, dtype=int).reshape(-1, 3)
        self._sin_pos = np.array(sin_pos, dtype=int)
        self._sin_idx = np.array(sin_idx, dtype=int)
        self._rat_pos = np.array(rat_pos, dtype=int)
        self._rat_idx = np.array(rat_idx, dtype=int).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.terms)

    @property
    def names(self) -> list[str]:
        vn = variable_names(self.n_states, self.n_inputs)
        return [t.name(vn) for t in self.terms]

    def evaluate(self, x, u) -> np.ndarray:
        """Library rows for states ``x[..., n]`` and inputs ``u[..., d]``."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if x.shape[-1] != self.n_states or u.shape[-1] != self.n_inputs:
            raise InvalidInputError(
                f"library expects {self.n_states} states and {self.n_inputs} inputs; got {x.shape}, {u.shape}"
            )
        lead = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        z = np.concatenate(
            [np.broadcast_to(x, lead + x.shape[-1:]), np.broadcast_to(u, lead + u.shape[-1:]), np.ones(lead + (1,))],
            axis=-1,
        )
        out = np.empty(lead + (len(self.terms),))
        if self._mono_pos.size:
            mi = self._mono_idx
            out[..., self._mono_pos] = z[..., mi[:, 0]] * z[..., mi[:, 1]] * z[..., mi[:, 2]]
        if self._sin_pos.size:
            out[..., self._sin_pos] = np.sin(z[..., self._sin_idx])
        if self._rat_pos.size:
            ri = self._rat_idx
            den = z[..., ri[:, 2]]
            if np.any(~(np.abs(den) > self.floor)):
                raise SingularityError(f"rational-term denominator at or below the floor {self.floor}")
            out[..., self._rat_pos] = z[..., ri[:, 0]] * z[..., ri[:, 1]] / den
        return out

    def centered(self, center) -> tuple[np.ndarray, np.ndarray]:
        """Change of basis to monomials of the shifted variables ``z - center``.

        Returns ``(shift, M)`` where ``shift`` is the per-variable offset (zero
        for variables that no monomial uses) and ``M`` is the L x L matrix with
        ``theta_raw(z) = theta_raw(z - shift) @ M`` on monomial columns and the
        identity elsewhere. ``M`` is unit upper triangular in degree order, so
        coefficients map back exactly via ``xi_raw = solve(M, xi_shifted)``.
        """
        shift = np.asarray(center, dtype=float).copy()
        index = {self._key(t): i for i, t in enumerate(self.terms)}
        size = len(self.terms)
        m = np.eye(size)
        for b, t in enumerate(self.terms):
            if t.kind not in ("const", "lin", "poly2", "poly3"):
                continue
            m[b, b] = 0.0
            vs = t.vars
            for mask in itertools.product((0, 1), repeat=len(vs)):
                kept = tuple(sorted(v for v, keep in zip(vs, mask) if keep))
                factor = float(np.prod([shift[v] for v, keep in zip(vs, mask) if not keep]))
                if factor == 0.0:
                    continue
                a = index.get(("mono", kept))
                if a is None:
                    raise InvalidInputError(f"library is not closed under sub-monomials; {kept} missing")
                m[a, b] += factor
        return shift, m

    def subset(self, positions) -> "LibrarySpec":
        return LibrarySpec([self.terms[i] for i in positions], self.n_states, self.n_inputs, self.floor)

    def to_list(self) -> list:
        return [t.to_list() for t in self.terms]

    def __eq__(self, other):
        return (
            isinstance(other, LibrarySpec)
            and self.terms == other.terms
            and (self.n_states, self.n_inputs, self.floor) == (other.n_states, other.n_inputs, other.floor)
        )

    def __repr__(self):
        return f"LibrarySpec(L={len(self)}, n_states={self.n_states}, n_inputs={self.n_inputs})"


def polynomial_library(
    n_states: int,
    n_inputs: int,
    degree: int = 3,
    include_const: bool = True,
    product_vars=None,
    sin_vars=(),
    rational=(),
    floor: float = pm.VDC_FLOOR,
    cubic_vars=None,
) -> LibrarySpec:
    """Constant, every linear term, degree-2 monomials over ``product_vars``
    (all variables by default), degree-3 monomials over ``cubic_vars`` (defaults
    to ``product_vars``), ``sin`` of ``sin_vars`` and the given ``(i, j, k)``
    rational terms ``z_i z_j / z_k``."""
    if not 1 <= degree <= 3:
        raise InvalidInputError("degree must be 1, 2 or 3")
    n_vars = n_states + n_inputs
    prod = list(range(n_vars)) if product_vars is None else list(product_vars)
    cub = prod if cubic_vars is None else list(cubic_vars)
    terms = [Term("const")] if include_const else []
    terms += [Term("lin", (i,)) for i in range(n_vars)]
    if degree >= 2:
        terms += [Term("poly2", c) for c in itertools.combinations_with_replacement(prod, 2)]
    if degree >= 3:
        terms += [Term("poly3", c) for c in itertools.combinations_with_replacement(cub, 3)]
    terms += [Term("sin", (i,)) for i in sin_vars]
    terms += [Term("rational", tuple(r)) for r in rational]
    return LibrarySpec(terms, n_states, n_inputs, floor)


def default_pv_library(kind: str, degree: int = 3, full_cubic: bool = False) -> LibrarySpec:
    """Library used for PV identification.

    Linear terms in every variable, degree-2 monomials over states and inputs,
    degree-3 monomials over the states (``full_cubic=True`` extends them to the
    inputs as well). The grid frequency input (u5) is constant in every
    scenario, so it is kept as a linear term only. Sine terms cover the four
    AC current states. Rational terms divide the d-d and q-q current-voltage
    products at the PCC and at the grid by the DC-link voltage.
    """
    n = pm.n_states(kind)
    d = pm.n_inputs(kind)
    w0 = n + 4
    prod = [i for i in range(n + d) if i != w0]
    cubic = prod if full_cubic else list(range(n))
    vdc = pm.VDC_INDEX[kind]
    iod, ioq, vod, voq = 2, 3, 4, 5
    vgd, vgq = n + 2, n + 3
    rational = [(iod, vod, vdc), (ioq, voq, vdc), (iod, vgd, vdc), (ioq, vgq, vdc)]
    return polynomial_library(
        n, d, degree, product_vars=prod, sin_vars=range(4), rational=rational, cubic_vars=cubic
    )


def build_library(data, spec: LibrarySpec) -> np.ndarray:
    """Stack library rows for every sample of ``data`` (m x L)."""
    return spec.evaluate(data.x, data.u)


def _monomial_vars(spec: LibrarySpec) -> np.ndarray:
    used = np.zeros(spec.n_states + spec.n_inputs, dtype=bool)
    for t in spec.terms:
        if t.kind in ("lin", "poly2", "poly3"):
            used[list(t.vars)] = True
    return used


def _centered_fit(data, spec: LibrarySpec, theta: np.ndarray):
    """Full-library least squares solved in the mean-centred monomial basis.

    Polynomial columns of variables that sit at large offsets (volts around
    800) are nearly collinear in the raw basis. Monomials of the deviations
    span the same function space with a far better conditioned matrix, and
    the coefficients map back to the raw basis exactly. Libraries that are
    not closed under sub-monomials are solved in the raw basis.
    """
    z = np.concatenate([data.x, data.u], axis=1)
    center = np.where(_monomial_vars(spec), z.mean(axis=0), 0.0)
    try:
        shift, m = spec.centered(center)
    except InvalidInputError:
        return _scaled_lstsq(theta, data.xdot)
    n = spec.n_states
    zs = np.concatenate([data.x - shift[:n], data.u - shift[n:], np.ones((data.m, 1))], axis=1)
    theta_c = theta.copy()
    if spec._mono_pos.size:
        mi = spec._mono_idx
        theta_c[:, spec._mono_pos] = zs[:, mi[:, 0]] * zs[:, mi[:, 1]] * zs[:, mi[:, 2]]
    eta, rank = _scaled_lstsq(theta_c, data.xdot)
    return scipy.linalg.solve_triangular(m, eta, lower=False, unit_diagonal=True), rank


def _scaled_lstsq(theta: np.ndarray, y: np.ndarray, columns=None):
    """Minimum-norm least squares on unit-RMS columns; returns (coef, rank)."""
    sub = theta if columns is None else theta[:, columns]
    scale = np.sqrt(np.mean(sub ** 2, axis=0))
    scale[scale == 0] = 1.0
    coef, _, rank, _ = scipy.linalg.lstsq(sub / scale, y, cond=RANK_RTOL, lapack_driver="gelsd")
    coef = coef / (scale[:, None] if coef.ndim == 2 else scale)
    return coef, int(rank)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise InvalidInputError("regression data contains non-finite values")


def stls(theta, xdot, threshold, max_iter: int = 25, diagnostics: dict | None = None) -> np.ndarray:
    """Sequential thresholded least squares.

    ``threshold`` is a scalar or one value per column of ``xdot``; entries with
    magnitude below it are zeroed and the survivors refit until the support
    stops changing. Rank-deficient active sets fall back to the minimum-norm
    solution and are reported in ``diagnostics['rank_deficient']``.
    """
    theta = np.asarray(theta, dtype=float)
    xdot = np.asarray(xdot, dtype=float)
    if xdot.ndim == 1:
        xdot = xdot[:, None]
    _check_finite(theta, xdot)
    n = xdot.shape[1]
    lam = np.broadcast_to(np.asarray(threshold, dtype=float), (n,))
    xi, rank = _scaled_lstsq(theta, xdot)
    deficient = rank < theta.shape[1]
    support = np.ones_like(xi, dtype=bool)
    for it in range(max_iter):
        new_support = np.abs(xi) >= lam
        if it > 0 and np.array_equal(new_support, support):
            break
        support = new_support
        xi = np.where(support, xi, 0.0)
        for j in range(n):
            cols = np.flatnonzero(support[:, j])
            if cols.size:
                coef, r = _scaled_lstsq(theta, xdot[:, j], cols)
                deficient |= r < cols.size
                xi[cols, j] = coef
    xi = np.where(np.abs(xi) >= lam, xi, 0.0)
    if diagnostics is not None:
        diagnostics["rank_deficient"] = bool(deficient)
        diagnostics["iterations"] = it + 1
    if deficient:
        warnings.warn("rank-deficient active set; minimum-norm solution used", RuntimeWarning, stacklevel=2)
    return xi


@dataclass
class SparseModel:
    xi: np.ndarray
    library: LibrarySpec
    gamma: float | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=float)
        if self.xi.shape != (len(self.library), self.library.n_states):
            raise InvalidInputError(f"xi shape {self.xi.shape} does not match library ({len(self.library)} terms)")
        self._compiled = None

    @property
    def n_states(self) -> int:
        return self.library.n_states

    @property
    def n_inputs(self) -> int:
        return self.library.n_inputs

    @property
    def nonzero_count(self) -> int:
        return int(np.count_nonzero(self.xi))

    def _active(self):
        if self._compiled is None:
            rows = np.flatnonzero(np.any(self.xi != 0, axis=1))
            self._compiled = (self.library.subset(rows), self.xi[rows])
        return self._compiled

    def __call__(self, x, u) -> np.ndarray:
        lib, xi = self._active()
        return lib.evaluate(x, u) @ xi

    def coefficient(self, term_name: str, column: int) -> float:
        """Coefficient of the named term (e.g. ``"x3 u3/x7"``) in state column ``column`` (1-based)."""
        return float(self.xi[self.library.names.index(term_name), column - 1])

    def table(self, tol: float = 0.0) -> str:
        """Plain-text coefficient table; rows are terms with any entry above ``tol``."""
        names = self.library.names
        header = ["term"] + [f"dx{j + 1}" for j in range(self.n_states)]
        rows = [header]
        for i, name in enumerate(names):
            if np.any(np.abs(self.xi[i]) > tol):
                rows.append([name] + [("0" if v == 0 else f"{v:.2f}") for v in self.xi[i]])
        widths = [max(len(r[c]) for r in rows) for c in range(len(header))]
        lines = ["  ".join(cell.rjust(w) for cell, w in zip(r, widths)) for r in rows]
        lines.insert(1, "-" * len(lines[0]))
        return "\n".join(lines)

    def to_dict(self) -> dict:
        nz = np.argwhere(self.xi != 0)
        return {
            "n_states": self.n_states,
            "n_inputs": self.n_inputs,
            "floor": self.library.floor,
            "gamma": self.gamma,
            "terms": self.library.to_list(),
            "coefficients": [[int(i), int(j), float(self.xi[i, j])] for i, j in nz],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SparseModel":
        lib = LibrarySpec(
            [Term.from_list(t) for t in data["terms"]], data["n_states"], data["n_inputs"], data.get("floor", pm.VDC_FLOOR)
        )
        xi = np.zeros((len(lib), lib.n_states))
        for i, j, v in data["coefficients"]:
            xi[i, j] = v
        return cls(xi, lib, data.get("gamma"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "SparseModel":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "SparseModel":
        return cls.from_json(Path(path).read_text())


def feature_select_sparse_regression(
    data,
    spec: LibrarySpec,
    gamma: float,
    refit: bool = False,
    min_rank_fraction: float = 0.0,
) -> SparseModel:
    """Least squares on the whole library, then per-column pruning relative to
    the dominant coefficient: entries with ``|xi_ij| < max_i |xi_ij| / gamma``
    are zeroed.

    With ``refit=True`` the survivors of each column are refit once by least
    squares (and any refit coefficient that falls below the same threshold is
    zeroed). The default keeps the surviving least-squares values unchanged.
    """
    if not gamma > 1:
        raise InvalidInputError(f"gamma must exceed 1, got {gamma}")
    theta = build_library(data, spec)
    _check_finite(theta, data.xdot)
    xi_ls, rank = _centered_fit(data, spec, theta)
    if rank < min_rank_fraction * theta.shape[1]:
        raise IdentificationError(
            f"library matrix has rank {rank} of {theta.shape[1]} columns; data is not exciting enough",
            {"rank": rank, "terms": theta.shape[1]},
        )
    mu = np.max(np.abs(xi_ls), axis=0)
    cutoff = mu / gamma
    keep = np.abs(xi_ls) >= cutoff
    xi = np.where(keep, xi_ls, 0.0)
    if refit:
        for j in range(xi.shape[1]):
            cols = np.flatnonzero(keep[:, j])
            if cols.size:
                coef, _ = _scaled_lstsq(theta, data.xdot[:, j], cols)
                coef[np.abs(coef) < cutoff[j]] = 0.0
                xi[cols, j] = coef
    degenerate = [int(j) for j in np.flatnonzero(~np.any(xi != 0, axis=0))]
    resid = np.linalg.norm(data.xdot - theta @ xi, axis=0)
    diagnostics = {
        "rank": rank,
        "terms": int(theta.shape[1]),
        "samples": int(theta.shape[0]),
        "mu": mu.tolist(),
        "residual_norm": resid.tolist(),
        "nonzero": int(np.count_nonzero(xi)),
        "degenerate_columns": degenerate,
        "xi_lstsq": xi_ls,
        "refit": refit,
    }
    return SparseModel(xi, spec, float(gamma), diagnostics)


def evaluate_model(model: SparseModel, x, u) -> np.ndarray:
    return model(x, u)


def validation_error(model: SparseModel, data) -> float:
    """Relative Frobenius residual ``||Xdot - Theta Xi|| / ||Xdot||``."""
    denom = np.linalg.norm(data.xdot)
    if denom == 0:
        raise InvalidInputError("state derivatives are identically zero")
    return float(np.linalg.norm(data.xdot - model(data.x, data.u)) / denom)


def physics_coefficients(kind: str, p: pm.PvParams, spec: LibrarySpec) -> np.ndarray:
    """Ground-truth Xi of the PV model expressed in ``spec`` (terms must be present)."""
    n = pm.n_states(kind)
    a, b = pm.build_ac_matrices(p)
    xi = np.zeros((len(spec), n))
    index = {LibrarySpec._key(t): i for i, t in enumerate(spec.terms)}

    def put(key, col, value):
        if key not in index:
            raise InvalidInputError(f"library lacks term {key} needed by the {kind} model")
        xi[index[key], col] += value

    for r in range(6):
        for c in range(6):
            if a[r, c]:
                put(("mono", (c,)), r, a[r, c])
        for c in range(5):
            if b[r, c]:
                put(("mono", (n + c,)), r, b[r, c])
    if kind == pm.SINGLE_STAGE:
        put(("rational", (2, n + 2), 6), 6, -1.5 / p.c_dc)
        put(("mono", (n + 5,)), 6, 1.0 / p.c_dc)
    else:
        put(("mono", (n + 5,)), 6, 1.0 / p.l_b)
        put(("mono", (7,)), 6, -1.0 / p.l_b)
        put(("mono", tuple(sorted((n + 6, 7)))), 6, 1.0 / p.l_b)
        put(("mono", (6,)), 7, 1.0 / p.c_dc)
        put(("mono", tuple(sorted((n + 6, 6)))), 7, -1.0 / p.c_dc)
        put(("rational", (2, 4), 7), 7, -1.5 / p.c_dc)
        put(("rational", (3, 5), 7), 7, -1.5 / p.c_dc)
    return xi
