"""Analytical layer: permutation outer bounds, the finite-packet-length
capacity bound, the hand-constructed 4-user flow certificate, generic
flow-balance feasibility checking, and Fourier-Motzkin projection.

All arithmetic is generic over floats and exact rationals: feed Fraction
rates/probabilities in and every comparison is exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import Decimal, localcontext
from fractions import Fraction
from itertools import combinations, permutations
from typing import Mapping, Optional, Sequence

from .channel import ErasureModel, epsilon_g
from .coding import ControlCatalog, ControlSpec
from .core import EMPTY, ConfigError, QueueIndex, UserSet
from .scheduler import DELIVERED, derive_transitions

# rates are plain sequences, one entry per user
RateVector = Sequence


class DegenerateChannelError(ValueError):
    """Some user group is erased with probability 1."""


class InfeasibleRateError(ValueError):
    """The requested rates lie outside the achievable region."""


class UnsortedRateError(ValueError):
    """The certificate construction requires non-increasing rates."""


def _validate_rates(rates, n_users):
    if len(rates) != n_users:
        raise ConfigError("one rate per user required")
    if any(r < 0 for r in rates):
        raise ConfigError("rates must be nonnegative")


# --- permutation bounds -----------------------------------------------------


def _prefix_denominators(model: ErasureModel, perm):
    denoms = []
    prefix = EMPTY
    for u in perm:
        prefix = prefix | UserSet.of(u)
        denom = 1 - epsilon_g(model, prefix)
        if denom <= 0:
            raise DegenerateChannelError(f"group {prefix!r} never receives")
        denoms.append(denom)
    return denoms


def outer_bound_argmax(rates: RateVector, model: ErasureModel):
    """Largest weighted rate sum over service orders, with its argmax."""
    _validate_rates(rates, model.n_users)
    best = best_perm = None
    for perm in permutations(range(model.n_users)):
        denoms = _prefix_denominators(model, perm)
        total = 0
        for u, denom in zip(perm, denoms):
            total = total + rates[u] / denom
        if best is None or total > best:
            best, best_perm = total, perm
    return best, best_perm


def outer_bound_margin(rates: RateVector, model: ErasureModel):
    """Rates are supportable by any policy only if this margin is <= 1."""
    return outer_bound_argmax(rates, model)[0]


def exponential_penalty(model: ErasureModel, perm, bits) -> Decimal:
    """Slack term a finite packet length leaves against the outer bound.

    Returned as a Decimal: for realistic packet lengths the value sits far
    below the smallest positive double, yet must stay positive and ordered.
    """
    a = sum(1 / d for d in _prefix_denominators(model, perm))
    with localcontext() as ctx:
        ctx.prec = 40
        if isinstance(a, Fraction):
            da = Decimal(a.numerator) / Decimal(a.denominator)
        else:
            da = Decimal(a)
        db = Decimal(bits)
        exponent = -db / da * Decimal(2).ln()
        return exponent.exp() * da / db


def capacity_bound_argmax(rates: RateVector, model: ErasureModel, bits):
    """Finite-length capacity margin (information bits per packet slot)."""
    _validate_rates(rates, model.n_users)
    if bits <= 0:
        raise ConfigError("packet length must be positive")
    best = best_perm = None
    for perm in permutations(range(model.n_users)):
        denoms = _prefix_denominators(model, perm)
        total = 0
        for u, denom in zip(perm, denoms):
            total = total + rates[u] / denom
        total -= float(exponential_penalty(model, perm, bits))
        if best is None or total > best:
            best, best_perm = total, perm
    return best, best_perm


def capacity_bound_margin(rates: RateVector, model: ErasureModel, bits):
    return capacity_bound_argmax(rates, model, bits)[0]


def capacity_gap(rates: RateVector, model: ErasureModel, bits) -> dict:
    """How far the finite-length bound sits below the infinite-length one."""
    outer, outer_perm = outer_bound_argmax(rates, model)
    cap, cap_perm = capacity_bound_argmax(rates, model, bits)
    return {
        "outer_margin": outer,
        "capacity_margin": cap,
        "outer_perm": outer_perm,
        "capacity_perm": cap_perm,
        "gap": exponential_penalty(model, cap_perm, bits),
    }


# --- 4-user flow certificate ------------------------------------------------


@dataclass(frozen=True)
class FlowCertificate:
    """Nonnegative time share per control; total at most one slot."""

    phi: Mapping[ControlSpec, object]

    def total(self):
        return sum(self.phi.values())

    def negative(self):
        return [spec for spec, v in self.phi.items() if v < 0]


def _pair(a, b):
    return (a, b) if a < b else (b, a)


class _PhiTables:
    """Per-family flow values on sorted user labels 0..3 (rate-descending)."""

    def __init__(self):
        self.phi1 = {}
        self.phi2 = {}
        self.phi31 = {}
        self.phi33 = {}
        self.phi41 = {}
        self.phi42 = {}
        self.phi44 = 0


def _phi_recursive(lam, eps) -> _PhiTables:
    t = _PhiTables()
    e = eps
    for i in range(4):
        t.phi1[i] = lam[i] / (1 - e**4)
    for i, j in combinations(range(4), 2):
        t.phi2[(i, j)] = e**3 * (1 - e) / (1 - e**3) * t.phi1[i]
    for i, j in combinations(range(4), 2):
        for k in range(4):
            if k not in (i, j):
                t.phi31[((i, j), k)] = e**3 * (1 - e) * t.phi2[(i, j)] / (1 - e**3)
    for tri in combinations(range(4), 3):
        def swap_term(a, b, c):
            # balance at the two-listener queue of user a within {a, b, c}
            num = e**2 * (1 - e) ** 2 * (
                t.phi1[a] + t.phi2[_pair(a, b)] + t.phi2[_pair(a, c)]
            ) + e**2 * (1 - e) * (
                t.phi31[(_pair(a, b), c)] + t.phi31[(_pair(a, c), b)]
            )
            return num / (1 - e**2) - t.phi31[(_pair(b, c), a)]

        i, j, k = tri
        t.phi33[tri] = max(swap_term(i, j, k), swap_term(j, i, k), swap_term(k, i, j))
    for tri in combinations(range(4), 3):
        i, j, k = tri
        inflow = (
            t.phi31[((i, j), k)]
            + t.phi31[((i, k), j)]
            + t.phi31[((j, k), i)]
            + t.phi33[tri]
        )
        t.phi41[tri] = e**3 * (1 - e) * inflow / (1 - e**3)
    for part in [((0, 1), (2, 3)), ((0, 2), (1, 3)), ((0, 3), (1, 2))]:
        def half_term(x, y):
            (x1, x2), (y1, y2) = x, y
            tri_a = tuple(sorted(x + (y1,)))
            tri_b = tuple(sorted(x + (y2,)))
            num = e**2 * (1 - e) ** 2 * (
                t.phi2[x]
                + t.phi31[(x, y1)]
                + t.phi31[(x, y2)]
                + t.phi31[(_pair(x1, y1), x2)]
                + t.phi31[(_pair(x1, y2), x2)]
                + t.phi31[(_pair(x2, y1), x1)]
                + t.phi31[(_pair(x2, y2), x1)]
                + t.phi33[tri_a]
                + t.phi33[tri_b]
            ) + e**2 * (1 - e) * (t.phi41[tri_a] + t.phi41[tri_b])
            return num / (1 - e**2)

        a, b = part
        t.phi42[part] = max(half_term(a, b), half_term(b, a))

    def full_term(u):
        others = [v for v in range(4) if v != u]
        opp = sum(t.phi31[(_pair(a, b), u)] for a, b in combinations(others, 2))
        adj = sum(
            t.phi31[(_pair(u, a), b)] for a in others for b in others if b != a
        )
        swaps = sum(
            t.phi33[tuple(sorted((u, a, b)))] for a, b in combinations(others, 2)
        )
        own = t.phi1[u] + sum(t.phi2[_pair(u, a)] for a in others)
        tri_in = sum(
            t.phi41[tuple(sorted((u, a, b)))] for a, b in combinations(others, 2)
        )
        part_in = sum(t.phi42.values())
        return (
            e * (1 - e) ** 2 * (own + opp + adj + swaps)
            + e * (1 - e) * tri_in
            + e * part_in
            - t.phi41[tuple(others)]
        )

    t.phi44 = max(full_term(u) for u in range(4))
    return t


def _phi_closed(lam, eps) -> _PhiTables:
    t = _PhiTables()
    e = eps
    q3 = 1 + e + e**2
    for i in range(4):
        t.phi1[i] = lam[i] / (1 - e**4)
    for i, j in combinations(range(4), 2):
        t.phi2[(i, j)] = e**3 * (1 - e) * lam[i] / ((1 - e**3) * (1 - e**4))
    for i, j in combinations(range(4), 2):
        for k in range(4):
            if k not in (i, j):
                t.phi31[((i, j), k)] = (
                    e**6 * (1 - e) ** 2 * lam[i] / ((1 - e**3) ** 2 * (1 - e**4))
                )
    for i, j, k in combinations(range(4), 3):
        t.phi33[(i, j, k)] = (
            e**2
            * ((1 - e**4) * lam[i] + e**2 * lam[i] - e**4 * lam[j])
            / ((1 - e**4) * q3**2)
        )
    for tri in combinations(range(4), 3):
        t.phi41[tri] = e**5 * (1 - e + e**2) * lam[tri[0]] / ((1 - e**4) * q3**2)
    for part in [((0, 1), (2, 3)), ((0, 2), (1, 3)), ((0, 3), (1, 2))]:
        t.phi42[part] = (
            e**4
            * (2 - e + 2 * e**2 - e**4)
            * lam[0]
            / ((1 - e**4) * (1 + e) * q3**2)
        )
    t.phi44 = (
        e
        * (
            lam[0]
            * (1 + e + 3 * e**2 - 2 * e**3 + 4 * e**4 - 3 * e**5 + e**6 + e**7)
            - lam[1] * (e**4 + e**7)
        )
        / ((1 - e**4) * (1 + e) * q3**2)
    )
    return t


def _assemble(t: _PhiTables, relabel) -> FlowCertificate:
    phi = {}

    def emit(pairs, value):
        spec = ControlSpec.of(
            *(
                (tuple(relabel[u] for u in l), tuple(relabel[u] for u in d))
                for l, d in pairs
            )
        )
        phi[spec] = value

    for i, v in t.phi1.items():
        emit([((), (i,))], v)
    for (i, j), v in t.phi2.items():
        emit([((j,), (i,)), ((i,), (j,))], v)
    for ((i, j), k), v in t.phi31.items():
        emit([((k,), (i, j)), ((i, j), (k,))], v)
    for (i, j, k), v in t.phi33.items():
        emit([((j, k), (i,)), ((i, k), (j,)), ((i, j), (k,))], v)
    for tri, v in t.phi41.items():
        (l,) = tuple(u for u in range(4) if u not in tri)
        emit([((l,), tri), (tri, (l,))], v)
    for (a, b), v in t.phi42.items():
        emit([(b, a), (a, b)], v)
    emit(
        [
            ((1, 2, 3), (0,)),
            ((0, 2, 3), (1,)),
            ((0, 1, 3), (2,)),
            ((0, 1, 2), (3,)),
        ],
        t.phi44,
    )
    return FlowCertificate(phi)


def build_phi_4user(
    rates: RateVector, eps, *, method: str = "recursive", relabel: bool = True
) -> FlowCertificate:
    """Explicit stabilizing time-share assignment for 4 users, equal
    independent erasure probability eps, rates inside the bound."""
    rates = tuple(rates)
    _validate_rates(rates, 4)
    if not 0 <= eps < 1:
        raise ConfigError(f"erasure probability {eps} outside [0, 1)")
    order = sorted(range(4), key=lambda u: rates[u], reverse=True)
    lam = tuple(rates[u] for u in order)
    if lam != rates and not relabel:
        raise UnsortedRateError("rates must be non-increasing")
    load = sum(lam[i] / (1 - eps ** (i + 1)) for i in range(4))
    if load > 1:
        raise InfeasibleRateError(f"weighted load {load} exceeds 1")
    if method == "recursive":
        tables = _phi_recursive(lam, eps)
    elif method == "closed":
        tables = _phi_closed(lam, eps)
    else:
        raise ConfigError(f"unknown method {method!r}")
    return _assemble(tables, relabel=order)


# --- generic flow-balance feasibility ---------------------------------------


def _node_flow_coefficients(edges) -> dict:
    """Per node: probability mass flowing in from other nodes and out."""
    coeffs: dict = {}
    for node, targets in edges.items():
        for target, p in targets.items():
            if target == node:
                continue
            coeffs.setdefault(node, [0, 0])[1] += p
            if target != DELIVERED:
                coeffs.setdefault(target, [0, 0])[0] += p
    return coeffs


def _is_root(node, user) -> bool:
    qi, i = node
    return i == user and qi.listeners == EMPTY and qi.destinations == UserSet.of(user)


def feasibility_check(
    rates: RateVector,
    certificate: FlowCertificate,
    model: ErasureModel,
    catalog: ControlCatalog,
    *,
    tol=1e-9,
    transitions: Optional[dict] = None,
) -> dict:
    """Verify arrival + inflow <= outflow at every virtual queue under the
    certificate's time shares; report the worst slack."""
    _validate_rates(rates, model.n_users)
    known = set(catalog.controls)
    unknown = [spec for spec in certificate.phi if spec not in known]
    flows: dict = {}
    for spec, share in certificate.phi.items():
        if not share:
            continue
        edges = (
            transitions[spec]
            if transitions is not None
            else derive_transitions(spec, model)
        )
        for node, (fin, fout) in _node_flow_coefficients(edges).items():
            acc = flows.setdefault(node, [0, 0])
            acc[0] += share * fin
            acc[1] += share * fout
    for i in range(model.n_users):
        root = (QueueIndex(EMPTY, UserSet.of(i)), i)
        flows.setdefault(root, [0, 0])

    violations = []
    worst_node, worst_slack = None, None
    for node in sorted(flows, key=lambda n: (n[0].sort_key(), n[1])):
        fin, fout = flows[node]
        lam_bar = rates[node[1]] if _is_root(node, node[1]) else 0
        slack = fout - fin - lam_bar
        if worst_slack is None or slack < worst_slack:
            worst_node, worst_slack = node, slack
        if slack < -tol:
            violations.append((node, slack))

    negative = certificate.negative()
    total = certificate.total()
    feasible = (
        not violations and not negative and not unknown and total <= 1 + tol
    )
    return {
        "feasible": feasible,
        "worst_node": worst_node,
        "worst_slack": worst_slack,
        "violations": violations,
        "negative_phi": negative,
        "unknown_controls": unknown,
        "phi_total": total,
    }


# --- Fourier-Motzkin --------------------------------------------------------


def _iszero(x, tol) -> bool:
    return -tol <= x <= tol


def _div(a, b):
    """Division that keeps integer inputs exact instead of going float."""
    if isinstance(a, int) and isinstance(b, int):
        return Fraction(a, b)
    return a / b


@dataclass(frozen=True)
class LinearIneq:
    """sum(coeff * var) <= rhs; zero coefficients are never stored."""

    coeffs: tuple
    rhs: object

    @classmethod
    def of(cls, coeffs: Mapping[str, object], rhs, tol=0) -> "LinearIneq":
        kept = tuple(
            sorted((v, c) for v, c in coeffs.items() if not _iszero(c, tol))
        )
        return cls(kept, rhs)

    def coeff(self, var):
        for v, c in self.coeffs:
            if v == var:
                return c
        return 0

    def as_dict(self) -> dict:
        return dict(self.coeffs)

    @property
    def variables(self):
        return [v for v, _ in self.coeffs]

    def normalized(self) -> "LinearIneq":
        """Scale by a positive factor: rhs 1 when possible, else unit peak."""
        if self.rhs > 0:
            return LinearIneq.of(
                {v: _div(c, self.rhs) for v, c in self.coeffs},
                _div(self.rhs, self.rhs),
            )
        if not self.coeffs:
            return self
        peak = max(abs(c) for _, c in self.coeffs)
        return LinearIneq.of(
            {v: _div(c, peak) for v, c in self.coeffs}, _div(self.rhs, peak)
        )

    def evaluate(self, point: Mapping[str, object]):
        return sum(c * point.get(v, 0) for v, c in self.coeffs)


@dataclass(frozen=True)
class Polyhedron:
    inequalities: tuple

    @classmethod
    def of(cls, ineqs) -> "Polyhedron":
        return cls(tuple(ineqs))

    def variables(self) -> list[str]:
        seen: dict = {}
        for ineq in self.inequalities:
            for v in ineq.variables:
                seen[v] = True
        return sorted(seen)

    def contains(self, point: Mapping[str, object], tol=1e-9) -> bool:
        return all(i.evaluate(point) <= i.rhs + tol for i in self.inequalities)

    def contradictions(self) -> list[LinearIneq]:
        """Constant inequalities of the form 0 <= negative."""
        return [i for i in self.inequalities if not i.coeffs and i.rhs < 0]


def simplify_inequalities(
    ineqs, *, assume_nonneg: bool = True, tol=1e-9
) -> list[LinearIneq]:
    kept: list[LinearIneq] = []
    seen = set()
    for ineq in ineqs:
        if not ineq.coeffs:
            if ineq.rhs >= -tol:
                continue  # vacuous
            kept.append(ineq)  # contradiction: keep visible
            continue
        if assume_nonneg and ineq.rhs >= 0 and all(c <= 0 for _, c in ineq.coeffs):
            continue  # vacuous under nonnegative variables
        norm = ineq.normalized()
        key = (norm.coeffs, str(norm.rhs))
        if key in seen:
            continue
        seen.add(key)
        kept.append(norm)
    if not assume_nonneg:
        return kept
    # pairwise dominance for unit-rhs rows: on nonnegative points a row with
    # larger coefficients everywhere is the tighter constraint
    out: list[LinearIneq] = []
    for idx, b in enumerate(kept):
        if b.rhs <= tol:
            out.append(b)
            continue
        bv = b.as_dict()
        dominated = False
        for jdx, a in enumerate(kept):
            if jdx == idx or a.rhs <= tol:
                continue
            av = a.as_dict()
            names = set(av) | set(bv)
            if not all(av.get(v, 0) >= bv.get(v, 0) - tol for v in names):
                continue
            strict = any(av.get(v, 0) > bv.get(v, 0) + tol for v in names)
            if strict or jdx < idx:
                dominated = True
                break
        if not dominated:
            out.append(b)
    return out


def fm_eliminate(
    poly: Polyhedron,
    var: str,
    *,
    simplify: bool = True,
    assume_nonneg: bool = True,
    tol=1e-9,
) -> Polyhedron:
    """Project out one variable: combine every lower bound on it with every
    upper bound, keep everything that never mentioned it.

    With assume_nonneg the variable's implicit zero lower bound joins the
    combination step, so explicit -x <= 0 rows are never required.
    """
    keep, lowers, uppers = [], [], []
    for ineq in poly.inequalities:
        a = ineq.coeff(var)
        if _iszero(a, tol):
            keep.append(ineq)
        elif a > 0:
            uppers.append(ineq)
        else:
            lowers.append(ineq)
    if assume_nonneg:
        lowers.append(LinearIneq.of({var: -1}, 0))
    combos = []
    for lo in lowers:
        al = -lo.coeff(var)
        for up in uppers:
            au = up.coeff(var)
            names = set(lo.variables) | set(up.variables)
            names.discard(var)
            coeffs = {
                v: _div(lo.coeff(v), al) + _div(up.coeff(v), au) for v in names
            }
            combos.append(
                LinearIneq.of(coeffs, _div(lo.rhs, al) + _div(up.rhs, au), tol=tol)
            )
    result = keep + combos
    if simplify:
        result = simplify_inequalities(result, assume_nonneg=assume_nonneg, tol=tol)
    return Polyhedron.of(result)


def build_flow_polyhedron(model: ErasureModel, catalog: ControlCatalog):
    """Symbolic flow-balance system over per-control time shares and rates.

    Variables: one share per catalog control (returned mapping), one rate
    per user named lam<i>.  Suitable for projection onto the rates.
    """
    var_of = {spec: f"phi{idx}" for idx, spec in enumerate(catalog)}
    per_node: dict = {}
    for spec in catalog:
        edges = derive_transitions(spec, model)
        for node, (fin, fout) in _node_flow_coefficients(edges).items():
            per_node.setdefault(node, {})[var_of[spec]] = fin - fout
    ineqs = []
    for node in sorted(per_node, key=lambda n: (n[0].sort_key(), n[1])):
        coeffs = dict(per_node[node])
        if _is_root(node, node[1]):
            coeffs[f"lam{node[1]}"] = 1
        ineqs.append(LinearIneq.of(coeffs, 0))
    ineqs.append(LinearIneq.of({v: 1 for v in var_of.values()}, 1))
    for v in var_of.values():
        ineqs.append(LinearIneq.of({v: -1}, 0))
    return Polyhedron.of(ineqs), var_of
