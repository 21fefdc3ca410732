"""Slotted-time simulation binding channel, catalog, movement and policy.

Two engines produce identical per-slot metrics from the same seed:

* ``object`` — full packet/token/basis state with every invariant monitor
  available.  The reference engine.
* ``counts`` — integer queue-occupancy vectors plus per-packet constituent
  counts.  Queue dynamics depend only on (control, reception set), which is
  precompiled into delta tables, so long stability runs stay cheap.  State
  audits and decode checks do not exist here; cross-engine equality is the
  check instead.
"""

from __future__ import annotations

import os
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from math import factorial
from typing import Optional

from .channel import ArrivalModel, ErasureModel, make_rng, sample_arrivals, sample_reception
from .coding import FULL, ControlCatalog, ControlSpec, _cc_pairs, enumerate_controls
from .core import (
    EMPTY,
    ConfigError,
    MonitorViolation,
    NetworkState,
    QueueIndex,
    UserSet,
    audit_state,
)
from .movement import ReceptionOutcome, RpmCase, apply_rpm, synthesize_state
from .scheduler import DELIVERED, derive_transitions


@dataclass
class SimConfig:
    n_users: int
    horizon: int
    erasure: ErasureModel
    arrivals: ArrivalModel
    restriction: str = FULL
    seed: object = 0
    engine: str = "object"
    policy: str = "maxweight"
    retransmit_mode: str = "sticky"
    flush_on_empty: bool = True
    audit_every: int = 1
    deep_audit_every: int = 1000
    decode_monitor: bool = True
    overhead_monitor: bool = True
    decimate: int = 1  # trace row every k slots; 0 keeps no trace
    catalog: Optional[ControlCatalog] = None

    def validate(self):
        if self.horizon < 1:
            raise ConfigError("horizon must be at least 1")
        if self.n_users != self.erasure.n_users:
            raise ConfigError("erasure model user count mismatch")
        if len(self.arrivals.rates) != self.n_users:
            raise ConfigError("arrival model user count mismatch")
        if self.engine not in ("object", "counts"):
            raise ConfigError(f"unknown engine {self.engine!r}")
        if self.policy not in ("maxweight", "random"):
            raise ConfigError(f"unknown policy {self.policy!r}")
        if self.retransmit_mode not in ("sticky", "reselect"):
            raise ConfigError(f"unknown retransmit mode {self.retransmit_mode!r}")
        if self.decimate < 0 or self.audit_every < 0 or self.deep_audit_every < 0:
            raise ConfigError("cadence fields must be nonnegative")


@dataclass
class SlotMetrics:
    t: int
    q_hat: int
    v_hat: int
    delivered: tuple  # cumulative per user
    control: Optional[int]  # catalog index
    case: Optional[str]
    retransmit: bool
    flush: bool
    overhead: int  # constituent count of the transmitted composite


@dataclass
class RunResult:
    config: SimConfig
    trace: list
    arrivals_total: tuple
    delivered_total: tuple
    final_q_hat: int
    final_v_hat: int
    max_q_hat: int
    max_v_hat: int
    overhead_hist: dict
    max_stored_by_level: dict
    max_exit_by_level: dict
    flush_slots: int
    idle_slots: int
    window_means: tuple = ()
    state: object = None  # final NetworkState (object engine only)


# --- catalog compilation ------------------------------------------------------


@dataclass
class _Delta:
    case: str
    retransmit: bool
    pops: tuple  # queue ids whose head leaves
    moves: tuple  # (src, dst) pairs: popped head re-enqueued
    merge_sources: tuple  # popped heads combined into one fresh packet
    merge_target: Optional[int]
    deliveries: tuple  # (user, count)


@dataclass
class _CompiledControl:
    spec: ControlSpec
    queue_ids: tuple
    required_mask: int
    exit_level: int
    node_terms: tuple = ()  # ((src_q, ((tgt_q, p), ...)), ...)
    deltas: Optional[dict] = None  # s_mask -> _Delta


@dataclass
class _Compiled:
    n_users: int
    queues: tuple
    qidx: dict
    weights: tuple  # |D| per queue
    levels: tuple
    roots: tuple  # queue id of Q^{}_{i} per user
    controls: list


_SPACE_CACHE: dict = {}
_DELTA_CACHE: dict = {}
_TERMS_CACHE: dict = {}


def _queue_space(n_users: int):
    space = _SPACE_CACHE.get(n_users)
    if space is None:
        queues = tuple(sorted(_cc_pairs(n_users), key=lambda q: q.sort_key()))
        qidx = {qi: k for k, qi in enumerate(queues)}
        weights = tuple(len(qi.destinations) for qi in queues)
        levels = tuple(qi.level for qi in queues)
        roots = tuple(
            qidx[QueueIndex(EMPTY, UserSet.of(i))] for i in range(n_users)
        )
        space = (queues, qidx, weights, levels, roots)
        _SPACE_CACHE[n_users] = space
    return space


def _model_key(model: ErasureModel):
    if model.eps is not None:
        return ("iid", tuple(str(e) for e in model.eps))
    return ("joint", tuple((s.mask, str(p)) for s, p in model.pmf()))


def _compile_deltas(n_users, catalog, cache_key):
    if cache_key is not None and cache_key in _DELTA_CACHE:
        return _DELTA_CACHE[cache_key]
    _, qidx, _, _, _ = _queue_space(n_users)
    out = []
    for spec in catalog:
        pairs = spec.sorted_pairs
        entries = [(tuple(q.listeners), tuple(q.destinations)) for q in pairs]
        per_s = {}
        for s_mask in range(1 << n_users):
            state = synthesize_state(n_users, entries)
            plan = apply_rpm(
                state, spec, None, ReceptionOutcome(UserSet(s_mask))
            )
            pops, moves, merge_sources = [], [], []
            merge_target = None
            for pid, frm, to in plan.real_moves:
                if frm is not None:
                    pops.append(qidx[frm])
                    if to is not None:
                        moves.append((qidx[frm], qidx[to]))
                    elif plan.merged is not None:
                        merge_sources.append(qidx[frm])
                elif to is not None:  # freshly minted merge result
                    merge_target = qidx[to]
            counts = {}
            for user, _native in plan.decoded:
                counts[user] = counts.get(user, 0) + 1
            per_s[s_mask] = _Delta(
                case=plan.case.value,
                retransmit=plan.case is RpmCase.RETRANSMIT,
                pops=tuple(pops),
                moves=tuple(moves),
                merge_sources=tuple(merge_sources),
                merge_target=merge_target,
                deliveries=tuple(sorted(counts.items())),
            )
        out.append(per_s)
    if cache_key is not None:
        _DELTA_CACHE[cache_key] = out
    return out


def _compile_terms(n_users, catalog, model, cache_key):
    key = None if cache_key is None else (cache_key, _model_key(model))
    if key is not None and key in _TERMS_CACHE:
        return _TERMS_CACHE[key]
    _, qidx, _, _, _ = _queue_space(n_users)
    out = []
    for spec in catalog:
        edges = derive_transitions(spec, model)
        terms = []
        for (qi, _i), targets in edges.items():
            row = tuple(
                (qidx[tgt[0]], p)
                for tgt, p in targets.items()
                if tgt != DELIVERED
            )
            terms.append((qidx[qi], row))
        out.append(tuple(terms))
    if key is not None:
        _TERMS_CACHE[key] = out
    return out


def compile_catalog(config: SimConfig) -> _Compiled:
    n = config.n_users
    catalog = (
        config.catalog
        if config.catalog is not None
        else enumerate_controls(n, config.restriction)
    )
    cache_key = None if config.catalog is not None else (n, config.restriction)
    queues, qidx, weights, levels, roots = _queue_space(n)
    controls = []
    for spec in catalog:
        ids = tuple(qidx[qi] for qi in spec.sorted_pairs)
        mask = 0
        for q in ids:
            mask |= 1 << q
        controls.append(
            _CompiledControl(
                spec=spec,
                queue_ids=ids,
                required_mask=mask,
                exit_level=max(qi.level for qi in spec.sorted_pairs),
            )
        )
    compiled = _Compiled(n, queues, qidx, weights, levels, roots, controls)
    if config.policy == "maxweight":
        for cc, terms in zip(controls, _compile_terms(n, catalog, config.erasure, cache_key)):
            cc.node_terms = terms
    if config.engine == "counts":
        for cc, deltas in zip(controls, _compile_deltas(n, catalog, cache_key)):
            cc.deltas = deltas
    return compiled


def _select(compiled: _Compiled, lengths, nonzero_mask, policy, rng):
    controls = compiled.controls
    eligible = [
        idx
        for idx, cc in enumerate(controls)
        if cc.required_mask & nonzero_mask == cc.required_mask
    ]
    if not eligible:
        return None
    if policy == "random":
        return eligible[rng.randrange(len(eligible))]
    best = None
    best_reward = None
    for idx in eligible:
        reward = 0
        for src, row in controls[idx].node_terms:
            drift = lengths[src]
            for tgt, p in row:
                drift -= p * lengths[tgt]
            if drift > 0:
                reward += drift
        if best is None or reward > best_reward:
            best, best_reward = idx, reward
    return best


# --- engines -------------------------------------------------------------------


def run(config: SimConfig, *, windows=()) -> RunResult:
    """Simulate config.horizon slots; optional windows are (start, stop)
    slot ranges whose mean backlog is folded on the fly."""
    config.validate()
    compiled = compile_catalog(config)
    if config.engine == "object":
        return _run_object(config, compiled, windows)
    return _run_counts(config, compiled, windows)


def _stored_cap(level: int) -> int:
    return 1 if level <= 1 else factorial(level - 1)


def _window_folds(windows):
    return [[int(lo), int(hi), 0] for lo, hi in windows]


def _fold_windows(folds, t, q_hat):
    for f in folds:
        if f[0] <= t < f[1]:
            f[2] += q_hat


def _window_means(folds):
    return tuple(f[2] / (f[1] - f[0]) for f in folds)


def _run_object(config: SimConfig, compiled: _Compiled, windows) -> RunResult:
    n = config.n_users
    model = config.erasure
    state = NetworkState(n)
    chan = make_rng(config.seed, "chan")
    arr = make_rng(config.seed, "arr")
    pol = make_rng(config.seed, "policy")
    queues = compiled.queues
    real = state.real_queues

    delivered = [0] * n
    arrived = [0] * n
    pending = None
    transmitted_since_flush = False
    trace = []
    overhead_hist: dict = {}
    max_stored: dict = {}
    max_exit: dict = {}
    flush_slots = idle_slots = 0
    max_q = max_v = 0
    folds = _window_folds(windows)

    for t in range(config.horizon):
        lengths = [len(real.get(qi, ())) for qi in queues]
        nonzero = 0
        for k, ln in enumerate(lengths):
            if ln:
                nonzero |= 1 << k
        sticky = pending is not None and config.retransmit_mode == "sticky"
        cidx = pending if sticky else _select(
            compiled, lengths, nonzero, config.policy, pol
        )
        flush = False
        case = None
        overhead = 0
        if cidx is None:
            if (
                config.flush_on_empty
                and transmitted_since_flush
                and not real
            ):
                assert state.v_hat() == 0
                for basis in state.bases:
                    basis.clear()
                flush = True
                flush_slots += 1
                transmitted_since_flush = False
            else:
                idle_slots += 1
        else:
            cc = compiled.controls[cidx]
            composite: frozenset = frozenset()
            for qi in cc.spec.sorted_pairs:
                composite = composite ^ real[qi][0].constituents
            overhead = len(composite)
            if config.overhead_monitor and overhead > factorial(cc.exit_level):
                raise MonitorViolation(
                    [
                        f"composite of {overhead} constituents exits level "
                        f"{cc.exit_level}"
                    ],
                    slot=t,
                )
            s = sample_reception(model, chan)
            deep = bool(
                config.deep_audit_every and t % config.deep_audit_every == 0
            )
            plan = apply_rpm(
                state, cc.spec, None, ReceptionOutcome(s), audit_entry=deep
            )
            case = plan.case.value
            transmitted_since_flush = True
            pending = cidx if plan.case is RpmCase.RETRANSMIT else None
            for user, native in plan.decoded:
                delivered[user] += 1
                if config.decode_monitor and (
                    native.owner != user or native not in state.decoded[user]
                ):
                    raise MonitorViolation(
                        [f"user {user} failed to decode {native!r}"], slot=t
                    )
            if config.overhead_monitor:
                for pid, _frm, to in plan.real_moves:
                    if to is None:
                        continue
                    packet = next(
                        p for p in real.get(to, ()) if p.pid == pid
                    )
                    size = len(packet.constituents)
                    if size > _stored_cap(to.level):
                        raise MonitorViolation(
                            [
                                f"stored packet of {size} constituents at "
                                f"level {to.level}"
                            ],
                            slot=t,
                        )
                    if size > max_stored.get(to.level, 0):
                        max_stored[to.level] = size
            overhead_hist[overhead] = overhead_hist.get(overhead, 0) + 1
            if overhead > max_exit.get(cc.exit_level, 0):
                max_exit[cc.exit_level] = overhead
        if config.audit_every and t % config.audit_every == 0:
            problems = audit_state(state)
            if problems:
                raise MonitorViolation(problems, slot=t)
        if config.deep_audit_every and t % config.deep_audit_every == 0:
            problems = audit_state(state, deep=True)
            if problems:
                raise MonitorViolation(problems, slot=t)
        batch = sample_arrivals(config.arrivals, arr)
        for user, count in enumerate(batch):
            arrived[user] += count
            for _ in range(count):
                state.arrival(user)
        q_hat = state.q_hat()
        v_hat = state.v_hat()
        max_q = max(max_q, q_hat)
        max_v = max(max_v, v_hat)
        _fold_windows(folds, t, q_hat)
        if config.decimate and t % config.decimate == 0:
            trace.append(
                SlotMetrics(
                    t,
                    q_hat,
                    v_hat,
                    tuple(delivered),
                    cidx,
                    case,
                    sticky and cidx is not None,
                    flush,
                    overhead,
                )
            )
    assert sum(delivered) + state.v_hat() == sum(arrived)
    return RunResult(
        config=config,
        trace=trace,
        arrivals_total=tuple(arrived),
        delivered_total=tuple(delivered),
        final_q_hat=state.q_hat(),
        final_v_hat=state.v_hat(),
        max_q_hat=max_q,
        max_v_hat=max_v,
        overhead_hist=overhead_hist,
        max_stored_by_level=max_stored,
        max_exit_by_level=max_exit,
        flush_slots=flush_slots,
        idle_slots=idle_slots,
        window_means=_window_means(folds),
        state=state,
    )


def _run_counts(config: SimConfig, compiled: _Compiled, windows) -> RunResult:
    n = config.n_users
    model = config.erasure
    chan = make_rng(config.seed, "chan")
    arr = make_rng(config.seed, "arr")
    pol = make_rng(config.seed, "policy")
    nq = len(compiled.queues)
    weights = compiled.weights
    levels = compiled.levels
    roots = compiled.roots
    lengths = [0] * nq
    sizes = [deque() for _ in range(nq)]
    nonzero = 0
    q_hat = v_hat = 0

    delivered = [0] * n
    arrived = [0] * n
    pending = None
    transmitted_since_flush = False
    trace = []
    overhead_hist: dict = {}
    max_stored: dict = {}
    max_exit: dict = {}
    flush_slots = idle_slots = 0
    max_q = max_v = 0
    folds = _window_folds(windows)

    for t in range(config.horizon):
        sticky = pending is not None and config.retransmit_mode == "sticky"
        cidx = pending if sticky else _select(
            compiled, lengths, nonzero, config.policy, pol
        )
        flush = False
        case = None
        overhead = 0
        if cidx is None:
            if config.flush_on_empty and transmitted_since_flush and q_hat == 0:
                flush = True
                flush_slots += 1
                transmitted_since_flush = False
            else:
                idle_slots += 1
        else:
            cc = compiled.controls[cidx]
            overhead = sum(sizes[q][0] for q in cc.queue_ids)
            if config.overhead_monitor and overhead > factorial(cc.exit_level):
                raise MonitorViolation(
                    [
                        f"composite of {overhead} constituents exits level "
                        f"{cc.exit_level}"
                    ],
                    slot=t,
                )
            s = sample_reception(model, chan)
            delta = cc.deltas[s.mask]
            case = delta.case
            transmitted_since_flush = True
            pending = cidx if delta.retransmit else None
            popped = {}
            for q in delta.pops:
                popped[q] = sizes[q].popleft()
                lengths[q] -= 1
                q_hat -= 1
                v_hat -= weights[q]
                if not lengths[q]:
                    nonzero &= ~(1 << q)
            pushes = [(dst, popped[src]) for src, dst in delta.moves]
            if delta.merge_target is not None:
                pushes.append(
                    (
                        delta.merge_target,
                        sum(popped[q] for q in delta.merge_sources),
                    )
                )
            for q, size in pushes:
                sizes[q].append(size)
                lengths[q] += 1
                q_hat += 1
                v_hat += weights[q]
                nonzero |= 1 << q
                if config.overhead_monitor:
                    if size > _stored_cap(levels[q]):
                        raise MonitorViolation(
                            [
                                f"stored packet of {size} constituents at "
                                f"level {levels[q]}"
                            ],
                            slot=t,
                        )
                    if size > max_stored.get(levels[q], 0):
                        max_stored[levels[q]] = size
            for user, count in delta.deliveries:
                delivered[user] += count
            overhead_hist[overhead] = overhead_hist.get(overhead, 0) + 1
            if overhead > max_exit.get(cc.exit_level, 0):
                max_exit[cc.exit_level] = overhead
        batch = sample_arrivals(config.arrivals, arr)
        for user, count in enumerate(batch):
            arrived[user] += count
            root = roots[user]
            for _ in range(count):
                sizes[root].append(1)
                lengths[root] += 1
                q_hat += 1
                v_hat += 1
                nonzero |= 1 << root
        max_q = max(max_q, q_hat)
        max_v = max(max_v, v_hat)
        _fold_windows(folds, t, q_hat)
        if config.decimate and t % config.decimate == 0:
            trace.append(
                SlotMetrics(
                    t,
                    q_hat,
                    v_hat,
                    tuple(delivered),
                    cidx,
                    case,
                    sticky and cidx is not None,
                    flush,
                    overhead,
                )
            )
    assert sum(delivered) + v_hat == sum(arrived)
    return RunResult(
        config=config,
        trace=trace,
        arrivals_total=tuple(arrived),
        delivered_total=tuple(delivered),
        final_q_hat=q_hat,
        final_v_hat=v_hat,
        max_q_hat=max_q,
        max_v_hat=max_v,
        overhead_hist=overhead_hist,
        max_stored_by_level=max_stored,
        max_exit_by_level=max_exit,
        flush_slots=flush_slots,
        idle_slots=idle_slots,
        window_means=_window_means(folds),
        state=None,
    )


# --- stability probe -------------------------------------------------------


def worker_count(requested=None, task_count=None) -> int:
    cap = requested
    if cap is None:
        env = os.environ.get("BECSIM_THREADS", "")
        cap = int(env) if env else (os.cpu_count() or 1)
    if task_count is not None:
        cap = min(cap, task_count)
    return max(1, cap)


def _probe_task(args):
    (
        n_users,
        model,
        arrivals_rates,
        restriction,
        policy,
        retransmit_mode,
        flush_on_empty,
        engine,
        seed_name,
        window,
    ) = args
    config = SimConfig(
        n_users=n_users,
        horizon=2 * window,
        erasure=model,
        arrivals=ArrivalModel.bernoulli(arrivals_rates),
        restriction=restriction,
        seed=seed_name,
        engine=engine,
        policy=policy,
        retransmit_mode=retransmit_mode,
        flush_on_empty=flush_on_empty,
        audit_every=0,
        deep_audit_every=0,
        decode_monitor=False,
        overhead_monitor=False,
        decimate=0,
    )
    result = run(
        config,
        windows=((window // 2, window), (3 * window // 2, 2 * window)),
    )
    early, late = result.window_means
    return early, late, result.max_q_hat


def stability_probe(
    config: SimConfig,
    ray,
    scales,
    *,
    seeds: int = 5,
    window: int = 100_000,
    slope_threshold: float = 1e-3,
    workers: Optional[int] = None,
    engine: str = "counts",
) -> list:
    """Classify each scaled ray as bounded or growing via a windowed-mean
    slope test, majority-voted across seeded runs."""
    from .regions import outer_bound_margin

    margin = outer_bound_margin(ray, config.erasure)
    if margin <= 0:
        raise ConfigError("ray has zero margin; nothing to scale")
    base = tuple(r / margin for r in ray)
    tasks = []
    for scale in scales:
        rates = tuple(float(scale * b) for b in base)
        if any(r > 1 for r in rates):
            raise ConfigError(f"scaled rate above 1 at scale {scale}")
        for k in range(seeds):
            tasks.append(
                (
                    config.n_users,
                    config.erasure,
                    rates,
                    config.restriction,
                    config.policy,
                    config.retransmit_mode,
                    config.flush_on_empty,
                    engine,
                    f"{config.seed}/probe/{scale}/{k}",
                    window,
                )
            )
    n_workers = worker_count(workers, len(tasks))
    if n_workers == 1:
        outcomes = [_probe_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            outcomes = list(pool.map(_probe_task, tasks))
    reports = []
    for si, scale in enumerate(scales):
        chunk = outcomes[si * seeds : (si + 1) * seeds]
        slopes = [(late - early) / window for early, late, _ in chunk]
        verdicts = [
            "bounded" if slope < slope_threshold else "growing"
            for slope in slopes
        ]
        bounded = verdicts.count("bounded")
        growing = verdicts.count("growing")
        if bounded > growing:
            overall = "bounded"
        elif growing > bounded:
            overall = "growing"
        else:
            overall = "inconclusive"
        reports.append(
            {
                "scale": scale,
                "rates": tuple(float(scale * b) for b in base),
                "slopes": slopes,
                "max_q": max(m for _, _, m in chunk),
                "verdicts": verdicts,
                "verdict": overall,
            }
        )
    return reports


def summarize(result: RunResult) -> dict:
    """JSON-ready digest of one run."""
    config = result.config
    return {
        "n_users": config.n_users,
        "horizon": config.horizon,
        "engine": config.engine,
        "policy": config.policy,
        "restriction": config.restriction,
        "seed": str(config.seed),
        "arrivals_total": list(result.arrivals_total),
        "delivered_total": list(result.delivered_total),
        "final_q_hat": result.final_q_hat,
        "final_v_hat": result.final_v_hat,
        "max_q_hat": result.max_q_hat,
        "max_v_hat": result.max_v_hat,
        "overhead_hist": {str(k): v for k, v in sorted(result.overhead_hist.items())},
        "max_stored_by_level": {
            str(k): v for k, v in sorted(result.max_stored_by_level.items())
        },
        "max_exit_by_level": {
            str(k): v for k, v in sorted(result.max_exit_by_level.items())
        },
        "flush_slots": result.flush_slots,
        "idle_slots": result.idle_slots,
    }
