"""Slab decomposition along ``x`` with halo exchange between in-process workers.

Each worker owns a contiguous range of ``x`` columns.  A step collides the
owned nodes, ships the densities that leave the slab to the neighbouring
worker, and streams on a local grid that is one halo column wider on each
side.  Every velocity component is at most 1 in magnitude, so one halo column
per face is enough.  Reverse streaming (adjoint) crosses the interfaces the
other way and therefore uses the transposed exchange plan.

Workers run in threads and talk only through :class:`QueueTransport`
channels; a coordinator gathers residuals (and, on request, the full field)
once per step, which doubles as the lock-step barrier.
"""

from __future__ import annotations

import csv
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .adjoint import Linearization
from .collision import ModelSpec, _w_array, plan_for
from .errors import ConfigurationError, DivergenceError, ProtocolError
from .lattice import LatticeShape, NodeTagMap, reverse_stream, stream
from .objective import ObjectiveSpec, objective_partials

COORDINATOR = -1


@dataclass
class Subdomain:
    """Owned slab ``[x0, x1)`` of the global lattice plus its halo-extended buffer."""

    owner: int
    x0: int
    x1: int
    shape: LatticeShape
    left: int
    right: int
    f: np.ndarray | None = None
    ext: np.ndarray | None = None
    step: int = 0
    timings: dict = field(default_factory=lambda: {"compute": 0.0, "exchange": 0.0})

    @property
    def nx(self):
        return self.x1 - self.x0

    @property
    def local_shape(self):
        return LatticeShape(self.nx, self.shape.Ly, self.shape.Lz)

    @property
    def ext_shape(self):
        return LatticeShape(self.nx + 2, self.shape.Ly, self.shape.Lz)

    @property
    def nodes(self):
        """Global flat indices of the owned nodes in local order."""
        s = self.shape
        lx, y, z = self.local_shape.coords()
        return (self.x0 + lx) + s.Lx * (y + s.Ly * z)

    @property
    def owned_in_ext(self):
        """Flat positions of the owned nodes inside the extended buffer."""
        e = self.ext_shape
        lx, y, z = self.local_shape.coords()
        return (lx + 1) + e.Lx * (y + e.Ly * z)

    def column(self, lx, extended=False):
        """Flat indices of local column ``lx`` (owned numbering or extended numbering)."""
        s = self.ext_shape if extended else self.local_shape
        y = np.tile(np.arange(s.Ly), s.Lz)
        z = np.repeat(np.arange(s.Lz), s.Ly)
        return (lx + s.Lx * (y + s.Ly * z)).astype(np.int64)


def decompose(shape: LatticeShape, n_parts: int):
    """Contiguous ``x`` slabs whose widths differ by at most one (wider slabs first)."""
    if n_parts < 1:
        raise ConfigurationError("need at least one part")
    if n_parts > shape.Lx:
        raise ConfigurationError(f"cannot split {shape.Lx} columns into {n_parts} slabs")
    base, extra = divmod(shape.Lx, n_parts)
    subs = []
    x0 = 0
    for k in range(n_parts):
        width = base + (1 if k < extra else 0)
        subs.append(Subdomain(k, x0, x0 + width, shape, (k - 1) % n_parts, (k + 1) % n_parts))
        x0 += width
    return subs


@dataclass(frozen=True)
class Route:
    """Densities ``densities`` of ``src`` nodes ``src_nodes`` (owned numbering)
    land in ``dst`` extended-buffer slots ``dst_nodes``."""

    src: int
    dst: int
    densities: tuple
    src_nodes: np.ndarray
    dst_nodes: np.ndarray

    @property
    def slots(self):
        return len(self.densities) * len(self.src_nodes)


class ExchangePlan:
    """Per-neighbour send/receive lists for the densities that cross slab faces."""

    def __init__(self, subdomains, velocities, routes=None):
        self.subdomains = list(subdomains)
        self.velocities = np.asarray(velocities)
        if routes is None:
            routes = self._forward_routes()
        self.routes = routes

    def _forward_routes(self):
        subs = self.subdomains
        if len(subs) == 1:
            return []
        ex = self.velocities[:, 0]
        right_going = tuple(int(j) for j in np.flatnonzero(ex > 0))
        left_going = tuple(int(j) for j in np.flatnonzero(ex < 0))
        routes = []
        for s in subs:
            r, l_ = subs[s.right], subs[s.left]
            routes.append(Route(s.owner, r.owner, right_going, s.column(s.nx - 1), r.column(0, extended=True)))
            routes.append(Route(s.owner, l_.owner, left_going, s.column(0), l_.column(l_.nx + 1, extended=True)))
        return routes

    def transposed(self):
        """Plan for reverse streaming: every route runs backwards across its face."""
        subs = self.subdomains
        out = []
        for r in self.routes:
            a, b = subs[r.src], subs[r.dst]
            went_right = bool(np.all(r.dst_nodes % b.ext_shape.Lx == 0))
            if went_right:
                # a's last column fed b's left halo -> b's first column feeds a's right halo
                out.append(Route(b.owner, a.owner, r.densities, b.column(0), a.column(a.nx + 1, extended=True)))
            else:
                out.append(Route(b.owner, a.owner, r.densities, b.column(b.nx - 1), a.column(0, extended=True)))
        return ExchangePlan(subs, self.velocities, out)

    def sends(self, owner):
        return [r for r in self.routes if r.src == owner]

    def receives(self, owner):
        return [r for r in self.routes if r.dst == owner]

    @property
    def slots_per_step(self):
        return sum(r.slots for r in self.routes)

    def check(self):
        """Every route's source and destination slabs agree on the interface size."""
        for r in self.routes:
            if len(r.src_nodes) != len(r.dst_nodes):
                raise ProtocolError(f"route {r.src}->{r.dst}: {len(r.src_nodes)} sources vs {len(r.dst_nodes)} slots")
        return self


class QueueTransport:
    """Paired FIFO channels between workers; each message carries its step number."""

    def __init__(self, timeout=60.0):
        self._channels = {}
        self._lock = threading.Lock()
        self.timeout = timeout
        self.messages = 0

    def _chan(self, src, dst, tag):
        key = (src, dst, tag)
        with self._lock:
            ch = self._channels.get(key)
            if ch is None:
                ch = self._channels[key] = queue.Queue()
            return ch

    def send(self, src, dst, step, payload, tag=0):
        self._chan(src, dst, tag).put((step, payload))
        self.messages += 1

    def recv(self, dst, src, step, tag=0):
        try:
            got_step, payload = self._chan(src, dst, tag).get(timeout=self.timeout)
        except queue.Empty:
            raise ProtocolError(f"worker {dst}: no message from {src} for step {step}") from None
        if got_step != step:
            raise ProtocolError(f"worker {dst}: message from {src} is for step {got_step}, expected {step}")
        return payload


def send_halos(sub: Subdomain, plan: ExchangePlan, transport, step, values):
    for r in plan.sends(sub.owner):
        transport.send(sub.owner, r.dst, step, values[np.ix_(r.densities, r.src_nodes)].copy(), tag=_route_tag(plan, r))


def receive_halos(sub: Subdomain, plan: ExchangePlan, transport, step):
    for r in plan.receives(sub.owner):
        payload = transport.recv(sub.owner, r.src, step, tag=_route_tag(plan, r))
        sub.ext[np.ix_(r.densities, r.dst_nodes)] = payload


def _route_tag(plan, route):
    # two routes may join the same pair of workers (two slabs); tell them apart
    return (route.densities, int(route.dst_nodes[0]))


def exchange_halos(subdomains, plan: ExchangePlan, step=None, transport=None):
    """Synchronous exchange: every slab posts its boundary densities, then every
    slab fills its halo.  Slabs must all be at the same step."""
    steps = {s.step for s in subdomains}
    if len(steps) != 1:
        raise ProtocolError(f"halo exchange across different steps {sorted(steps)}")
    step = steps.pop() if step is None else step
    transport = transport or QueueTransport(timeout=1.0)
    for s in subdomains:
        send_halos(s, plan, transport, step, s.ext[:, s.owned_in_ext])
    for s in subdomains:
        receive_halos(s, plan, transport, step)


# ---------------------------------------------------------------------------
# workers
# ---------------------------------------------------------------------------


class _Worker:
    """Owns one slab: local tags, design slice and the local kernels."""

    def __init__(self, sub: Subdomain, model: ModelSpec, tags: NodeTagMap, design, f0):
        self.sub = sub
        self.model = model
        nodes = sub.nodes
        self.tags = tags.subset(nodes, sub.local_shape)
        self.w = _w_array(design, tags.shape.n_nodes)[nodes].copy()
        self.plan = plan_for(model, self.tags)
        sub.f = np.ascontiguousarray(f0[:, nodes], dtype=float)
        sub.ext = np.zeros((f0.shape[0], sub.ext_shape.n_nodes))
        self.owned = sub.owned_in_ext

    def stream_local(self, post, plan, transport, step, reverse=False):
        sub = self.sub
        t0 = time.perf_counter()
        if plan.routes:
            send_halos(sub, plan, transport, step, post)
            sub.ext[:, self.owned] = post
            receive_halos(sub, plan, transport, step)
            t1 = time.perf_counter()
            op = reverse_stream if reverse else stream
            new = op(sub.ext, self.model.velocities, sub.ext_shape)[:, self.owned]
        else:
            t1 = time.perf_counter()
            op = reverse_stream if reverse else stream
            new = op(post, self.model.velocities, sub.local_shape)
        sub.timings["exchange"] += t1 - t0
        return new


def _run(workers, body, n_steps, tol, gather, callback, transport):
    """Coordinator loop shared by primal and adjoint runs."""
    errors = []
    stop_flags = {}

    def worker_main(wk):
        try:
            for step in range(n_steps):
                res = body(wk, step)
                wk.sub.step = step + 1
                transport.send(wk.sub.owner, COORDINATOR, step, (res, wk.sub.f if gather else None), tag="res")
                if transport.recv(wk.sub.owner, COORDINATOR, step, tag="go") == "stop":
                    break
        except Exception as exc:  # surfaced by the coordinator
            errors.append(exc)
            transport.send(wk.sub.owner, COORDINATOR, -1, (exc, None), tag="res")

    threads = [threading.Thread(target=worker_main, args=(wk,), daemon=True) for wk in workers]
    for t in threads:
        t.start()
    n_done = 0
    res = np.inf
    for step in range(n_steps):
        parts = []
        for wk in workers:
            got = transport._chan(wk.sub.owner, COORDINATOR, "res").get(timeout=transport.timeout)
            if got[0] == -1:
                for other in workers:
                    transport.send(COORDINATOR, other.sub.owner, step, "stop", tag="go")
                raise got[1][0]
            if got[0] != step:
                raise ProtocolError(f"coordinator: worker {wk.sub.owner} reported step {got[0]}, expected {step}")
            parts.append(got[1])
        res = max(p[0] for p in parts)
        n_done = step + 1
        if gather and callback is not None:
            callback(step, _assemble(workers, [p[1] for p in parts]))
        done = tol is not None and res < tol
        for wk in workers:
            transport.send(COORDINATOR, wk.sub.owner, step, "stop" if done or step + 1 == n_steps else "go", tag="go")
        if done:
            stop_flags["converged"] = True
            break
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return n_done, res, bool(stop_flags.get("converged"))


def _assemble(workers, parts):
    n = workers[0].sub.shape.n_nodes
    out = np.empty((parts[0].shape[0], n))
    for wk, p in zip(workers, parts):
        out[:, wk.sub.nodes] = p
    return out


@dataclass
class PartitionResult:
    field: np.ndarray
    iterations: int
    residual: float
    converged: bool
    timings: list
    seconds: float
    slots_per_step: int


def partitioned_fixed_point(
    case_or_f0,
    n_parts,
    design=None,
    model: ModelSpec | None = None,
    tags: NodeTagMap | None = None,
    n_steps=1000,
    tol=None,
    callback=None,
    transport=None,
):
    """Primal iteration on ``n_parts`` slabs; equals the monolithic iteration step for step.

    Pass either a :class:`~adjlbm.cases.Case` (its initial state is used) or
    an initial field plus ``design``, ``model`` and ``tags``.  ``callback(step,
    f)`` receives the gathered global field after every step.  With ``tol``
    the run stops once the global max-norm update drops below it.
    """
    f0, design, model, tags = _unpack(case_or_f0, design, model, tags)
    subs = decompose(tags.shape, n_parts)
    plan = ExchangePlan(subs, model.velocities).check()
    transport = transport or QueueTransport()
    workers = [_Worker(s, model, tags, design, f0) for s in subs]

    def body(wk, step):
        sub = wk.sub
        t0 = time.perf_counter()
        post = wk.plan.collide(sub.f, wk.w)
        sub.timings["compute"] += time.perf_counter() - t0
        new = wk.stream_local(post, plan, transport, step)
        if not np.isfinite(new).all():
            raise DivergenceError(f"non-finite densities in slab {sub.owner} at step {step}", iteration=step)
        res = float(np.max(np.abs(new - sub.f)))
        sub.f = new
        return res

    t0 = time.perf_counter()
    n, res, conv = _run(workers, body, n_steps, tol, callback is not None, callback, transport)
    seconds = time.perf_counter() - t0
    return PartitionResult(
        _assemble(workers, [w.sub.f for w in workers]), n, res, conv,
        [dict(w.sub.timings) for w in workers], seconds, plan.slots_per_step,
    )


def partitioned_adjoint(
    f_hat,
    n_parts,
    design,
    model: ModelSpec,
    tags: NodeTagMap,
    objective: ObjectiveSpec,
    v0=None,
    n_steps=1000,
    tol=None,
    callback=None,
    transport=None,
    cache=False,
):
    """Adjoint iteration on ``n_parts`` slabs using the transposed exchange plan."""
    subs = decompose(tags.shape, n_parts)
    plan = ExchangePlan(subs, model.velocities).check().transposed().check()
    transport = transport or QueueTransport()
    v_init = np.zeros_like(f_hat) if v0 is None else v0
    workers = [_Worker(s, model, tags, design, v_init) for s in subs]
    partials = objective_partials(objective, f_hat, model)
    for wk in workers:
        nodes = wk.sub.nodes
        wk.f_hat = f_hat[:, nodes].copy()
        wk.partials = partials[:, nodes]
        wk.lin = Linearization(wk.f_hat, wk.w, model, wk.tags) if cache else None

    def body(wk, step):
        sub = wk.sub
        t0 = time.perf_counter()
        lin = wk.lin or Linearization(wk.f_hat, wk.w, model, wk.tags)
        pre, _, _ = lin.vjp(sub.f)
        pre += wk.partials
        sub.timings["compute"] += time.perf_counter() - t0
        new = wk.stream_local(pre, plan, transport, step, reverse=True)
        res = float(np.max(np.abs(new - sub.f)))
        sub.f = new
        return res

    t0 = time.perf_counter()
    n, res, conv = _run(workers, body, n_steps, tol, callback is not None, callback, transport)
    seconds = time.perf_counter() - t0
    return PartitionResult(
        _assemble(workers, [w.sub.f for w in workers]), n, res, conv,
        [dict(w.sub.timings) for w in workers], seconds, plan.slots_per_step,
    )


def _unpack(case_or_f0, design, model, tags):
    if hasattr(case_or_f0, "tags") and hasattr(case_or_f0, "model"):
        c = case_or_f0
        return c.initial_state(), c.design, c.model, c.tags
    if model is None or tags is None:
        raise ConfigurationError("pass a Case or an initial field with model and tags")
    return np.asarray(case_or_f0, dtype=float), design, model, tags


# ---------------------------------------------------------------------------
# timing
# ---------------------------------------------------------------------------


def step_rates(case, n_parts, n_steps=200, f_hat=None):
    """Measured primal and adjoint steps per second on ``n_parts`` workers."""
    f0 = case.initial_state() if f_hat is None else f_hat
    p = partitioned_fixed_point(f0, n_parts, case.design, case.model, case.tags, n_steps=n_steps)
    a = partitioned_adjoint(p.field, n_parts, case.design, case.model, case.tags, case.objective, n_steps=n_steps)
    primal = p.iterations / p.seconds
    adjoint = a.iterations / a.seconds
    return primal, adjoint


def scaling_report(case, workers=(1, 2, 4), n_steps=200, path=None):
    """Rows ``(workers, primal_steps_per_sec, adjoint_steps_per_sec, ratio)``; optionally written as CSV.

    Workers share one interpreter, so on a single core the rates mostly show
    the exchange overhead rather than a speedup.
    """
    rows = []
    for n in workers:
        primal, adjoint = step_rates(case, n, n_steps)
        rows.append((n, primal, adjoint, primal / adjoint))
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["workers", "primal_steps_per_sec", "adjoint_steps_per_sec", "ratio"])
            for r in rows:
                w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
    return rows
