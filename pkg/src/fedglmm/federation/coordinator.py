"""Central server: runs the outer Newton loop over site summaries.

SNPs are processed in batches that move in lock-step. In every round the
coordinator sends one GLOBAL_UPDATE per active SNP to every site, waits for
all the matching LOCAL_STATS (the barrier), sums them in site-id order and
advances each SNP's :class:`~fedglmm.fitting.NewtonLoop`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..exceptions import ConfigurationError, ParameterError, ProtocolError, TransportError
from ..fitting import (
    DEFAULT_MAX_ITER,
    DEFAULT_SIGMA2_INIT,
    DEFAULT_TOL,
    Aggregate,
    NewtonLoop,
    sum_local_stats,
)
from ..glmm import AssocResult
from . import messages as M
from .masking import compensator_unmask

log = logging.getLogger(__name__)

SITE_FAILURE_POLICIES = ("fail-fast", "quorum")


@dataclass
class FederationConfig:
    """Run settings shared by the coordinator and, through INIT, the sites."""

    k: int
    tol: float = DEFAULT_TOL
    max_outer_iterations: int = DEFAULT_MAX_ITER
    masking_enabled: bool = False
    sigma2_init: float = DEFAULT_SIGMA2_INIT
    noise_sd: float = 1.0
    batch_size: int = 64
    fix_sigma2: bool = False
    site_failure: str = "fail-fast"
    compensator_timeout: float = 30.0
    transport: str = "inprocess"

    def __post_init__(self):
        if self.k < 1:
            raise ParameterError(f"k must be >= 1, got {self.k}")
        if not self.tol > 0:
            raise ParameterError(f"tol must be positive, got {self.tol}")
        if self.max_outer_iterations < 1 or self.batch_size < 1:
            raise ParameterError("max_outer_iterations and batch_size must be >= 1")
        if self.site_failure not in SITE_FAILURE_POLICIES:
            raise ParameterError(f"site_failure must be one of {SITE_FAILURE_POLICIES}")
        if self.masking_enabled and not self.noise_sd > 0:
            raise ParameterError("noise_sd must be positive when masking is enabled")


def aggregate(stats) -> Aggregate:
    """Sum k LocalStats in the given order; see :func:`sum_local_stats`."""
    return sum_local_stats(list(stats))


@dataclass
class _Slot:
    snp_id: str
    loop: NewtonLoop
    last: Aggregate | None = None
    failed: str = ""
    pending: list = field(default_factory=list)


class _SiteFailures(Exception):
    def __init__(self, errors):
        super().__init__(errors)
        self.errors = errors


def _failed_result(snp_id, iteration, status) -> AssocResult:
    nan = math.nan
    return AssocResult(snp_id, nan, nan, nan, nan, iteration, False, nan, status)


class Coordinator:
    """Drives a scan over already-connected site channels.

    ``channels`` must expose ``send``, ``recv`` and a ``hello`` attribute
    holding the site's HELLO message. They are put in site-id order, which
    fixes the summation order of every aggregate.
    """

    def __init__(self, config: FederationConfig, channels, compensator=None):
        self.config = config
        channels = list(channels)
        if len(channels) != config.k:
            raise ConfigurationError(f"expected {config.k} sites, got {len(channels)}")
        ids = [ch.hello["site_id"] for ch in channels]
        if len(set(ids)) != len(ids):
            raise ConfigurationError(f"duplicate site ids {ids}")
        order = sorted(range(len(ids)), key=lambda i: ids[i])
        self.channels = [channels[i] for i in order]
        self.site_ids = [ids[i] for i in order]
        if config.masking_enabled and compensator is None:
            raise ConfigurationError("masking needs a compensator")
        self.compensator = compensator
        self.sample_sizes: list[int] = []
        self.rounds = 0

    def default_snp_ids(self) -> list:
        """Variants every site announced, in the first site's order."""
        first = list(self.channels[0].hello.get("variant_ids", []))
        common = set(first)
        for ch in self.channels[1:]:
            common &= set(ch.hello.get("variant_ids", []))
        return [v for v in first if v in common]

    # protocol pieces ---------------------------------------------------------

    def _recv(self, ch, expected):
        msg = ch.recv()
        if msg["type"] == "ERROR":
            kind = msg.get("kind", "protocol")
            text = f"site {ch.name}: {msg['message']}"
            if kind == "configuration":
                raise ConfigurationError(text)
            if kind == "numerical" and expected == "LOCAL_STATS":
                return msg
            raise ProtocolError(text)
        if msg["type"] != expected:
            raise ProtocolError(f"site {ch.name}: expected {expected}, got line "
                                f"{M.encode(msg).decode().strip()[:200]!r}")
        return msg

    def initialize(self, p: int, snp_ids) -> None:
        c = self.config
        init = M.init(p, snp_ids, c.masking_enabled, c.noise_sd, c.tol)
        for ch in self.channels:
            ch.send(init)
        sizes = []
        for ch in self.channels:
            ack = self._recv(ch, "INIT_ACK")
            if ack["p"] != p:
                raise ConfigurationError(f"site {ch.name} acknowledged p={ack['p']}, not {p}")
            sizes.append(ack["n"])
        self.sample_sizes = sizes

    def _new_loop(self, p):
        c = self.config
        return NewtonLoop(p + 1, len(self.channels), tol=c.tol,
                          max_iter=c.max_outer_iterations, sigma2_init=c.sigma2_init,
                          fix_sigma2=c.fix_sigma2)

    def _round(self, slots, p):
        """One barrier round for every unfinished slot of a batch."""
        active = [s for s in slots if not s.loop.done and not s.failed]
        dead = {}
        for s in active:
            beta, sigma2 = s.loop.point
            if s.last is None:
                g, H = np.zeros(p + 1), np.zeros((p + 1, p + 1))
            else:
                g, H = s.last.gradient, s.last.hessian
            msg = M.global_update(s.snp_id, beta, sigma2, s.loop.iteration + 1, g, H)
            for ch in self.channels:
                if ch.name in dead:
                    continue
                try:
                    ch.send(msg)
                except TransportError as exc:
                    dead[ch.name] = exc
        for s in active:
            s.pending = []
        for ch in self.channels:
            if ch.name in dead:
                continue
            # keep reading the other sites so their channels stay in sync
            for s in active:
                try:
                    msg = self._recv(ch, "LOCAL_STATS")
                except TransportError as exc:
                    dead[ch.name] = exc
                    break
                if msg["snp_id"] != s.snp_id:
                    raise ProtocolError(f"site {ch.name}: LOCAL_STATS for "
                                        f"{msg['snp_id']!r} while waiting for {s.snp_id!r}")
                if msg["type"] == "ERROR":
                    s.failed = "numerical_error"
                    continue
                if msg["iteration"] != s.loop.iteration + 1:
                    raise ProtocolError(f"site {ch.name}: stale round {msg['iteration']} "
                                        f"for {s.snp_id!r}")
                s.pending.append(msg)
        if dead:
            raise _SiteFailures(dead)
        self.rounds += 1
        for s in active:
            if s.failed:
                continue
            stats = [M.parse_local_stats(m) for m in s.pending]
            if self.config.masking_enabled:
                agg = sum_local_stats(stats, keep_sites=False)
                it = s.loop.iteration + 1
                rec = self.compensator.release(s.snp_id, it,
                                               timeout=self.config.compensator_timeout)
                agg = compensator_unmask(agg, [rec], [m["noise_id"] for m in s.pending])
            else:
                agg = sum_local_stats(stats)
            s.last = agg
            s.loop.observe(agg)
            s.pending = []

    def _finalize(self, s: _Slot) -> AssocResult:
        if s.failed:
            res = _failed_result(s.snp_id, s.loop.iteration, s.failed)
        else:
            res = s.loop.result(s.snp_id)
        msg = M.finalize(res)
        for ch in self.channels:
            ch.send(msg)
        return res

    def _drop_site(self, name):
        log.warning("dropping site %s; continuing with %d sites", name,
                    len(self.channels) - 1)
        i = [ch.name for ch in self.channels].index(name)
        del self.channels[i]
        del self.site_ids[i]
        if self.compensator is not None and hasattr(self.compensator, "drop_site"):
            self.compensator.drop_site()
        if not self.channels:
            raise TransportError("every site has failed", site=name)

    def run(self, snp_ids=None, p=None) -> list[AssocResult]:
        """Scan ``snp_ids`` (default: variants common to all sites)."""
        snp_ids = self.default_snp_ids() if snp_ids is None else list(snp_ids)
        if len(set(snp_ids)) != len(snp_ids):
            raise ParameterError("snp_ids must be unique")
        if p is None:
            raise ParameterError("the number of covariates p must be given")
        if p < 0:
            raise ParameterError(f"p must be >= 0, got {p}")
        if not snp_ids:
            return []
        self.initialize(p, snp_ids)
        results = []
        bs = self.config.batch_size
        for start in range(0, len(snp_ids), bs):
            slots = [_Slot(snp, self._new_loop(p)) for snp in snp_ids[start:start + bs]]
            while any(not s.loop.done and not s.failed for s in slots):
                try:
                    self._round(slots, p)
                except _SiteFailures as failures:
                    first = next(iter(failures.errors.values()))
                    if self.config.site_failure != "quorum":
                        raise first from None
                    for name in failures.errors:
                        self._drop_site(name)
                    for s in slots:
                        if not s.loop.done:
                            s.failed = "aborted"
            results.extend(self._finalize(s) for s in slots)
        return results

    def shutdown(self):
        for ch in self.channels:
            try:
                ch.send(M.shutdown())
            except TransportError:
                pass


def coordinator_run(config: FederationConfig, channels, snp_ids=None, *, p,
                    compensator=None) -> list[AssocResult]:
    """Run a full scan and shut the sites down afterwards, even on error."""
    coord = Coordinator(config, channels, compensator)
    try:
        return coord.run(snp_ids, p)
    finally:
        coord.shutdown()


def run_inprocess(workers, snp_ids=None, *, config: FederationConfig | None = None,
                  compensator=None, counting=False):
    """Federated scan with every site in this process (loopback transport).

    Returns ``(results, channels)``; with ``counting=True`` the channels
    are :class:`~fedglmm.federation.transport.CountingChannel` instances.
    """
    from .masking import Compensator
    from .transport import CountingChannel, LoopbackChannel

    workers = list(workers)
    config = config or FederationConfig(k=len(workers))
    if config.masking_enabled and compensator is None:
        compensator = Compensator(len(workers))
        for w in workers:
            w.compensator = compensator
    channels = [LoopbackChannel(w) for w in workers]
    if counting:
        channels = [CountingChannel(ch) for ch in channels]
    ps = {w.p for w in workers}
    if len(ps) != 1:
        raise ConfigurationError(f"sites disagree on the number of covariates: {sorted(ps)}")
    results = coordinator_run(config, channels, snp_ids, p=ps.pop(), compensator=compensator)
    return results, channels
