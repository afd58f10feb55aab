"""Additive Gaussian masking of site summaries with a separate compensator.

A site adds zero-mean noise to every real field of its LocalStats before
sending it to the coordinator, and sends the noise itself to the
compensator. The compensator only ever releases the *sum* of all sites'
noise for a round, so the coordinator can recover the aggregate but no
single site's values.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, replace

import numpy as np

from ..exceptions import ParameterError, ProtocolError
from ..fitting import Aggregate
from ..glmm import LocalStats
from .messages import NoiseRecord


@dataclass(frozen=True)
class MaskedStats:
    stats: LocalStats
    noise_id: str


def _sym_noise(rng, sd, m):
    upper = rng.normal(0.0, sd, size=(m, m))
    upper = np.triu(upper)
    return upper + np.triu(upper, 1).T


def mask_local_stats(stats: LocalStats, rng: np.random.Generator, noise_sd: float,
                     noise_id: str = "", site_id: str = "", iteration: int = 0):
    """Return ``(MaskedStats, NoiseRecord)`` with ``masked = stats + noise``.

    The Hessian noise is symmetric so the masked Hessian stays symmetric.
    """
    if not noise_sd > 0:
        raise ParameterError(f"noise_sd must be positive, got {noise_sd}")
    m = stats.gradient.size
    noise = LocalStats(
        snp_id=stats.snp_id,
        n=float(rng.normal(0.0, noise_sd)),
        gradient=rng.normal(0.0, noise_sd, size=m),
        hessian=_sym_noise(rng, noise_sd, m),
        mu_hat=float(rng.normal(0.0, noise_sd)),
        mu_curvature=float(rng.normal(0.0, noise_sd)),
        local_se=rng.normal(0.0, noise_sd, size=m),
        laplace_loglik=float(rng.normal(0.0, noise_sd)),
        sigma2_moment=float(rng.normal(0.0, noise_sd)),
    )
    masked = replace(
        stats,
        n=stats.n + noise.n,
        gradient=stats.gradient + noise.gradient,
        hessian=stats.hessian + noise.hessian,
        mu_hat=stats.mu_hat + noise.mu_hat,
        mu_curvature=stats.mu_curvature + noise.mu_curvature,
        local_se=stats.local_se + noise.local_se,
        laplace_loglik=stats.laplace_loglik + noise.laplace_loglik,
        sigma2_moment=stats.sigma2_moment + noise.sigma2_moment,
    )
    record = NoiseRecord(noise_id, stats.snp_id, iteration, site_id, noise)
    return MaskedStats(masked, noise_id), record


def unmask_record(masked: LocalStats, noise: LocalStats) -> LocalStats:
    """Per-field ``masked - noise``; the additive inverse of masking."""
    return replace(
        masked,
        n=masked.n - noise.n,
        gradient=masked.gradient - noise.gradient,
        hessian=masked.hessian - noise.hessian,
        mu_hat=masked.mu_hat - noise.mu_hat,
        mu_curvature=masked.mu_curvature - noise.mu_curvature,
        local_se=masked.local_se - noise.local_se,
        laplace_loglik=masked.laplace_loglik - noise.laplace_loglik,
        sigma2_moment=masked.sigma2_moment - noise.sigma2_moment,
    )


def sum_noise(records) -> LocalStats:
    records = list(records)
    total = records[0].values
    for r in records[1:]:
        v = r.values
        total = replace(
            total,
            n=total.n + v.n,
            gradient=total.gradient + v.gradient,
            hessian=total.hessian + v.hessian,
            mu_hat=total.mu_hat + v.mu_hat,
            mu_curvature=total.mu_curvature + v.mu_curvature,
            local_se=total.local_se + v.local_se,
            laplace_loglik=total.laplace_loglik + v.laplace_loglik,
            sigma2_moment=total.sigma2_moment + v.sigma2_moment,
        )
    return total


def compensator_unmask(masked_sum: Aggregate, noise_records, expected_ids) -> Aggregate:
    """Subtract the summed noise from a masked aggregate.

    ``noise_records`` may be the individual site submissions or a single
    pre-summed record whose ``noise_id`` joins all ids with ``;``. Refuses
    to unmask unless the noise ids cover ``expected_ids`` exactly.
    """
    noise_records = list(noise_records)
    got = []
    for r in noise_records:
        got.extend(i for i in r.noise_id.split(";") if i)
    expected = list(expected_ids)
    if sorted(got) != sorted(expected):
        missing = sorted(set(expected) - set(got))
        raise ProtocolError(
            f"refusing to unmask {masked_sum.snp_id!r}: noise submissions missing for "
            f"{missing or 'unexpected ids ' + str(sorted(set(got) - set(expected)))}"
        )
    N = sum_noise(noise_records)
    return replace(
        masked_sum,
        n_total=masked_sum.n_total - N.n,
        gradient=masked_sum.gradient - N.gradient,
        hessian=masked_sum.hessian - N.hessian,
        mu_sum=masked_sum.mu_sum - N.mu_hat,
        moment_sum=masked_sum.moment_sum - N.sigma2_moment,
        laplace_loglik=masked_sum.laplace_loglik - N.laplace_loglik,
        mu_hats=None,
        mu_curvatures=None,
    )


class Compensator:
    """Collects site noise and releases only per-round sums.

    Thread-safe; :meth:`release` can block until all ``k`` submissions for a
    round have arrived when ``timeout`` is given.
    """

    def __init__(self, k: int):
        self.k = k
        self._pending: dict[tuple, list[NoiseRecord]] = {}
        self._cond = threading.Condition()

    def submit(self, record: NoiseRecord) -> None:
        key = (record.snp_id, record.iteration)
        with self._cond:
            bucket = self._pending.setdefault(key, [])
            if any(r.site_id == record.site_id for r in bucket):
                raise ProtocolError(
                    f"duplicate noise from site {record.site_id!r} for {key}"
                )
            bucket.append(record)
            self._cond.notify_all()

    def release(self, snp_id, iteration, timeout=None) -> NoiseRecord:
        key = (snp_id, iteration)
        with self._cond:
            if timeout:
                self._cond.wait_for(
                    lambda: len(self._pending.get(key, ())) >= self.k, timeout=timeout
                )
            bucket = self._pending.get(key, [])
            if len(bucket) != self.k:
                raise ProtocolError(
                    f"compensator has {len(bucket)} of {self.k} noise submissions for "
                    f"{snp_id!r} round {iteration}; refusing to release"
                )
            del self._pending[key]
        bucket.sort(key=lambda r: r.site_id)
        ids = [r.noise_id for r in bucket]
        return NoiseRecord(";".join(ids), snp_id, iteration, "", sum_noise(bucket))

    def drop_site(self):
        with self._cond:
            self.k -= 1
