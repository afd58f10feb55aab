"""Site worker: holds individual-level data and answers coordinator rounds."""

from __future__ import annotations

import logging
import warnings
import zlib

import numpy as np

from ..containers import CovariateMatrix, GenotypeMatrix
from ..exceptions import (
    ConfigurationError,
    ConvergenceError,
    FedGLMMError,
    ParameterError,
    ProtocolError,
    TransportError,
)
from ..glmm import SiteData, compute_site_stats
from . import messages as M
from .masking import mask_local_stats

log = logging.getLogger(__name__)


class SiteWorker:
    """One participating site.

    Parameters
    ----------
    site_id : str
    genotypes : GenotypeMatrix
        Imputed dosages (no missing values) for this site's samples.
    covariates : CovariateMatrix or ndarray of shape (n, p) or None
        Projection covariates, computed once before any round.
    phenotype : array of shape (n,)
        Case/control status in {0, 1}; NaN marks an unphenotyped sample,
        which is dropped with a warning.
    seed : int
        Seeds the masking noise.
    compensator : object with ``submit(record)`` or None
        Where noise goes when the coordinator enables masking.
    """

    def __init__(self, site_id, genotypes: GenotypeMatrix, covariates, phenotype, *,
                 token="", seed=0, compensator=None):
        if genotypes.has_missing:
            raise ParameterError(f"site {site_id}: impute genotypes before serving")
        y = np.asarray(phenotype, dtype=np.float64).ravel()
        if y.size != genotypes.n_samples:
            raise ParameterError(
                f"site {site_id}: {y.size} phenotypes for {genotypes.n_samples} samples"
            )
        if isinstance(covariates, CovariateMatrix):
            if covariates.sample_ids != genotypes.sample_ids:
                covariates = covariates.reorder(genotypes.sample_ids)
            C = covariates.by_sample()
        elif covariates is None:
            C = np.empty((y.size, 0))
        else:
            C = np.asarray(covariates, dtype=np.float64).reshape(y.size, -1)
        keep = ~np.isnan(y)
        if not keep.all():
            warnings.warn(f"site {site_id}: dropping {int((~keep).sum())} samples "
                          "with missing phenotype", stacklevel=2)
        self.site_id = str(site_id)
        self.token = token
        self._dosages = genotypes.dosages[:, keep]
        self._row = {v: i for i, v in enumerate(genotypes.variant_ids)}
        self.variant_ids = list(genotypes.variant_ids)
        self._covariates = C[keep]
        self._y = y[keep]
        self._seed = seed
        self._rng = None
        self.compensator = compensator

        self.config = None
        self._mu = {}
        self.results: dict[str, dict] = {}
        self.closed = False
        self.completed = False
        self.fatal = None

    @property
    def n(self) -> int:
        return int(self._y.size)

    @property
    def p(self) -> int:
        return int(self._covariates.shape[1])

    def hello(self):
        return M.hello(self.site_id, self.token, self.variant_ids)

    def site_data(self, snp_id) -> SiteData:
        X = np.column_stack([self._dosages[self._row[snp_id]], self._covariates])
        return SiteData(snp_id, X, self._y)

    # message handling ---------------------------------------------------------

    def handle(self, msg: dict) -> list:
        """Process one message and return the replies to send back."""
        kind = msg["type"]
        try:
            if kind == "INIT":
                return self._on_init(msg)
            if kind == "GLOBAL_UPDATE":
                return self._on_update(msg)
            if kind == "FINALIZE":
                return self._on_finalize(msg)
            if kind == "SHUTDOWN":
                self._on_shutdown()
                return []
            raise ProtocolError(f"site {self.site_id} cannot handle {kind}")
        except ConfigurationError as exc:
            self.closed = True
            self.fatal = str(exc)
            return [M.error(exc, kind="configuration")]
        except ProtocolError as exc:
            return [M.error(exc, kind="protocol", snp_id=msg.get("snp_id", ""))]

    def _on_init(self, msg):
        p = msg["p"]
        if p != self.p:
            raise ConfigurationError(
                f"site {self.site_id} holds {self.p} covariates but INIT asks for p={p}"
            )
        unknown = [s for s in msg["snp_ids"] if s not in self._row]
        if unknown:
            raise ConfigurationError(
                f"site {self.site_id} has no genotypes for {len(unknown)} SNPs, "
                f"first {unknown[0]!r}"
            )
        self.config = msg
        self._snps = set(msg["snp_ids"])
        self._mu = {}
        self.results = {}
        self.completed = False
        self._rng = np.random.default_rng([self._seed, zlib.crc32(self.site_id.encode())])
        if msg.get("masking") and self.compensator is None:
            raise ConfigurationError(f"site {self.site_id}: masking needs a compensator")
        return [M.init_ack(self.site_id, self.n, self.p)]

    def _on_update(self, msg):
        if self.config is None:
            raise ProtocolError(f"site {self.site_id} got GLOBAL_UPDATE before INIT")
        snp = msg["snp_id"]
        if snp not in self._snps:
            raise ProtocolError(f"site {self.site_id}: unknown snp_id {snp!r}")
        beta = np.array([float("nan") if b is None else b for b in msg["beta"]])
        if beta.size != self.p + 1:
            raise ProtocolError(
                f"site {self.site_id}: beta has length {beta.size}, expected {self.p + 1}"
            )
        it = msg["iteration"]
        site = self.site_data(snp)
        try:
            stats = compute_site_stats(site, beta, msg["sigma2"], self._mu.get(snp, 0.0))
        except (ConvergenceError, ParameterError) as exc:
            return [M.error(exc, kind="numerical", snp_id=snp)]
        self._mu[snp] = stats.mu_hat
        noise_id = ""
        if self.config.get("masking"):
            noise_id = f"{self.site_id}:{snp}:{it}"
            masked, record = mask_local_stats(stats, self._rng, self.config["noise_sd"],
                                              noise_id, self.site_id, it)
            self.compensator.submit(record)
            stats = masked.stats
        return [M.local_stats(stats, self.site_id, it, noise_id)]

    def _on_finalize(self, msg):
        self.results[msg["snp_id"]] = msg
        self._mu.pop(msg["snp_id"], None)
        if self.config is not None and len(self.results) == len(self._snps):
            self.completed = True
        return []

    def _on_shutdown(self):
        if not self.completed and self.config is not None:
            log.info("site %s: shutdown before the scan finished, discarding %d results",
                     self.site_id, len(self.results))
            self.results = {}
        self.closed = True


def site_serve(worker: SiteWorker, channel) -> dict:
    """Answer messages on ``channel`` until SHUTDOWN or a fatal error.

    Returns the per-SNP FINALIZE records when the scan completed, otherwise
    an empty dict.
    """
    channel.send(worker.hello())
    while not worker.closed:
        try:
            msg = channel.recv()
        except TransportError:
            log.warning("site %s: coordinator went away", worker.site_id)
            worker.results = {}
            break
        if msg["type"] == "ERROR":
            raise FedGLMMError(f"coordinator: {msg['message']}")
        for reply in worker.handle(msg):
            channel.send(reply)
            if reply["type"] == "ERROR" and reply.get("kind") == "configuration":
                log.error("site %s: %s", worker.site_id, reply["message"])
    return worker.results if worker.completed else {}
