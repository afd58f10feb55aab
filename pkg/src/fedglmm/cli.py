"""``fedglmm`` command-line interface.

Exit status is 0 on success, 1 for user errors (bad flags, unreadable or
malformed inputs, inconsistent configuration) and 2 for internal errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import threading
from pathlib import Path

import numpy as np

from . import data_io as io
from .containers import CovariateMatrix, GenotypeMatrix
from .estimators import scan_sites
from .exceptions import FedGLMMError
from .fitting import DEFAULT_MAX_ITER, DEFAULT_SIGMA2_INIT, DEFAULT_TOL
from .linear import linear_assoc_scan
from .projection import PcLoadings, compute_reference_loadings, projection_covariates

log = logging.getLogger("fedglmm")

TOKEN_ENV = "FEDGLMM_TOKEN"
SITE_FILES = ("genotypes.tsv", "phenotypes.tsv", "covariates.tsv")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _positive_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return v


def _nonneg_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _fraction(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must be in [0, 1], got {text}")
    return v


# logging ---------------------------------------------------------------------

class _JsonFormatter(logging.Formatter):
    def format(self, record):
        out = {"time": self.formatTime(record), "level": record.levelname,
               "logger": record.name, "message": record.getMessage()}
        if record.exc_info:
            out["exc"] = self.formatException(record.exc_info)
        return json.dumps(out)


def _setup_logging(level: str, json_logs: bool):
    handler = logging.StreamHandler(sys.stderr)
    if json_logs:
        handler.setFormatter(_JsonFormatter())
    else:
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level.upper())
    logging.captureWarnings(True)


# shared loading ----------------------------------------------------------------

def _load_site_dir(d, covariates=None, loadings=None, missing_cap=io.DEFAULT_MISSING_CAP):
    """Genotypes (imputed), covariates and phenotype of one site directory."""
    d = Path(d)
    G = io.impute_missing(io.load_genotypes(d / "genotypes.tsv", missing_cap))
    ids, y = io.load_phenotypes(d / "phenotypes.tsv")
    pos = {s: i for i, s in enumerate(ids)}
    pheno = np.array([y[pos[s]] if s in pos else np.nan for s in G.sample_ids])
    if loadings is not None:
        cov = projection_covariates(G, io.load_loadings(loadings))
    else:
        cov = io.load_covariates(Path(covariates) if covariates else d / "covariates.tsv")
    return G, cov.reorder(G.sample_ids), pheno


def _read_snps(path):
    if path is None:
        return None
    with open(path, encoding="utf-8") as fh:
        return [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]


def _positions(G: GenotypeMatrix):
    if G.chromosomes is None:
        return None, None
    return dict(zip(G.variant_ids, G.chromosomes)), dict(zip(G.variant_ids, G.positions))


def _write_port(path, port):
    if path:
        tmp = f"{path}.tmp"
        with open(tmp, "w") as fh:
            fh.write(f"{port}\n")
        os.replace(tmp, path)


# subcommands ---------------------------------------------------------------------

def cmd_pca_ref(args):
    panel = io.load_reference_panel(args.panel)
    loadings = compute_reference_loadings(panel, args.pcs)
    io.write_loadings(loadings, args.out)
    log.info("wrote %d loadings for %d variants to %s", args.pcs, panel.n_variants, args.out)


def cmd_project(args):
    loadings = io.load_loadings(args.loadings)
    if args.pcs is not None:
        if args.pcs > loadings.n_components:
            raise UsageError(f"--pcs {args.pcs} exceeds the {loadings.n_components} "
                             "components in the loadings file")
        loadings = PcLoadings(loadings.variant_ids, loadings.loadings[:, :args.pcs],
                              loadings.eigenvalues[:args.pcs], loadings.variant_means)
    G = io.impute_missing(io.load_genotypes(args.genotypes, args.missing_cap))
    io.write_covariates(projection_covariates(G, loadings), args.out)


def cmd_simulate(args):
    from .simulation import SimSpec, simulate_populations

    spec_dict = {}
    if args.spec:
        with open(args.spec, encoding="utf-8") as fh:
            spec_dict = json.load(fh)
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = SimSpec.from_dict(spec_dict)
    sim = simulate_populations(spec)
    out = io.ensure_dir(args.out)
    io.write_genotypes(sim.genotypes, out / "genotypes.tsv")
    io.write_phenotypes(sim.genotypes.sample_ids, sim.phenotype, out / "phenotypes.tsv")
    panel = sim.reference_panel
    io.write_genotypes(GenotypeMatrix(panel.variant_ids, panel.sample_ids, panel.dosages),
                       out / "reference_panel.tsv")
    io._write_lines(out / "truth.tsv", ["VARIANT\tEFFECT"]
                    + [f"{v}\t{io.fmt_float(b)}" for v, b in sim.causal_truth])
    io._write_lines(out / "samples.tsv", ["SAMPLE\tPOPULATION\tGENDER"]
                    + [f"{s}\t{p}\t{g}" for s, p, g in
                       zip(sim.genotypes.sample_ids, sim.population, sim.gender)])
    manifest = {"spec": spec.to_dict(),
                "files": ["genotypes.tsv", "phenotypes.tsv", "reference_panel.tsv",
                          "truth.tsv", "samples.tsv"],
                "n_causal_selected": len(sim.causal_truth)}
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_partition(args):
    from .simulation import kmeans_partition

    G = io.load_genotypes(args.genotypes, args.missing_cap)
    Gi = io.impute_missing(G)
    ids, y = io.load_phenotypes(args.phenotypes)
    pos = {s: i for i, s in enumerate(ids)}
    missing = [s for s in G.sample_ids if s not in pos]
    if missing:
        raise UsageError(f"{len(missing)} genotyped samples have no phenotype row, "
                         f"first {missing[0]!r}")
    loadings = io.load_loadings(args.loadings)
    cov = projection_covariates(Gi, loadings)
    if args.features == "raw":
        feats = Gi.dosages.T
    else:
        feats = cov.by_sample()
    seed = 0 if args.seed is None else args.seed
    labels = kmeans_partition(feats, args.sites, seed)
    out = io.ensure_dir(args.out)
    io.write_sample_assignment(G.sample_ids, labels, out / "assignment.tsv")
    for k in range(args.sites):
        idx = np.flatnonzero(labels == k)
        d = io.ensure_dir(out / f"site{k}")
        sub = G.select_samples(idx)
        io.write_genotypes(sub, d / "genotypes.tsv")
        io.write_phenotypes(sub.sample_ids, [y[pos[s]] for s in sub.sample_ids],
                            d / "phenotypes.tsv")
        io.write_covariates(CovariateMatrix(sub.sample_ids, cov.values[:, idx]),
                            d / "covariates.tsv")
        log.info("site%d: %d samples", k, idx.size)


def cmd_fit_pooled(args):
    inputs, G0 = [], None
    for d in args.site_dirs:
        G, cov, y = _load_site_dir(d, missing_cap=args.missing_cap)
        G0 = G0 or G
        keep = ~np.isnan(y)
        inputs.append((G, cov.by_sample()[keep], y[keep], keep))
    snps = _read_snps(args.snps) or [v for v in G0.variant_ids
                                     if all(v in set(G.variant_ids) for G, *_ in inputs)]
    site_inputs = []
    for G, C, y, keep in inputs:
        row = {v: i for i, v in enumerate(G.variant_ids)}
        missing = [s for s in snps if s not in row]
        if missing:
            raise UsageError(f"SNP {missing[0]!r} is not genotyped at every site")
        D = G.dosages[[row[s] for s in snps]][:, keep]
        site_inputs.append((D, C, y))
    results = scan_sites(site_inputs, snps, tol=args.tol, max_iter=args.max_iter,
                         sigma2_init=args.sigma2_init, n_jobs=args.threads)
    chroms, poss = _positions(G0)
    io.write_results(io.ResultsTable.from_results(results, chroms, poss), args.out)


def _federation_config(args, k):
    from .federation import FederationConfig

    return FederationConfig(k=k, tol=args.tol, max_outer_iterations=args.max_iter,
                            masking_enabled=args.mask, sigma2_init=args.sigma2_init,
                            noise_sd=args.noise_sd, batch_size=args.batch_size,
                            site_failure=args.site_failure, transport="tcp")


def cmd_serve_coordinator(args):
    from .federation import coordinator_run
    from .federation.transport import (
        CompensatorClient, accept_sites, connect, listen, parse_address)

    config = _federation_config(args, args.sites)
    compensator = None
    if args.mask:
        if not args.compensator:
            raise UsageError("--mask needs --compensator host:port")
        compensator = CompensatorClient(connect(args.compensator, name="compensator"))
    host, port = parse_address(args.listen)
    server = listen(host, port)
    _write_port(args.port_file, server.getsockname()[1])
    log.info("listening on %s:%d for %d sites", host, server.getsockname()[1], args.sites)
    try:
        channels = accept_sites(server, args.sites, args.token or "", timeout=args.timeout)
    finally:
        server.close()
    try:
        results = coordinator_run(config, channels, _read_snps(args.snps), p=args.pcs,
                                  compensator=compensator)
    finally:
        for ch in channels:
            ch.close()
        if compensator is not None:
            from .federation import messages as M

            compensator.channel.send(M.shutdown())
            compensator.close()
    io.write_results(io.ResultsTable.from_results(results), args.out)
    n_ok = sum(r.converged for r in results)
    log.info("%d of %d SNPs converged", n_ok, len(results))


def cmd_serve_site(args):
    from .federation import SiteWorker, site_serve
    from .federation.transport import CompensatorClient, connect

    G, cov, y = _load_site_dir(args.site_dir, args.covariates, args.loadings,
                               args.missing_cap)
    compensator = None
    if args.compensator:
        compensator = CompensatorClient(connect(args.compensator, name="compensator"))
    site_id = args.site_id or Path(args.site_dir).resolve().name
    seed = 0 if args.seed is None else args.seed
    worker = SiteWorker(site_id, G, cov, y, token=args.token or "", seed=seed,
                        compensator=compensator)
    channel = connect(args.connect, name="coordinator")
    try:
        results = site_serve(worker, channel)
    finally:
        channel.close()
        if compensator is not None:
            compensator.close()
    if worker.fatal:
        raise FedGLMMError(worker.fatal)
    if not worker.closed:
        raise FedGLMMError(f"site {site_id}: coordinator disconnected before SHUTDOWN")
    if results:
        log.info("site %s: %d SNPs finalized", site_id, len(results))
    else:
        log.info("site %s: shut down before the scan completed; no results kept", site_id)


def cmd_serve_compensator(args):
    from .federation.masking import Compensator
    from .federation.transport import listen, parse_address, serve_compensator

    host, port = parse_address(args.listen)
    server = listen(host, port)
    _write_port(args.port_file, server.getsockname()[1])
    stop = threading.Event()
    try:
        serve_compensator(server, Compensator(args.sites), timeout=args.timeout, stop=stop)
    finally:
        server.close()


def cmd_scan_linear(args):
    G = io.impute_missing(io.load_genotypes(args.genotypes, args.missing_cap))
    ids, y = io.load_phenotypes(args.phenotypes)
    pos = {s: i for i, s in enumerate(ids)}
    missing = [s for s in G.sample_ids if s not in pos]
    if missing:
        raise UsageError(f"sample {missing[0]!r} has no phenotype")
    y = np.array([y[pos[s]] for s in G.sample_ids])
    cov = io.load_covariates(args.covariates).reorder(G.sample_ids) if args.covariates else None
    io.write_linear_results(linear_assoc_scan(G, y, cov), args.out)


def cmd_experiment_projection(args):
    from .simulation import SimSpec, run_projection_experiment

    spec_dict = {}
    if args.spec:
        with open(args.spec, encoding="utf-8") as fh:
            spec_dict = json.load(fh)
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = SimSpec.from_dict(spec_dict)
    report = run_projection_experiment(args.studies, spec, args.pcs,
                                       matched_reference=not args.mismatched,
                                       n_jobs=args.threads)
    out = report.to_dict()
    out["spec"] = spec.to_dict()
    text = json.dumps(out, indent=2, sort_keys=True)
    if args.out == "-":
        print(text)
    else:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    med = out["median"]["top20"]
    log.info("median top-20 concordance vs PCA: projection %.3f, none %.3f",
             med["projection"], med["none"])


# parser ----------------------------------------------------------------------------

def _add_fit_flags(p):
    p.add_argument("--tol", type=_positive_float, default=DEFAULT_TOL,
                   help="convergence threshold on parameter changes (default: %(default)g)")
    p.add_argument("--max-iter", type=_positive_int, default=DEFAULT_MAX_ITER,
                   help="outer Newton iterations per SNP (default: %(default)s)")
    p.add_argument("--sigma2-init", type=_positive_float, default=DEFAULT_SIGMA2_INIT,
                   help="starting random-intercept variance (default: %(default)g)")
    p.add_argument("--snps", metavar="FILE", help="SNP ids to scan, one per line "
                   "(default: every variant genotyped at all sites)")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=None,
                   help="random seed (default: the command's own default)")
    g.add_argument("--threads", type=_positive_int, default=1,
                   help="worker threads for per-SNP scans (default: %(default)s)")
    g.add_argument("--log-level", default="info",
                   choices=["debug", "info", "warning", "error"], help="log verbosity")
    g.add_argument("--json-logs", action="store_true", help="emit log records as JSON lines")

    parser = _Parser(prog="fedglmm", description="Federated logistic mixed-model GWAS "
                     "with reference-panel projection covariates.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(func=func)
        return p

    def missing_cap(p):
        p.add_argument("--missing-cap", type=_fraction, default=io.DEFAULT_MISSING_CAP,
                       help="maximum missing fraction per variant (default: %(default)s)")

    p = add("pca-ref", cmd_pca_ref, "Compute PC loadings from a reference panel.")
    p.add_argument("--panel", required=True, help="reference panel genotype TSV")
    p.add_argument("--pcs", type=_positive_int, default=4,
                   help="number of components; 4 or 6 are typical (default: %(default)s)")
    p.add_argument("--out", required=True, help="loadings TSV to write")

    p = add("project", cmd_project, "Project study genotypes onto reference loadings.")
    p.add_argument("--genotypes", required=True, help="study genotype TSV")
    p.add_argument("--loadings", required=True, help="loadings TSV from pca-ref")
    p.add_argument("--pcs", type=_positive_int, default=None,
                   help="use only the first PCS components (default: all)")
    missing_cap(p)
    p.add_argument("--out", required=True, help="covariate TSV to write")

    p = add("simulate", cmd_simulate, "Simulate a structured study and a reference panel.")
    p.add_argument("--spec", help="JSON file with simulation parameters (default: built-in)")
    p.add_argument("--out", required=True, help="output directory")

    p = add("partition", cmd_partition, "Split a study into sites with k-means.")
    p.add_argument("--genotypes", required=True, help="study genotype TSV")
    p.add_argument("--phenotypes", required=True, help="SAMPLE/PHENO TSV")
    p.add_argument("--loadings", required=True,
                   help="loadings TSV; each site gets projection covariates")
    p.add_argument("--sites", type=_positive_int, default=3,
                   help="number of sites (default: %(default)s)")
    p.add_argument("--features", choices=["projection", "raw"], default="projection",
                   help="cluster on projection covariates or raw dosages "
                        "(default: %(default)s)")
    missing_cap(p)
    p.add_argument("--out", required=True, help="directory receiving site0, site1, ...")

    p = add("fit-pooled", cmd_fit_pooled,
            "Centralized run of the mixed-model scan over all site directories.")
    p.add_argument("--site-dirs", nargs="+", required=True, metavar="DIR",
                   help="site directories with genotypes, phenotypes and covariates")
    _add_fit_flags(p)
    missing_cap(p)
    p.add_argument("--out", required=True, help="results TSV to write")

    p = add("serve-coordinator", cmd_serve_coordinator,
            "Run the central server for a federated scan over TCP.")
    p.add_argument("--listen", default="127.0.0.1:7878", help="host:port (default: %(default)s)")
    p.add_argument("--sites", type=_positive_int, required=True, help="number of sites k")
    p.add_argument("--pcs", type=_nonneg_int, default=4,
                   help="covariates per site; 4 or 6 are typical (default: %(default)s)")
    _add_fit_flags(p)
    p.add_argument("--token", default=os.environ.get(TOKEN_ENV),
                   help=f"shared site token (default: ${TOKEN_ENV})")
    p.add_argument("--mask", action="store_true", help="enable additive noise masking")
    p.add_argument("--noise-sd", type=_positive_float, default=1.0,
                   help="masking noise standard deviation (default: %(default)g)")
    p.add_argument("--compensator", metavar="HOST:PORT", help="compensator address for --mask")
    p.add_argument("--batch-size", type=_positive_int, default=64,
                   help="SNPs advanced together per round (default: %(default)s)")
    p.add_argument("--site-failure", choices=["fail-fast", "quorum"], default="fail-fast",
                   help="abort the scan, or drop a failed site and go on with k-1 "
                        "(default: %(default)s)")
    p.add_argument("--timeout", type=_positive_float, default=None,
                   help="seconds to wait for all sites to connect (default: forever)")
    p.add_argument("--port-file", help="write the bound port to this file")
    p.add_argument("--out", required=True, help="results TSV to write")

    p = add("serve-site", cmd_serve_site, "Serve one site's data to a coordinator.")
    p.add_argument("--connect", required=True, metavar="HOST:PORT", help="coordinator address")
    p.add_argument("--site-dir", required=True,
                   help="directory with genotypes.tsv, phenotypes.tsv and covariates.tsv")
    p.add_argument("--site-id", help="site name (default: directory name)")
    p.add_argument("--covariates", help="covariate TSV (default: SITE_DIR/covariates.tsv)")
    p.add_argument("--loadings", help="compute projection covariates from these loadings")
    p.add_argument("--token", default=os.environ.get(TOKEN_ENV),
                   help=f"shared token (default: ${TOKEN_ENV})")
    p.add_argument("--compensator", metavar="HOST:PORT",
                   help="compensator address, needed when the coordinator masks")
    missing_cap(p)

    p = add("serve-compensator", cmd_serve_compensator,
            "Run the noise compensator for masked federated scans.")
    p.add_argument("--listen", default="127.0.0.1:7879", help="host:port (default: %(default)s)")
    p.add_argument("--sites", type=_positive_int, required=True, help="number of sites k")
    p.add_argument("--timeout", type=_positive_float, default=60.0,
                   help="seconds to wait for a round's noise (default: %(default)g)")
    p.add_argument("--port-file", help="write the bound port to this file")

    p = add("scan-linear", cmd_scan_linear, "Per-variant linear regression scan.")
    p.add_argument("--genotypes", required=True, help="genotype TSV")
    p.add_argument("--phenotypes", required=True, help="SAMPLE/PHENO TSV")
    p.add_argument("--covariates", help="covariate TSV (default: none)")
    missing_cap(p)
    p.add_argument("--out", required=True, help="results TSV to write")

    p = add("experiment-projection", cmd_experiment_projection,
            "Compare projection, study-PCA and unadjusted scans over simulated studies.")
    p.add_argument("--studies", type=_positive_int, default=20,
                   help="number of simulated studies (default: %(default)s)")
    p.add_argument("--spec", help="JSON file with simulation parameters (default: built-in)")
    p.add_argument("--pcs", type=_positive_int, default=4,
                   help="covariates per scan (default: %(default)s)")
    p.add_argument("--mismatched", action="store_true",
                   help="draw the reference panel from sister populations")
    p.add_argument("--out", default="-", help="JSON report path, '-' for stdout")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    _setup_logging(args.log_level, args.json_logs)
    try:
        args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return 1
    except (FedGLMMError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return 1
    except Exception:  # noqa: BLE001
        log.exception("internal error")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
