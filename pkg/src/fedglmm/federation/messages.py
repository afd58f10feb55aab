"""Newline-delimited JSON wire format.

Every message is one JSON object on one line with a ``type`` field. Floats
use Python's shortest round-trip repr, so decoding is exact; NaN travels as
``null``. :data:`SCHEMAS` lists every field each message may carry, which
is what the no-individual-data check in the test suite inspects.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from ..exceptions import ProtocolError
from ..glmm import AssocResult, LocalStats, two_sided_normal_p

# field kinds: "str", "int", "float", "bool", "vec" (length p+1),
# "mat" ((p+1) x (p+1)), "str_list" (identifiers only), "noise" (nested stats)
SCHEMAS = {
    "HELLO": {"site_id": "str", "token": "str", "variant_ids": "str_list"},
    "INIT": {"p": "int", "snp_ids": "str_list", "masking": "bool",
             "noise_sd": "float", "tol": "float"},
    "INIT_ACK": {"site_id": "str", "n": "int", "p": "int"},
    "GLOBAL_UPDATE": {"snp_id": "str", "beta": "vec", "sigma2": "float",
                      "iteration": "int", "converged": "bool",
                      "grad_global": "vec", "hess_global": "mat"},
    "LOCAL_STATS": {"snp_id": "str", "site_id": "str", "iteration": "int",
                    "n": "float", "gradient": "vec", "hessian": "mat",
                    "mu_hat": "float", "mu_curvature": "float", "local_se": "vec",
                    "laplace_loglik": "float", "sigma2_moment": "float",
                    "singular": "bool", "noise_id": "str"},
    "FINALIZE": {"snp_id": "str", "beta": "vec", "se": "vec", "z": "vec",
                 "p_value": "vec", "n_iterations": "int", "converged": "bool",
                 "sigma2": "float", "status": "str"},
    "NOISE": {"snp_id": "str", "iteration": "int", "site_id": "str",
              "noise_ids": "str_list", "values": "noise", "request": "bool"},
    "SHUTDOWN": {},
    "ERROR": {"message": "str", "kind": "str", "snp_id": "str"},
}
REQUIRED = {
    "HELLO": ("site_id",),
    "INIT": ("p", "snp_ids"),
    "INIT_ACK": ("site_id", "n", "p"),
    "GLOBAL_UPDATE": ("snp_id", "beta", "sigma2", "iteration"),
    "LOCAL_STATS": ("snp_id", "site_id", "iteration", "n", "gradient", "hessian",
                    "mu_hat", "mu_curvature", "local_se", "laplace_loglik",
                    "sigma2_moment"),
    "FINALIZE": ("snp_id", "beta", "se", "z", "p_value", "converged"),
    "NOISE": ("snp_id", "iteration"),
    "SHUTDOWN": (),
    "ERROR": ("message",),
}
STATS_FIELDS = ("n", "gradient", "hessian", "mu_hat", "mu_curvature", "local_se",
                "laplace_loglik", "sigma2_moment")


def _jsonable(v):
    if isinstance(v, np.ndarray):
        v = v.tolist()
    if isinstance(v, float):
        return None if math.isnan(v) else v
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (np.floating,)):
        return _jsonable(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def encode(msg: dict) -> bytes:
    if msg.get("type") not in SCHEMAS:
        raise ProtocolError(f"unknown message type {msg.get('type')!r}")
    return (json.dumps(_jsonable(msg), separators=(",", ":"), allow_nan=False) + "\n").encode()


def decode(line: bytes | str) -> dict:
    text = line.decode("utf-8") if isinstance(line, bytes) else line
    try:
        msg = json.loads(text)
    except ValueError:
        raise ProtocolError(f"malformed message line: {text[:200]!r}") from None
    if not isinstance(msg, dict) or msg.get("type") not in SCHEMAS:
        raise ProtocolError(f"unknown or missing message type in line: {text[:200]!r}")
    kind = msg["type"]
    extra = set(msg) - set(SCHEMAS[kind]) - {"type"}
    if extra:
        raise ProtocolError(f"{kind} carries unexpected fields {sorted(extra)}: {text[:200]!r}")
    missing = [f for f in REQUIRED[kind] if f not in msg]
    if missing:
        raise ProtocolError(f"{kind} is missing fields {missing}: {text[:200]!r}")
    return msg


def _vec(x):
    return np.array([math.nan if v is None else v for v in x], dtype=np.float64)


def _mat(x):
    return np.array([[math.nan if v is None else v for v in row] for row in x],
                    dtype=np.float64)


def _num(x):
    return math.nan if x is None else float(x)


# constructors -------------------------------------------------------------

def hello(site_id, token="", variant_ids=()):
    return {"type": "HELLO", "site_id": site_id, "token": token,
            "variant_ids": list(variant_ids)}


def init(p, snp_ids, masking=False, noise_sd=1.0, tol=1e-6):
    return {"type": "INIT", "p": int(p), "snp_ids": list(snp_ids),
            "masking": bool(masking), "noise_sd": float(noise_sd), "tol": float(tol)}


def init_ack(site_id, n, p):
    return {"type": "INIT_ACK", "site_id": site_id, "n": int(n), "p": int(p)}


def global_update(snp_id, beta, sigma2, iteration, grad_global, hess_global,
                  converged=False):
    return {"type": "GLOBAL_UPDATE", "snp_id": snp_id, "beta": beta,
            "sigma2": float(sigma2), "iteration": int(iteration),
            "converged": bool(converged), "grad_global": grad_global,
            "hess_global": hess_global}


def stats_payload(stats: LocalStats) -> dict:
    return {"n": stats.n, "gradient": stats.gradient, "hessian": stats.hessian,
            "mu_hat": stats.mu_hat, "mu_curvature": stats.mu_curvature,
            "local_se": stats.local_se, "laplace_loglik": stats.laplace_loglik,
            "sigma2_moment": stats.sigma2_moment}


def local_stats(stats: LocalStats, site_id, iteration, noise_id=""):
    msg = {"type": "LOCAL_STATS", "snp_id": stats.snp_id, "site_id": site_id,
           "iteration": int(iteration)}
    msg.update(stats_payload(stats))
    msg["singular"] = bool(stats.singular)
    msg["noise_id"] = noise_id
    return msg


def stats_from_payload(snp_id, d: dict, singular=False) -> LocalStats:
    return LocalStats(
        snp_id=snp_id,
        n=_num(d["n"]),
        gradient=_vec(d["gradient"]),
        hessian=_mat(d["hessian"]),
        mu_hat=_num(d["mu_hat"]),
        mu_curvature=_num(d["mu_curvature"]),
        local_se=_vec(d["local_se"]),
        laplace_loglik=_num(d["laplace_loglik"]),
        sigma2_moment=_num(d["sigma2_moment"]),
        singular=bool(singular),
    )


def parse_local_stats(msg: dict) -> LocalStats:
    if msg["type"] != "LOCAL_STATS":
        raise ProtocolError(f"expected LOCAL_STATS, got {msg['type']}")
    st = stats_from_payload(msg["snp_id"], msg, msg.get("singular", False))
    p1 = st.gradient.size
    if st.hessian.shape != (p1, p1) or st.local_se.shape != (p1,):
        raise ProtocolError(f"LOCAL_STATS for {msg['snp_id']!r} has inconsistent shapes")
    return st


def finalize(result: AssocResult):
    """Final inference statistics for every coefficient of one SNP."""
    if result.coef is None:
        beta = se = z = p = []
    else:
        beta = result.coef
        se = result.coef_se
        with np.errstate(invalid="ignore", divide="ignore"):
            z = beta / se
        p = two_sided_normal_p(z)
        p = np.where(np.isnan(z), np.nan, p)
    return {"type": "FINALIZE", "snp_id": result.snp_id,
            "beta": beta, "se": se, "z": z, "p_value": p,
            "n_iterations": int(result.n_iterations), "converged": bool(result.converged),
            "sigma2": float(result.sigma2), "status": result.status}


@dataclass(frozen=True)
class NoiseRecord:
    """Noise a site added to one LocalStats payload."""

    noise_id: str
    snp_id: str
    iteration: int
    site_id: str
    values: LocalStats


def noise(record: NoiseRecord):
    return {"type": "NOISE", "snp_id": record.snp_id, "iteration": record.iteration,
            "site_id": record.site_id, "noise_ids": [record.noise_id],
            "values": stats_payload(record.values), "request": False}


def noise_request(snp_id, iteration):
    return {"type": "NOISE", "snp_id": snp_id, "iteration": int(iteration),
            "request": True}


def noise_aggregate(snp_id, iteration, noise_ids, total: LocalStats):
    return {"type": "NOISE", "snp_id": snp_id, "iteration": int(iteration),
            "site_id": "", "noise_ids": list(noise_ids),
            "values": stats_payload(total), "request": False}


def parse_noise(msg: dict) -> NoiseRecord:
    if msg["type"] != "NOISE" or "values" not in msg:
        raise ProtocolError("expected a NOISE message with values")
    ids = msg.get("noise_ids") or [""]
    return NoiseRecord(";".join(ids), msg["snp_id"], int(msg["iteration"]),
                       msg.get("site_id", ""),
                       stats_from_payload(msg["snp_id"], msg["values"]))


def shutdown():
    return {"type": "SHUTDOWN"}


def error(message, kind="protocol", snp_id=""):
    return {"type": "ERROR", "message": str(message), "kind": kind, "snp_id": snp_id}
