"""On-disk formats: canonical ratings files, params JSON and report JSON.

Floats are written with ``repr`` so values round-trip exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import ModelParams, PosteriorSummary, RatingsTriples, as_variant
from .errors import EmptyInput, MalformedLine


def write_ratings(path, data: RatingsTriples):
    """Write ``# n_users R n_items C``, the column header, then one row per entry."""
    cols = ["user", "item", "rating"] + [f"x_{k + 1}" for k in range(data.p)]
    out = [f"# n_users {data.n_users} n_items {data.n_items}", " ".join(cols)]
    for u, i, r, x in zip(data.users, data.items, data.ratings, data.covariates):
        out.append(" ".join([str(int(u)), str(int(i)), repr(float(r))] + [repr(float(v)) for v in x]))
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def read_ratings(path, n_users=None, n_items=None):
    """Read a canonical ratings file.

    Dimensions come from the ``# n_users .. n_items ..`` line when present,
    otherwise from the largest indices (or the explicit arguments).
    """
    dims = {}
    header = None
    users, items, ratings, xs = [], [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                tok = line[1:].split()
                dims.update({tok[k]: int(tok[k + 1]) for k in range(0, len(tok) - 1, 2)})
                continue
            if header is None:
                header = line.split()
                if header[:3] != ["user", "item", "rating"]:
                    raise MalformedLine(lineno, line, "expected header 'user item rating x_1 ...'")
                continue
            fields = line.split()
            if len(fields) != len(header):
                raise MalformedLine(lineno, line, f"expected {len(header)} fields")
            try:
                users.append(int(fields[0]))
                items.append(int(fields[1]))
                ratings.append(float(fields[2]))
                xs.append([float(v) for v in fields[3:]])
            except ValueError:
                raise MalformedLine(lineno, line, "non-numeric field") from None
    if header is None:
        raise EmptyInput(f"{path}: no header line")
    p = len(header) - 3
    R = n_users or dims.get("n_users") or (max(users) + 1 if users else 0)
    C = n_items or dims.get("n_items") or (max(items) + 1 if items else 0)
    x = np.array(xs, dtype=float).reshape(len(ratings), p)
    return RatingsTriples(users, items, ratings, x, n_users=R, n_items=C)


def _opt_list(a):
    return None if a is None else np.asarray(a).tolist()


def params_to_dict(params: ModelParams, post: PosteriorSummary | None = None):
    doc = {
        "variant": params.variant.value,
        "k": params.k,
        "beta": params.beta.tolist(),
        "loadings": params.loadings.tolist(),
        "psi_mode": params.psi_mode,
        "psi": params.sigma2_e if params.psi_mode == "shared" else params.psi.tolist(),
        "sigma2_a": params.sigma2_a,
        "sigma2_b": params.sigma2_b,
    }
    if post is not None:
        doc["posterior"] = {
            "mu_f": post.mu_f.tolist(),
            "sigma_f": post.sigma_f.tolist(),
            "mu_b": _opt_list(post.mu_b),
            "var_b": _opt_list(post.var_b),
            "user_counts": post.user_counts.tolist(),
            "item_counts": post.item_counts.tolist(),
        }
    return doc


def params_from_dict(doc):
    variant = as_variant(doc["variant"])
    k = int(doc["k"])
    loadings = np.asarray(doc["loadings"], dtype=float).reshape(len(doc["loadings"]), k)
    C = loadings.shape[0]
    psi = doc["psi"]
    psi = np.full(C, float(psi)) if np.isscalar(psi) else np.asarray(psi, dtype=float)
    params = ModelParams(
        variant=variant,
        beta=doc["beta"],
        loadings=loadings,
        psi=psi,
        psi_mode=doc.get("psi_mode", "shared" if np.isscalar(doc["psi"]) else "per-item"),
        sigma2_a=doc.get("sigma2_a"),
        sigma2_b=doc.get("sigma2_b"),
    )
    post = None
    if doc.get("posterior") is not None:
        pd = doc["posterior"]
        kk = variant.aug_dim(k)
        mu_f = np.asarray(pd["mu_f"], dtype=float).reshape(-1, kk)
        post = PosteriorSummary(
            mu_f=mu_f,
            sigma_f=np.asarray(pd["sigma_f"], dtype=float).reshape(-1, kk, kk),
            user_counts=np.asarray(pd["user_counts"], dtype=np.int64),
            item_counts=np.asarray(pd["item_counts"], dtype=np.int64),
            mu_b=None if pd.get("mu_b") is None else np.asarray(pd["mu_b"], dtype=float),
            var_b=None if pd.get("var_b") is None else np.asarray(pd["var_b"], dtype=float),
        )
    return params, post


def save_params(path, params, post=None):
    Path(path).write_text(json.dumps(params_to_dict(params, post)) + "\n", encoding="utf-8")


def load_params(path):
    return params_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def save_baseline(path, beta, result, user_counts, item_counts):
    doc = {
        "variant": "hard-impute",
        "k": int(len(result.D)),
        "beta": np.asarray(beta).tolist(),
        "U": result.U.tolist(),
        "D": result.D.tolist(),
        "V": result.V.tolist(),
        "user_counts": np.asarray(user_counts).tolist(),
        "item_counts": np.asarray(item_counts).tolist(),
    }
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
