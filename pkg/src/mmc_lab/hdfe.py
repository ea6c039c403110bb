"""OLS with absorbed high-dimensional fixed effects.

Fixed effects are swept out of the response and covariates by alternating
projections (successive group demeaning over the FE dimensions), with an
Irons-Tuck extrapolation step every second sweep. The slope coefficients
then come from a QR solve on the demeaned columns.
"""

from __future__ import annotations

import logging
import math
import re
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.sparse
from scipy import stats
from scipy.sparse.csgraph import connected_components

log = logging.getLogger(__name__)

SE_KINDS = ("robust", "classical")
_INTERACTION = re.compile(r"\s*[*×:]\s*")


class EstimationError(ValueError):
    pass


@dataclass
class RegressionSpec:
    """What to estimate.

    ``fe_dims`` entries are column names or two-column interactions written
    ``"year*city_pair"``. ``se_kind`` is ``"robust"`` (HC1) or ``"classical"``.
    """

    response: str
    covariates: list[str]
    fe_dims: list[str] = field(default_factory=list)
    se_kind: str = "robust"
    tol: float = 1e-8
    max_iter: int = 10_000

    def __post_init__(self):
        self.covariates = list(self.covariates)
        self.fe_dims = list(self.fe_dims)
        if not self.covariates:
            raise ValueError("at least one covariate is required")
        if self.se_kind in ("hc1", "heteroskedasticity-robust"):
            self.se_kind = "robust"
        if self.se_kind not in SE_KINDS:
            raise ValueError(f"se_kind must be one of {SE_KINDS}, got {self.se_kind!r}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")

    @property
    def columns(self) -> list[str]:
        return [self.response, *self.covariates]


@dataclass
class FitResult:
    coef: dict[str, float]
    se: dict[str, float]
    cov: pd.DataFrame
    n_obs: int
    n_absorbed: int
    df_resid: int
    r2: float
    adj_r2: float
    rss: float
    iterations: int
    converged: bool
    dof_exact: bool = True
    dropped: list[str] = field(default_factory=list)
    se_kind: str = "robust"
    n_missing: int = 0

    def table(self) -> pd.DataFrame:
        names = list(self.coef)
        b = np.array([self.coef[n] for n in names])
        s = np.array([self.se[n] for n in names])
        with np.errstate(divide="ignore", invalid="ignore"):
            t = b / s
        p = 2 * stats.norm.sf(np.abs(t))
        return pd.DataFrame({"name": names, "coef": b, "se": s, "t": t, "p": p})

    def to_frame(self) -> pd.DataFrame:
        """Coefficient rows followed by fit-statistic trailer rows."""
        trailer = pd.DataFrame({
            "name": ["n_obs", "n_absorbed", "adj_r2", "iterations", "converged"],
            "coef": [self.n_obs, self.n_absorbed, self.adj_r2, self.iterations, int(self.converged)],
        })
        return pd.concat([self.table(), trailer], ignore_index=True)


class LinearCombination(NamedTuple):
    estimate: float
    se: float
    ci_lo: float
    ci_hi: float


# -- fixed-effect structure -------------------------------------------------

def _derived(data: pd.DataFrame, name: str) -> pd.Series:
    if name in data.columns:
        return data[name]
    if name == "city_pair" and {"origin", "dest"} <= set(data.columns):
        return data["origin"].astype(str) + "-" + data["dest"].astype(str)
    if name == "carrier_pair" and {"carrier_lo", "carrier_hi"} <= set(data.columns):
        return data["carrier_lo"].astype(str) + "-" + data["carrier_hi"].astype(str)
    raise KeyError(f"fixed-effect column {name!r} not found")


def fe_codes(data: pd.DataFrame, dim: str) -> np.ndarray:
    """Integer group codes for one FE dimension (plain or interacted)."""
    parts = _INTERACTION.split(dim.strip())
    codes = None
    for part in parts:
        c, uniq = pd.factorize(_derived(data, part), sort=True)
        if (c < 0).any():
            raise EstimationError(f"missing values in fixed-effect column {part!r}")
        c = c.astype(np.int64)
        codes = c if codes is None else codes * len(uniq) + c
    codes, _ = pd.factorize(codes, sort=True)
    return codes.astype(np.int64)


class _Groups:
    __slots__ = ("codes", "n", "counts")

    def __init__(self, codes: np.ndarray):
        self.codes = codes
        self.n = int(codes.max()) + 1 if len(codes) else 0
        self.counts = np.bincount(codes, minlength=self.n).astype(np.float64)

    def demean(self, x: np.ndarray) -> np.ndarray:
        means = np.bincount(self.codes, weights=x, minlength=self.n) / self.counts
        return x - means[self.codes]

    def means(self, x: np.ndarray) -> np.ndarray:
        return np.bincount(self.codes, weights=x, minlength=self.n) / self.counts


def _sweep(groups: Sequence[_Groups], x: np.ndarray) -> np.ndarray:
    for g in groups:
        x = g.demean(x)
    return x


def _demean_column(x: np.ndarray, groups: Sequence[_Groups], tol: float, max_iter: int) -> tuple[np.ndarray, int, bool]:
    if not groups:
        return x.copy(), 0, True
    if len(groups) == 1:
        return groups[0].demean(x), 1, True
    it = 0
    while it < max_iter:
        x1 = _sweep(groups, x)
        it += 1
        if np.max(np.abs(x1 - x)) < tol:
            return x1, it, True
        if it >= max_iter:
            return x1, it, False
        x2 = _sweep(groups, x1)
        it += 1
        d1 = x2 - x1
        if np.max(np.abs(d1)) < tol:
            return x2, it, True
        d2 = d1 - (x1 - x)
        denom = float(d2 @ d2)
        x = x2 - (float(d1 @ d2) / denom) * d1 if denom > 0 else x2
    return x, it, False


def within_transform(columns: np.ndarray, fe: Sequence[np.ndarray], tol: float = 1e-8,
                     max_iter: int = 10_000, threads: int = 1) -> tuple[np.ndarray, int, bool]:
    """Remove all FE group means from each column.

    ``fe`` holds one integer code array per dimension. Columns are processed
    independently, so the result does not depend on ``threads``. Returns
    ``(demeaned, iterations, converged)`` with the worst case over columns.
    """
    x = np.asarray(columns, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    groups = [_Groups(np.asarray(c, np.int64)) for c in fe]
    cols = [np.ascontiguousarray(x[:, j]) for j in range(x.shape[1])]

    def one(col):
        return _demean_column(col, groups, tol, max_iter)

    if threads > 1 and len(cols) > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(one, cols))
    else:
        results = [one(c) for c in cols]
    out = np.column_stack([r[0] for r in results]) if results else x.copy()
    iterations = max((r[1] for r in results), default=0)
    converged = all(r[2] for r in results)
    if not converged:
        log.warning("alternating projections did not converge in %d iterations", max_iter)
    return (out[:, 0] if squeeze else out), iterations, converged


def group_means(x: np.ndarray, codes: np.ndarray) -> np.ndarray:
    return _Groups(np.asarray(codes, np.int64)).means(np.asarray(x, np.float64))


def _components(a: np.ndarray, b: np.ndarray) -> int:
    na, nb = int(a.max()) + 1, int(b.max()) + 1
    adj = scipy.sparse.coo_matrix((np.ones(len(a)), (a, b + na)), shape=(na + nb, na + nb)).tocsr()
    n, _ = connected_components(adj, directed=False)
    return n


def absorbed_dof(fe: Sequence[np.ndarray]) -> tuple[int, bool]:
    """Degrees of freedom used by the fixed effects.

    Exact for up to two dimensions (levels minus connected components).
    Beyond two, each extra dimension loses the largest component count it
    has with any earlier dimension, which can only overstate the rank.
    """
    if not fe:
        return 0, True
    levels = [int(c.max()) + 1 for c in fe]
    if len(fe) == 1:
        return levels[0], True
    dof = levels[0]
    for d in range(1, len(fe)):
        dof += levels[d] - max(_components(fe[e], fe[d]) for e in range(d))
    return dof, len(fe) == 2


# -- estimation ---------------------------------------------------------------

def fit_hdfe(data: pd.DataFrame, spec: RegressionSpec, *, threads: int = 1,
             rank_tol: float = 1e-7) -> FitResult:
    """Estimate ``spec`` on ``data``.

    Each column is divided by its largest absolute value before the
    within-transformation, so ``spec.tol`` acts as a relative tolerance here.

    Rows with missing response or covariates are dropped. A covariate whose
    demeaned column is (numerically) spanned by the fixed effects and the
    other covariates is dropped and listed in ``FitResult.dropped``; the
    threshold ``rank_tol`` is relative to the column's raw norm.
    """
    missing = [c for c in spec.columns if c not in data.columns]
    if missing:
        raise KeyError(f"columns not found: {missing}")
    if len(data) == 0:
        raise EstimationError("empty panel")
    complete = data[spec.columns].notna().all(axis=1).to_numpy()
    n_missing = int((~complete).sum())
    if n_missing:
        data = data.loc[complete]
    n = len(data)
    if n == 0:
        raise EstimationError("empty panel")

    fe = [fe_codes(data, d) for d in spec.fe_dims]
    raw = data[spec.columns].to_numpy(dtype=np.float64)
    # demean in units of each column's largest magnitude: the stopping rule is
    # then unit-free and rescaling a covariate cannot change the iteration path
    unit = np.max(np.abs(raw), axis=0) if n else np.ones(raw.shape[1])
    unit[(unit == 0) | ~np.isfinite(unit)] = 1.0
    demeaned, iterations, converged = within_transform(raw / unit, fe, spec.tol, spec.max_iter, threads)
    demeaned *= unit
    y, X = demeaned[:, 0], demeaned[:, 1:]

    norms = np.linalg.norm(raw[:, 1:], axis=0)
    norms[norms == 0] = 1.0
    _, r_piv, piv = scipy.linalg.qr(X / norms, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r_piv))
    rank = int((diag > rank_tol).sum())
    keep = np.sort(piv[:rank])
    dropped = [spec.covariates[j] for j in range(X.shape[1]) if j not in set(keep)]
    if dropped:
        log.warning("collinear covariates dropped: %s", dropped)
    names = [spec.covariates[j] for j in keep]
    Xk = X[:, keep]

    q, r = scipy.linalg.qr(Xk, mode="economic")
    beta = scipy.linalg.solve_triangular(r, q.T @ y)
    resid = y - Xk @ beta
    r_inv = scipy.linalg.solve_triangular(r, np.eye(len(keep)))
    bread = r_inv @ r_inv.T

    n_abs, dof_exact = absorbed_dof(fe)
    df_resid = n - len(keep) - n_abs
    if df_resid <= 0:
        raise EstimationError(f"too few observations: n={n}, covariates={len(keep)}, absorbed={n_abs}")
    rss = float(resid @ resid)
    if spec.se_kind == "classical":
        cov = bread * (rss / df_resid)
    else:
        xe = Xk * resid[:, None]
        cov = (n / df_resid) * (bread @ (xe.T @ xe) @ bread)
    cov = (cov + cov.T) / 2

    y_raw = raw[:, 0]
    has_const = bool(fe) or any(np.ptp(raw[:, 1 + j]) == 0 and raw[0, 1 + j] != 0 for j in keep)
    tss = float(((y_raw - y_raw.mean()) ** 2).sum()) if has_const else float(y_raw @ y_raw)
    r2 = 1 - rss / tss if tss > 0 else float("nan")
    adj = 1 - (1 - r2) * (n - int(has_const)) / df_resid

    se = np.sqrt(np.clip(np.diag(cov), 0, None))
    return FitResult(
        coef=dict(zip(names, beta.tolist())),
        se=dict(zip(names, se.tolist())),
        cov=pd.DataFrame(cov, index=names, columns=names),
        n_obs=n, n_absorbed=n_abs, df_resid=df_resid,
        r2=r2, adj_r2=adj, rss=rss,
        iterations=iterations, converged=converged, dof_exact=dof_exact,
        dropped=dropped, se_kind=spec.se_kind, n_missing=n_missing,
    )


def linear_combination_test(fit: FitResult, weights: Mapping[str, float], level: float = 0.95) -> LinearCombination:
    """Estimate, standard error and normal-approximation CI of ``w'b``."""
    unknown = [k for k in weights if k not in fit.coef]
    if unknown:
        raise KeyError(f"unknown coefficient(s): {unknown}")
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    names = list(weights)
    w = np.array([weights[k] for k in names], dtype=np.float64)
    b = np.array([fit.coef[k] for k in names])
    v = fit.cov.loc[names, names].to_numpy()
    est = float(w @ b)
    se = math.sqrt(max(float(w @ v @ w), 0.0))
    z = stats.norm.ppf(0.5 + level / 2)
    return LinearCombination(est, se, est - z * se, est + z * se)


# -- spec files ---------------------------------------------------------------

_SPEC_KEYS = {"response", "covariates", "fe", "fe_dims", "se", "se_kind", "tol", "max_iter", "mmc"}


def _parse_value(raw: str):
    raw = raw.strip()
    if raw.startswith("[") and raw.endswith("]"):
        raw = raw[1:-1]
        return [v.strip().strip("'\"") for v in raw.split(",") if v.strip()]
    return raw.strip("'\"")


def parse_spec_text(text: str) -> tuple[RegressionSpec, dict]:
    """Parse a ``key = value`` spec file.

    Recognised keys: response, covariates, fe (or fe_dims), se (or se_kind),
    tol, max_iter; anything else (e.g. ``mmc``) is returned in the extras dict.
    """
    vals: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"spec line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        vals[key.lower()] = _parse_value(value)

    def as_list(v):
        if v is None:
            return []
        if isinstance(v, list):
            return v
        return [s.strip() for s in v.split(",") if s.strip()]

    if "response" not in vals:
        raise ValueError("spec needs a response")
    spec = RegressionSpec(
        response=vals["response"],
        covariates=as_list(vals.get("covariates")),
        fe_dims=as_list(vals.get("fe", vals.get("fe_dims"))),
        se_kind=vals.get("se", vals.get("se_kind", "robust")),
        tol=float(vals.get("tol", 1e-8)),
        max_iter=int(vals.get("max_iter", 10_000)),
    )
    extras = {k: v for k, v in vals.items() if k not in _SPEC_KEYS or k == "mmc"}
    return spec, extras


def read_spec(path: str | Path) -> tuple[RegressionSpec, dict]:
    return parse_spec_text(Path(path).read_text())
