"""OLS hedge regression, ADF unit-root statistic and Engle-Granger test."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np
import pandas as pd
from scipy.stats import norm

P_FLOOR, P_CEIL = 1e-6, 1.0 - 1e-6


class SingularDesignError(ValueError):
    pass


@dataclass(frozen=True)
class OlsFit:
    alpha: float
    beta: float
    residuals: np.ndarray
    r_squared: float


def ols(y, x) -> OlsFit:
    """Least squares ``y = alpha + beta * x + e``."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    if y.shape != x.shape or y.ndim != 1:
        raise ValueError("ols needs two equal-length 1-d series")
    if y.size < 3:
        raise ValueError("ols needs at least 3 observations")
    xc = x - x.mean()
    sxx = xc.dot(xc)
    if sxx <= 1e-14 * max(1.0, float(np.abs(x).max()) ** 2) * x.size:
        raise SingularDesignError("regressor is constant")
    yc = y - y.mean()
    beta = xc.dot(yc) / sxx
    alpha = y.mean() - beta * x.mean()
    resid = y - alpha - beta * x
    sst = yc.dot(yc)
    ssr = resid.dot(resid)
    r2 = 1.0 - ssr / sst if sst > 0 else 1.0
    return OlsFit(float(alpha), float(beta), resid, float(r2))


def schwert_max_lag(n_obs: int) -> int:
    return int(math.floor(12.0 * (n_obs / 100.0) ** 0.25))


def _adf_design(x: np.ndarray, lags: int, start: int, constant: bool):
    """Regress dx_t on x_{t-1}, dx_{t-1..t-lags} (and a constant) for t >= start."""
    dx = np.diff(x)
    rows = np.arange(start, dx.size)
    cols = [x[rows]]
    cols.extend(dx[rows - i] for i in range(1, lags + 1))
    if constant:
        cols.append(np.ones(rows.size))
    return dx[rows], np.column_stack(cols)


def _ols_t_first(y: np.ndarray, X: np.ndarray):
    n, k = X.shape
    if n <= k:
        raise SingularDesignError("not enough observations for the ADF regression")
    q, r = np.linalg.qr(X)
    diag = np.abs(np.diag(r))
    if diag.min() <= 1e-10 * max(diag.max(), 1e-300):
        raise SingularDesignError("ADF design matrix is singular")
    coef = np.linalg.solve(r, q.T @ y)
    resid = y - X @ coef
    ssr = float(resid.dot(resid))
    rinv = np.linalg.solve(r, np.eye(k))
    var0 = (ssr / (n - k)) * rinv[0].dot(rinv[0])
    return float(coef[0]), math.sqrt(var0) if var0 > 0 else 0.0, ssr, n


def adf_statistic(series, deterministic: str = "constant", max_lag: int | None = None,
                  lag_rule: str = "aic") -> tuple[float, int]:
    """ADF t-statistic on the lagged level and the number of lagged differences used.

    With ``lag_rule="aic"`` every lag up to ``max_lag`` is fitted on a common
    sample and the AIC minimizer is refitted on its largest available sample.
    """
    x = np.asarray(series, dtype=float)
    if deterministic not in ("none", "constant"):
        raise ValueError(f"unknown deterministic term {deterministic!r}")
    constant = deterministic == "constant"
    if max_lag is None:
        max_lag = schwert_max_lag(x.size)
    if max_lag < 0:
        raise ValueError("max_lag must be >= 0")
    if x.size <= max_lag + 2:
        raise ValueError(f"series of length {x.size} too short for max_lag={max_lag}")
    if not np.all(np.isfinite(x)):
        raise ValueError("series contains non-finite values")

    if lag_rule == "fixed":
        lag = max_lag
    elif lag_rule == "aic":
        best_aic, lag = math.inf, 0
        for p in range(max_lag + 1):
            y, X = _adf_design(x, p, max_lag, constant)
            n, k = X.shape
            if n <= k:
                break
            coef, *_ = np.linalg.lstsq(X, y, rcond=None)
            resid = y - X @ coef
            ssr = float(resid.dot(resid))
            if ssr <= 0:
                aic = -math.inf
            else:
                llf = -n / 2.0 * (math.log(2 * math.pi) + math.log(ssr / n) + 1.0)
                aic = -2.0 * llf + 2.0 * k
            if aic < best_aic:
                best_aic, lag = aic, p
    else:
        raise ValueError(f"unknown lag rule {lag_rule!r}")

    y, X = _adf_design(x, lag, lag, constant)
    coef, se, _, _ = _ols_t_first(y, X)
    if se == 0:
        raise SingularDesignError("ADF regression has a perfect fit")
    return coef / se, lag


@lru_cache(maxsize=1)
def _surfaces() -> dict:
    text = resources.files("saecluster").joinpath("data/mackinnon.json").read_text()
    return json.loads(text)["cases"]


def adf_pvalue(stat: float, case: str = "standard_constant") -> float:
    """Approximate p-value from the MacKinnon response surface, clamped to (0, 1)."""
    if not math.isfinite(stat):
        if stat == -math.inf:
            return P_FLOOR
        raise ValueError("ADF statistic must be finite")
    try:
        c = _surfaces()[case]
    except KeyError:
        raise ValueError(f"unknown p-value case {case!r}") from None
    if c["tau_max"] is not None and stat > c["tau_max"]:
        p = 1.0
    elif stat < c["tau_min"]:
        p = 0.0
    else:
        coef = c["small_p"] if stat <= c["tau_star"] else c["large_p"]
        p = float(norm.cdf(sum(b * stat ** k for k, b in enumerate(coef))))
    return min(max(p, P_FLOOR), P_CEIL)


def critical_value(level: float, case: str = "standard_constant", n_obs: float = math.inf) -> float:
    """Finite-sample critical value ``b0 + b1/T + b2/T^2 + b3/T^3``."""
    cv = _surfaces()[case]["critical_values"][f"{level:.2f}"]
    inv = 0.0 if math.isinf(n_obs) else 1.0 / n_obs
    return float(sum(b * inv ** k for k, b in enumerate(cv)))


@dataclass
class CointConfig:
    p_max: float = 0.01
    max_lag: int | None = None
    lag_rule: str = "aic"
    min_obs: int = 100


@dataclass
class CointResult:
    id_a: str
    id_b: str
    alpha: float
    beta: float
    adf_stat: float
    lag: int
    p_value: float
    is_cointegrated: bool
    n_obs: int
    zero_variance: bool = False
    fit: OlsFit | None = None

    def row(self) -> dict:
        return {"id_a": self.id_a, "id_b": self.id_b, "beta": self.beta, "alpha": self.alpha,
                "adf_stat": self.adf_stat, "lag": self.lag, "p_value": self.p_value,
                "cointegrated": int(self.is_cointegrated)}


def engle_granger(price_a, price_b, config: CointConfig | None = None,
                  id_a: str = "a", id_b: str = "b") -> CointResult:
    """Two-step test: regress ``a`` on ``b``, then ADF (no deterministic terms) on the residuals."""
    config = config or CointConfig()
    a = np.asarray(price_a, dtype=float)
    b = np.asarray(price_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("price series are not aligned")
    if a.size < config.min_obs:
        raise ValueError(f"{a.size} aligned observations < minimum {config.min_obs}")
    fit = ols(a, b)
    resid = fit.residuals
    scale = max(float(np.std(a)), 1e-300)
    if float(np.std(resid)) <= 1e-10 * scale:
        return CointResult(id_a, id_b, fit.alpha, fit.beta, -math.inf, 0, P_FLOOR,
                           True, a.size, zero_variance=True, fit=fit)
    stat, lag = adf_statistic(resid, "none", config.max_lag, config.lag_rule)
    p = adf_pvalue(stat, "eg_residuals_2var")
    return CointResult(id_a, id_b, fit.alpha, fit.beta, stat, lag, p, p < config.p_max,
                       a.size, fit=fit)


def write_coint_report(results, path) -> None:
    cols = ["id_a", "id_b", "beta", "alpha", "adf_stat", "lag", "p_value", "cointegrated"]
    pd.DataFrame([r.row() for r in results], columns=cols).to_csv(
        path, index=False, float_format="%.10g")
