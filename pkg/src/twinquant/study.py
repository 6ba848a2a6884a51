"""Metric-quality study: how well does each distance rank candidates by true loss change?

For one site at a time, every candidate step size quantizes that site's
operand (everything else stays FP). Each candidate gets four layer-output
distances plus the true change of the calibration loss, measured with a
full forward pass. That forward per candidate is the expensive part and is
only affordable because the model is small.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.stats import spearmanr

from . import metrics, vit
from .calibration import CalibrationCache
from .quant import UniformQuantParams, fake_quant_uniform
from .search import SearchConfig, gen_grid

COLUMNS = ("mse", "cosine", "pearson", "hessian")


def study_grid(max_abs: float, k: int, candidates: int) -> np.ndarray:
    """``candidates`` evenly spaced steps over ``(0, 1.2 * max_abs / 2^(k-1)]``."""
    if candidates < 1:
        raise ValueError("need at least one candidate")
    cfg = SearchConfig(k=k, alpha=0.0, beta=1.2, n=candidates + 1)
    return gen_grid(max_abs, cfg)


def _rank_corr(a, b) -> float | None:
    if len(a) < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return None
    rho = spearmanr(a, b).statistic
    return None if not math.isfinite(rho) else float(rho)


def site_rows(model: vit.Model, cache: CalibrationCache, site_id: str, k: int, candidates: int,
              x: np.ndarray, y_fp: np.ndarray, base_loss: np.ndarray) -> list[dict]:
    site = model.site(site_id)
    rec = cache.load_layer(site.layer)
    target = rec.a if site.operand == "A" else rec.b
    grid = study_grid(float(np.abs(target).max(initial=0.0)), k, candidates)
    rows = []
    for i, delta in enumerate(grid):
        p = UniformQuantParams(k, float(delta))
        if site.operand == "A":
            o_hat = np.matmul(fake_quant_uniform(rec.a, p), rec.b)
        else:
            o_hat = np.matmul(rec.a, fake_quant_uniform(rec.b, p))
        logits = vit.forward_quantized(model, x, {site_id: p}, kernel="float")
        dloss = float(np.mean(vit.cross_entropy(logits, y_fp) - base_loss))
        rows.append({
            "site": site_id,
            "index": i,
            "delta": float(delta),
            "mse": metrics.mse(rec.outputs, o_hat),
            "cosine": metrics.cosine_distance(rec.outputs, o_hat),
            "pearson": metrics.pearson_distance(rec.outputs, o_hat),
            "hessian": metrics.hessian_metric(rec.outputs, o_hat, rec.grads),
            "true_loss_change": dloss,
        })
    return rows


def compare_metrics(model: vit.Model, cache: CalibrationCache, sites: list[str] | None = None,
                    k: int = 8, candidates: int = 20) -> dict:
    """Rows per (site, candidate), per-site Spearman rho of each metric, and their means.

    The loss is the calibration set's mean ``CE(softmax(logits), y_fp)``, so
    its change is the mean KL divergence from the FP prediction. Rank
    correlations that are undefined (one candidate, or a constant column)
    are ``None`` and are skipped in the aggregate.
    """
    cache.check_model(model)
    sites = [s.id for s in model.sites] if sites is None else list(sites)
    for sid in sites:
        model.site(sid)
    inp = cache.inputs()
    x, y_fp = inp["x"], inp["y_fp"]
    base_loss = vit.cross_entropy(vit.forward(model, x)[0], y_fp)
    rows: list[dict] = []
    per_site: dict[str, dict] = {}
    for sid in sites:
        r = site_rows(model, cache, sid, k, candidates, x, y_fp, base_loss)
        rows.extend(r)
        true = [row["true_loss_change"] for row in r]
        per_site[sid] = {c: _rank_corr([row[c] for row in r], true) for c in COLUMNS}
    aggregate = {}
    for c in COLUMNS:
        vals = [v[c] for v in per_site.values() if v[c] is not None]
        aggregate[c] = float(np.mean(vals)) if vals else None
    counted = {c: sum(v[c] is not None for v in per_site.values()) for c in COLUMNS}
    return {
        "k": k,
        "candidates": candidates,
        "sites": sites,
        "rows": rows,
        "spearman": per_site,
        "aggregate_spearman": aggregate,
        "aggregate_count": counted,
    }


def format_table(result: dict) -> str:
    head = f"{'site':<36}" + "".join(f"{c:>10}" for c in COLUMNS)
    lines = [f"Spearman rank correlation with true loss change (k={result['k']}, "
             f"{result['candidates']} candidates)", head]

    def cell(v):
        return f"{'null':>10}" if v is None else f"{v:>10.4f}"

    for sid, rho in result["spearman"].items():
        lines.append(f"{sid:<36}" + "".join(cell(rho[c]) for c in COLUMNS))
    lines.append(f"{'aggregate (mean)':<36}" + "".join(cell(result["aggregate_spearman"][c]) for c in COLUMNS))
    return "\n".join(lines)
