"""Scaling-factor search over cached calibration data.

For each layer ``O = A @ B`` the search alternates: hold B's parameters,
pick A's best candidate; hold A's, pick B's best. Candidates are scored by
comparing the layer's FP output with the output recomputed from quantized
operands. Every layer reads only FP cache data, so layers can be searched
in any order with identical results.
"""

from __future__ import annotations

import enum
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import formats
from .calibration import CalibrationCache, LayerRecord
from .errors import DimensionError, InvariantViolation
from .metrics import MetricKind, candidate_scores
from .quant import (
    TwinMode,
    TwinQuantParams,
    UniformQuantParams,
    quantize_twin,
    quantize_uniform,
    twin_signed_levels,
)
from .vit import ActClass, Layer, Model

_EXACT_F64 = 2.0**53
DEGENERATE_DELTA = float(np.finfo(np.float64).eps)


class SearchMode(enum.Enum):
    BASE_PTQ = "base"
    PTQ4VIT = "ptq4vit"


@dataclass(frozen=True)
class SearchConfig:
    k: int = 8
    alpha: float = 0.0
    beta: float = 1.2
    n: int = 100
    rounds: int = 3
    metric: MetricKind = MetricKind.HESSIAN
    m_candidates: tuple[int, ...] = tuple(range(11))
    mode: SearchMode = SearchMode.PTQ4VIT
    batch_size: int = 32

    def __post_init__(self):
        object.__setattr__(self, "metric", MetricKind(self.metric))
        object.__setattr__(self, "mode", SearchMode(self.mode))
        object.__setattr__(self, "m_candidates", tuple(int(m) for m in self.m_candidates))
        if self.n < 1 or self.rounds < 1 or self.batch_size < 1:
            raise ValueError("n, rounds and batch_size must be >= 1")
        if not self.beta > self.alpha >= 0:
            raise ValueError("need 0 <= alpha < beta")
        if any(m < 0 for m in self.m_candidates) or not self.m_candidates:
            raise ValueError("m_candidates must be non-empty and non-negative")

    @classmethod
    def base_ptq(cls, k: int = 8, **overrides) -> "SearchConfig":
        kw = dict(k=k, alpha=0.5, beta=1.2, n=100, rounds=1, metric=MetricKind.COSINE,
                  mode=SearchMode.BASE_PTQ)
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def ptq4vit(cls, k: int = 8, **overrides) -> "SearchConfig":
        kw = dict(k=k, alpha=0.0, beta=1.2, n=100, rounds=3, metric=MetricKind.HESSIAN,
                  m_candidates=tuple(range(11)), mode=SearchMode.PTQ4VIT)
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def for_mode(cls, mode, k: int = 8, **overrides) -> "SearchConfig":
        mode = SearchMode(mode)
        return cls.base_ptq(k, **overrides) if mode is SearchMode.BASE_PTQ else cls.ptq4vit(k, **overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["metric"] = self.metric.value
        d["mode"] = self.mode.value
        d["m_candidates"] = list(self.m_candidates)
        return d


# ---------------------------------------------------------------------------
# candidate grids
# ---------------------------------------------------------------------------


def gen_grid(max_abs: float, cfg: SearchConfig) -> np.ndarray:
    """Linear candidates over ``[alpha, beta] * max_abs / 2^(k-1)``, non-positive ones dropped.

    An all-zero operand (``max_abs == 0``) gets a single tiny step.
    """
    if not math.isfinite(max_abs) or max_abs < 0:
        raise ValueError(f"max_abs must be finite and non-negative, got {max_abs}")
    if max_abs == 0:
        return np.array([DEGENERATE_DELTA])
    base = max_abs / 2 ** (cfg.k - 1)
    if cfg.n == 1:
        grid = np.array([cfg.beta * base])
    else:
        grid = np.linspace(cfg.alpha * base, cfg.beta * base, cfg.n)
    grid = np.unique(grid[grid > 0])
    if grid.size == 0:
        return np.array([DEGENERATE_DELTA])
    return grid


def gen_twin_grid(kind, max_abs: float, cfg: SearchConfig) -> list[TwinQuantParams]:
    """Twin candidates for a post-softmax or post-GELU operand.

    Post-softmax fixes the R2 step at ``1/2^(k-1)`` and varies ``m``.
    Post-GELU searches the R2 step and ``m`` jointly (full cross product).
    """
    kind = TwinMode(kind.value if isinstance(kind, ActClass) else kind)
    if kind is TwinMode.POST_SOFTMAX:
        return [TwinQuantParams.post_softmax(cfg.k, m) for m in cfg.m_candidates]
    return [
        TwinQuantParams.post_gelu(cfg.k, float(d), m)
        for d in gen_grid(max_abs, cfg)
        for m in cfg.m_candidates
    ]


def uniform_candidates(max_abs: float, cfg: SearchConfig) -> list[UniformQuantParams]:
    return [UniformQuantParams(cfg.k, float(d)) for d in gen_grid(max_abs, cfg)]


def _uses_twin(act_class: ActClass, cfg: SearchConfig) -> bool:
    return cfg.mode is SearchMode.PTQ4VIT and act_class in (ActClass.POST_SOFTMAX, ActClass.POST_GELU)


# ---------------------------------------------------------------------------
# candidate evaluation
# ---------------------------------------------------------------------------


def integer_operand(x: np.ndarray, p) -> tuple[np.ndarray, float, int]:
    """Quantized operand as integer-valued f64, its scale, and a bound on |values|."""
    if isinstance(p, TwinQuantParams):
        ints = twin_signed_levels(quantize_twin(x, p), p)
        return ints.astype(np.float64), p.delta_r1, p.max_level << p.m
    ints = quantize_uniform(x, p)
    return ints.astype(np.float64), p.delta, 1 << (p.k - 1)


def _stack_b(stack: np.ndarray, a_ndim: int, b_ndim: int) -> np.ndarray:
    """Insert broadcast axes so a stack of shared 2-D weights lines up with batched ``a``."""
    if b_ndim == 2 and a_ndim > 2:
        c = stack.shape[0]
        return stack.reshape((c,) + (1,) * (a_ndim - 2) + stack.shape[1:])
    return stack


def eval_candidates(
    record: LayerRecord,
    target: str,
    candidates: list,
    other,
    metric: MetricKind,
    batch_size: int = 32,
) -> np.ndarray:
    """Score each candidate for operand ``target`` ("A" or "B") with the other operand held.

    The quantized product is formed from integer codes. Code products are
    carried in f64 only when every partial sum is an exactly representable
    integer, so results are independent of summation order and batching.
    """
    if target not in ("A", "B"):
        raise ValueError(f"target must be 'A' or 'B', got {target!r}")
    if not candidates:
        raise ValueError("empty candidate list")
    metric = MetricKind(metric)
    a, b = record.a, record.b
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"{record.layer_id}: operands {a.shape} x {b.shape} do not chain")
    fixed_src, var_src = (b, a) if target == "A" else (a, b)
    inner = a.shape[-1]
    if other is None:
        fixed, fixed_scale, fixed_bound = fixed_src, 1.0, math.inf
    else:
        fixed, fixed_scale, fixed_bound = integer_operand(fixed_src, other)
    scores = np.empty(len(candidates))
    for start in range(0, len(candidates), batch_size):
        chunk = candidates[start : start + batch_size]
        parts = [integer_operand(var_src, p) for p in chunk]
        stack = np.stack([p[0] for p in parts])
        scales = np.array([p[1] for p in parts])
        bound = max(p[2] for p in parts) * fixed_bound * inner
        if target == "A":
            prod = np.matmul(stack, fixed) if bound < _EXACT_F64 else _int_path(stack, fixed, other)
        else:
            stack = _stack_b(stack, a.ndim, b.ndim)
            prod = np.matmul(fixed, stack) if bound < _EXACT_F64 else _int_path(fixed, stack, other)
        scale = (scales * fixed_scale).reshape((-1,) + (1,) * (prod.ndim - 1))
        o_hats = prod * scale
        scores[start : start + len(chunk)] = candidate_scores(metric, record.outputs, o_hats, record.grads)
    if not np.all(np.isfinite(scores)):
        raise InvariantViolation(f"{record.layer_id}: non-finite candidate score")
    return scores


def _int_path(a, b, other):
    if other is None:
        return np.matmul(a, b)
    return np.matmul(a.astype(np.int64), b.astype(np.int64)).astype(np.float64)


# ---------------------------------------------------------------------------
# per-layer search
# ---------------------------------------------------------------------------


@dataclass
class LayerResult:
    layer_id: str
    a_params: object
    b_params: object
    a_index: int
    b_index: int
    a_candidates: list
    b_candidates: list
    steps: list[dict] = field(default_factory=list)
    degenerate: dict = field(default_factory=dict)

    @property
    def score(self) -> float:
        return self.steps[-1]["best"]

    @property
    def round_scores(self) -> list[float]:
        return [s["best"] for s in self.steps if s["operand"] == "B"]


def search_layer(
    record: LayerRecord,
    cfg: SearchConfig,
    a_class: ActClass = ActClass.GENERIC,
    a_candidates: list | None = None,
    b_candidates: list | None = None,
    b_init=None,
    freeze_b: bool = False,
) -> LayerResult:
    """Alternating search for one layer.

    B starts at ``max|B| / 2^(k-1)``. Each round picks the best A with B
    held, then the best B with A held; ties go to the lowest index. Grids
    can be supplied directly, and ``freeze_b`` keeps B at its initial value.
    """
    a_max = float(np.abs(record.a).max(initial=0.0))
    b_max = float(np.abs(record.b).max(initial=0.0))
    degenerate = {"A": a_max == 0.0, "B": b_max == 0.0}
    if a_candidates is None:
        if _uses_twin(a_class, cfg):
            a_candidates = gen_twin_grid(a_class, a_max, cfg)
        else:
            a_candidates = uniform_candidates(a_max, cfg)
    if b_candidates is None:
        b_candidates = uniform_candidates(b_max, cfg)
    if b_init is None:
        b_init = UniformQuantParams(cfg.k, b_max / 2 ** (cfg.k - 1) if b_max > 0 else DEGENERATE_DELTA)
    b_cur, b_idx = b_init, -1
    a_cur, a_idx = None, -1
    steps = []
    for r in range(cfg.rounds):
        s = eval_candidates(record, "A", a_candidates, b_cur, cfg.metric, cfg.batch_size)
        a_idx = int(np.argmin(s))
        a_cur = a_candidates[a_idx]
        steps.append({"round": r, "operand": "A", "scores": s, "index": a_idx, "best": float(s[a_idx])})
        if freeze_b:
            steps.append({"round": r, "operand": "B", "scores": s[[a_idx]], "index": b_idx,
                          "best": float(s[a_idx])})
            continue
        s = eval_candidates(record, "B", b_candidates, a_cur, cfg.metric, cfg.batch_size)
        b_idx = int(np.argmin(s))
        b_cur = b_candidates[b_idx]
        steps.append({"round": r, "operand": "B", "scores": s, "index": b_idx, "best": float(s[b_idx])})
    return LayerResult(record.layer_id, a_cur, b_cur, a_idx, b_idx, a_candidates, b_candidates,
                       steps, degenerate)


# ---------------------------------------------------------------------------
# whole-model search and reports
# ---------------------------------------------------------------------------


def params_to_dict(p) -> dict:
    if isinstance(p, TwinQuantParams):
        return {"type": "twin", "k": p.k, "m": p.m, "mode": p.mode.value,
                "delta_r1": p.delta_r1, "delta_r2": p.delta_r2}
    return {"type": "uniform", "k": p.k, "delta": p.delta}


def params_from_dict(d: dict):
    if d["type"] == "twin":
        return TwinQuantParams(d["k"], d["m"], TwinMode(d["mode"]), d["delta_r1"])
    return UniformQuantParams(d["k"], d["delta"])


@dataclass
class QuantReport:
    """Per-site chosen parameters and per-layer search diagnostics.

    Serializes to JSON with a fixed key order; float values round-trip
    exactly.
    """

    config: dict
    sites: dict[str, dict]
    layers: dict[str, dict]
    manifest: dict = field(default_factory=dict)

    def to_json(self) -> str:
        body = {"manifest": self.manifest, "config": self.config, "layers": self.layers, "sites": self.sites}
        return json.dumps(body, indent=2, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "QuantReport":
        d = json.loads(text)
        return cls(d["config"], d["sites"], d["layers"], d.get("manifest", {}))

    def params(self) -> dict:
        return {sid: params_from_dict(s["params"]) for sid, s in self.sites.items()}


def _site_entry(site, layer_res: LayerResult, operand: str, cfg: SearchConfig) -> dict:
    p = layer_res.a_params if operand == "A" else layer_res.b_params
    cands = layer_res.a_candidates if operand == "A" else layer_res.b_candidates
    idx = layer_res.a_index if operand == "A" else layer_res.b_index
    return {
        "layer": site.layer,
        "kind": site.kind.value,
        "act_class": site.act_class.value,
        "head": site.head,
        "params": params_to_dict(p),
        "candidate_index": idx,
        "candidates": len(cands),
        "metric": cfg.metric.value,
        "best_score": layer_res.score,
        "degenerate": layer_res.degenerate[operand],
    }


def quantize_model(
    model: Model,
    cache: CalibrationCache,
    cfg: SearchConfig,
    order: list[str] | None = None,
    run_manifest: dict | None = None,
    timings: dict | None = None,
) -> tuple[QuantReport, dict]:
    """Search every layer and return ``(report, params)``.

    ``order`` permutes the order layers are searched in; the output is
    always listed in topological order. Wall-clock times go into
    ``timings`` when given, never into the report.
    """
    cache.check_model(model)
    layers: list[Layer] = model.layers
    by_id = {l.id: l for l in layers}
    order = order or [l.id for l in layers]
    if sorted(order) != sorted(by_id):
        raise ValueError("search order must be a permutation of the model's layers")
    results: dict[str, LayerResult] = {}
    for lid in order:
        t0 = time.perf_counter()
        rec = cache.load_layer(lid)
        results[lid] = search_layer(rec, cfg, by_id[lid].a.act_class)
        if timings is not None:
            timings[lid] = time.perf_counter() - t0
    sites, layer_diag, params = {}, {}, {}
    for layer in layers:
        res = results[layer.id]
        layer_diag[layer.id] = {
            "best_score": res.score,
            "round_scores": res.round_scores,
            "a_candidates": len(res.a_candidates),
            "b_candidates": len(res.b_candidates),
        }
        for site, operand in ((layer.a, "A"), (layer.b, "B")):
            sites[site.id] = _site_entry(site, res, operand, cfg)
            params[site.id] = res.a_params if operand == "A" else res.b_params
    report = QuantReport(cfg.to_dict(), sites, layer_diag, run_manifest or {})
    return report, params


def with_config(cfg: SearchConfig, **kw) -> SearchConfig:
    return replace(cfg, **kw)


def save_report(path, report: QuantReport) -> None:
    with open(path, "w") as f:
        f.write(report.to_json())


def load_report(path) -> QuantReport:
    with open(path) as f:
        return QuantReport.from_json(f.read())


def report_digest(report: QuantReport) -> str:
    return formats.sha256_bytes(report.to_json().encode())
