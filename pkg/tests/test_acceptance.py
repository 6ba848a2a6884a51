"""Acceptance criteria, one test each. Every test prints a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s -v`` to see the lines inline;
they are also repeated in the terminal summary.
"""

import json
import time

import numpy as np

from conftest import TINY, jittered, record
from oracles import check_layer
from test_quant import round_clamp_oracle
from test_tensor import central_diff, fd_cases, rel_err
from twinquant import calibration, cli, formats, search, vit
from twinquant.quant import (
    TwinMode,
    TwinQuantParams,
    UniformQuantParams,
    fake_quant_twin,
    fake_quant_uniform,
    quantize_uniform_elementwise,
    twin_matmul,
)
from twinquant.search import SearchConfig, gen_twin_grid
from twinquant.tensor import gelu, softmax_rows
from twinquant.vit import ActClass

# drops measured once on the bundled seed (eval split of 10000 samples) and pinned
PINNED_DROPS = {("base", 8): -0.0014, ("ptq4vit", 8): 0.0003, ("base", 6): -0.0003, ("ptq4vit", 6): -0.0002}


def test_c1_uniform_formula_conformance():
    rng = np.random.default_rng(0)
    n = 10**5
    k = rng.integers(2, 17, n)
    delta = np.exp(rng.uniform(np.log(1e-4), np.log(10.0), n))
    # spread x across several quantization ranges and plant exact half-step ties
    x = rng.normal(0, 1, n) * delta * 2.0 ** (k - 1) * rng.choice([0.1, 1.0, 3.0], n)
    tie = rng.random(n) < 0.1
    x[tie] = (rng.integers(-40, 40, tie.sum()) + 0.5) * delta[tie]
    t0 = time.perf_counter()
    got = quantize_uniform_elementwise(x, delta, k)
    seconds = time.perf_counter() - t0
    want = np.array([round_clamp_oracle(float(a), float(d), int(b)) for a, d, b in zip(x, delta, k)])
    mismatches = int(np.sum(got != want))
    ok = mismatches == 0 and seconds < 1.0
    record(1, "uniform quantizer matches the scalar oracle", ok,
           f"{mismatches} mismatches of {n}, {seconds:.3f}s")
    assert ok


def dequant_twin_oracle(codes, p):
    """Decode twin codes from the bit layout alone."""
    codes = codes.astype(np.int64)
    flag = codes >> (p.k - 1)
    level = codes & ((1 << (p.k - 1)) - 1)
    r1 = level * p.delta_r1 * (-1.0 if p.mode is TwinMode.POST_GELU else 1.0)
    return np.where(flag == 1, level * p.delta_r2, r1)


def test_c2_twin_kernel_equivalence():
    rng = np.random.default_rng(1)
    worst = 0.0
    t0 = time.perf_counter()
    for i in range(1000):
        k = int(rng.choice([4, 6, 8]))
        m = int(rng.integers(0, 11))
        mode = TwinMode.POST_SOFTMAX if i % 2 else TwinMode.POST_GELU
        d2 = 2.0 ** (1 - k) if mode is TwinMode.POST_SOFTMAX else float(rng.uniform(0.01, 1.0))
        p = TwinQuantParams(k, m, mode, np.ldexp(d2, -m))
        q = UniformQuantParams(k, float(rng.uniform(0.001, 0.5)))
        M, K, N = (int(v) for v in rng.integers(1, 17, 3))
        a = rng.integers(0, 1 << k, (M, K)).astype(np.uint8)
        b = rng.integers(-(1 << (k - 1)), 1 << (k - 1), (K, N))
        got = twin_matmul(a, p, b, q)
        ref = dequant_twin_oracle(a, p) @ (b * q.delta)
        scale = max(float(np.abs(ref).max()), float((np.abs(dequant_twin_oracle(a, p)) @ np.abs(b * q.delta)).max()),
                    1e-300)
        worst = max(worst, float(np.abs(got - ref).max()) / scale)
    seconds = time.perf_counter() - t0
    ok = worst <= 1e-12 and seconds < 10
    record(2, "twin matmul equals dequantize-then-matmul", ok, f"worst rel {worst:.2e}, {seconds:.2f}s")
    assert ok


def best_mse(x, candidates, fq):
    return min(float(np.mean((fq(x, p) - x) ** 2)) for p in candidates)


def test_c3_twin_beats_uniform():
    rng = np.random.default_rng(2)
    n, k = 10**5, 6
    rows = -(-n // 197)
    soft = softmax_rows(rng.normal(size=(rows, 197))).reshape(-1)[:n]
    gel = gelu(rng.normal(size=n))
    cfg = SearchConfig.ptq4vit(k)
    t0 = time.perf_counter()
    out = {}
    for name, x, kind in (("softmax", soft, ActClass.POST_SOFTMAX), ("gelu", gel, ActClass.POST_GELU)):
        mx = float(np.abs(x).max())
        uni = best_mse(x, search.uniform_candidates(mx, cfg), fake_quant_uniform)
        twin = best_mse(x, gen_twin_grid(kind, mx, cfg), fake_quant_twin)
        out[name] = (twin, uni)
    seconds = time.perf_counter() - t0
    ok = all(t < u for t, u in out.values()) and seconds < 30
    detail = ", ".join(f"{k_}: twin {t:.3e} vs uniform {u:.3e}" for k_, (t, u) in out.items())
    record(3, "twin beats single uniform at k=6", ok, f"{detail}, {seconds:.1f}s")
    assert ok


def test_c4_gradient_fidelity():
    t0 = time.perf_counter()
    worst = {}
    for seed in range(3):
        for name, f, x, analytic in fd_cases(seed):
            worst[name] = max(worst.get(name, 0.0), rel_err(central_diff(f, x), analytic))
    model = jittered(TINY)
    x = np.random.default_rng(2).normal(size=(3, TINY.num_patches, TINY.patch_dim))
    target = softmax_rows(vit.forward(jittered(TINY, seed=9), x)[0])
    grads = vit.backward_output_grads(model, x, target)
    tr = vit.run(model, x)
    for lid, g in grads.items():
        shape = tr.taps[lid].shape

        def f(delta, lid=lid):
            return vit.loss(model, x, target, {lid: delta})

        worst[f"output_grads.{lid}"] = rel_err(central_diff(f, np.zeros(shape)), g)
    seconds = time.perf_counter() - t0
    name, val = max(worst.items(), key=lambda kv: kv[1])
    ok = val <= 1e-5 and seconds < 30
    record(4, "vjps and output gradients match finite differences", ok,
           f"{len(worst)} checks, worst {val:.2e} ({name}), {seconds:.1f}s")
    assert ok


def test_c5_argmin_correctness(seed_dir):
    model = formats.load_checkpoint(seed_dir / "model.tvit")
    cache = calibration.open_cache(seed_dir / "calib.ptqc", model)
    t0 = time.perf_counter()
    problems, checked = [], 0
    for cfg in (SearchConfig.ptq4vit(8), SearchConfig.base_ptq(8)):
        for layer in model.layers:
            rec = cache.load_layer(layer.id)
            res = search.search_layer(rec, cfg, layer.a.act_class)
            problems += check_layer(rec, res, cfg)
            checked += 2
    seconds = time.perf_counter() - t0
    ok = not problems and seconds < 120
    record(5, "search argmin equals exhaustive re-evaluation, rounds non-increasing", ok,
           f"{checked} sites over 2 modes, {len(problems)} problems, {seconds:.1f}s")
    assert ok, problems[:5]


def test_c6_metric_quality(seed_dir, tmp_path):
    t0 = time.perf_counter()
    rc = cli.main(["compare-metrics", "--model", str(seed_dir / "model.tvit"), "--cache",
                   str(seed_dir / "calib.ptqc"), "--format", "json", "--out", str(tmp_path / "study.json")])
    seconds = time.perf_counter() - t0
    agg = json.loads((tmp_path / "study.json").read_text())["aggregate_spearman"] if rc == 0 else {}
    ok = (rc == 0 and agg["hessian"] >= agg["cosine"] and agg["hessian"] >= agg["pearson"] and seconds < 300)
    detail = ", ".join(f"{k} {v:.4f}" for k, v in sorted(agg.items()))
    record(6, "Hessian metric ranks true loss change at least as well as cosine and Pearson", ok,
           f"{detail}, {seconds:.1f}s")
    assert ok


def test_c7_end_to_end_ordering(seed_runs):
    drops = {key: r["eval"]["accuracy_drop"] for key, r in seed_runs.items()}
    seconds = sum(r["seconds"] for r in seed_runs.values())
    order = {k: drops[("ptq4vit", k)] <= drops[("base", k)] for k in (8, 6)}
    pinned = all(round(drops[key] * 10**4) == round(v * 10**4) for key, v in PINNED_DROPS.items())
    ok = all(order.values()) and pinned and seconds < 300
    detail = "; ".join(
        f"k={k}: ptq4vit {drops[('ptq4vit', k)]:+.4f} vs base {drops[('base', k)]:+.4f}"
        f" ({'ok' if order[k] else 'violated'})" for k in (8, 6)
    )
    record(7, "accuracy drop PTQ4VIT <= BASE_PTQ at k=8 and k=6", ok,
           f"{detail}; fixtures {'match' if pinned else 'differ'}; {seconds:.1f}s")
    assert ok


def test_c8_determinism(seed_dir, seed_runs, tmp_path):
    d = tmp_path / "again"
    steps = [
        ["gen", "--out", str(d)],
        ["calibrate", "--model", str(d / "model.tvit"), "--samples", str(d / "calib.tdat"),
         "--out", str(d / "calib.ptqc")],
        ["quantize", "--model", str(d / "model.tvit"), "--cache", str(d / "calib.ptqc"), "--mode", "ptq4vit",
         "--k", "8", "--out", str(d / "report.json"), "--params", str(d / "params.ptqp")],
        ["eval", "--model", str(d / "model.tvit"), "--params", str(d / "params.ptqp"), "--data",
         str(d / "eval.tdat"), "--report", str(d / "report.json"), "--out", str(d / "eval.json")],
    ]
    codes = [cli.main(s) for s in steps]
    first = seed_runs[("ptq4vit", 8)]["dir"]
    pairs = {f: (seed_dir / f, d / f) for f in ("model.tvit", "train.tdat", "calib.tdat", "eval.tdat", "calib.ptqc")}
    pairs.update({f: (first / f, d / f) for f in ("report.json", "params.ptqp", "eval.json")})
    differ = [f for f, (a, b) in pairs.items() if not b.exists() or a.read_bytes() != b.read_bytes()]
    ok = codes == [0, 0, 0, 0] and not differ
    record(8, "two seeded pipeline runs give byte-identical artifacts", ok,
           f"{len(pairs) - len(differ)}/{len(pairs)} artifacts identical" + (f", differ: {differ}" if differ else ""))
    assert ok


def test_c9_invariant_suites(seed_dir, tmp_path):
    import test_quant
    import test_search
    import test_tensor

    results = {}

    def check(name, fn):
        try:
            fn()
            results[name] = True
        except Exception as exc:  # noqa: BLE001 - every failure is reported, none swallowed
            results[name] = f"{type(exc).__name__}: {exc}"

    check("softmax normalization", test_tensor.test_softmax_rows_normalized)
    check("twin shift identity", test_quant.test_shift_identity)
    check("representable point counts", test_quant.test_representable_point_count)
    check("sample permutation argmin invariance", test_search.test_sample_permutation_invariance)
    check("grad-scale argmin invariance", test_search.test_grad_scale_invariance)

    def site_order_tiny():
        m = jittered(TINY)
        x = np.random.default_rng(2).normal(size=(3, TINY.num_patches, TINY.patch_dim))
        cache = calibration.run_calibration(m, x, tmp_path / "tiny.ptqc")
        test_search.test_site_order_independence(cache, m)

    def site_order_seed():
        model = formats.load_checkpoint(seed_dir / "model.tvit")
        cache = calibration.open_cache(seed_dir / "calib.ptqc", model)
        cfg = SearchConfig.base_ptq(8)
        ref, _ = search.quantize_model(model, cache, cfg)
        ids = [l.id for l in model.layers]
        rev, _ = search.quantize_model(model, cache, cfg, order=ids[::-1])
        shuf, _ = search.quantize_model(model, cache, cfg, order=list(np.random.default_rng(0).permutation(ids)))
        assert ref.to_json() == rev.to_json() == shuf.to_json()

    def grad_scale_seed():
        model = formats.load_checkpoint(seed_dir / "model.tvit")
        cache = calibration.open_cache(seed_dir / "calib.ptqc", model)
        cfg = SearchConfig.ptq4vit(8, n=40)
        for layer in model.layers[::3]:
            rec = cache.load_layer(layer.id)
            a = search.search_layer(rec, cfg, layer.a.act_class)
            scaled = calibration.LayerRecord(rec.layer_id, rec.outputs, rec.grads * 7.3, rec.a, rec.b)
            b = search.search_layer(scaled, cfg, layer.a.act_class)
            assert (a.a_index, a.b_index) == (b.a_index, b.b_index), layer.id

    check("site-order independence (tiny model)", site_order_tiny)
    check("site-order independence (bundled seed)", site_order_seed)
    check("grad-scale argmin invariance (bundled seed)", grad_scale_seed)
    failed = {k: v for k, v in results.items() if v is not True}
    ok = not failed
    record(9, "property suites", ok, f"{len(results) - len(failed)}/{len(results)} pass"
           + (f"; failed: {failed}" if failed else ""))
    assert ok
