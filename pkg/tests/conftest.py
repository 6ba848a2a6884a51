import numpy as np
import pytest

from twinquant import cli, vit

# acceptance results, printed once at the end of the session
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def record(num: int, name: str, ok: bool, detail: str = "") -> None:
    ACCEPTANCE[num] = (name, bool(ok), detail)
    print(f"{'PASS' if ok else 'FAIL'}  [{num}] {name}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[num]
        tr.write_line(f"{'PASS' if ok else 'FAIL'}  [{num}] {name}  {detail}")


TINY = vit.ModelConfig(num_patches=4, patch_dim=3, hidden=8, heads=2, blocks=1, mlp_ratio=2, classes=3, seed=5)


def jittered(cfg: vit.ModelConfig, scale: float = 0.3, seed: int = 1) -> vit.Model:
    """Seeded model with O(1) parameters so every path carries signal."""
    m = vit.build_model(cfg)
    rng = np.random.default_rng(seed)
    return m.with_params({k: v + rng.normal(0, scale, v.shape) for k, v in m.params.items()})


@pytest.fixture
def tiny_model():
    return jittered(TINY)


@pytest.fixture
def tiny_x():
    return np.random.default_rng(2).normal(size=(3, TINY.num_patches, TINY.patch_dim))


@pytest.fixture(scope="session")
def small_pipeline(tmp_path_factory):
    """A quickly trained default-shaped model with calibration cache (not the bundled seed)."""
    d = tmp_path_factory.mktemp("small")
    assert cli.main(["gen", "--out", str(d), "--train-epochs", "2", "--train-size", "500",
                     "--eval-size", "400"]) == 0
    assert cli.main(["calibrate", "--model", str(d / "model.tvit"), "--samples", str(d / "calib.tdat"),
                     "--num-samples", "8", "--out", str(d / "calib.ptqc")]) == 0
    return d


@pytest.fixture(scope="session")
def seed_dir(tmp_path_factory):
    """The bundled seed: default ``gen`` flags, then default calibration."""
    d = tmp_path_factory.mktemp("seed")
    assert cli.main(["gen", "--out", str(d)]) == 0
    assert cli.main(["calibrate", "--model", str(d / "model.tvit"), "--samples", str(d / "calib.tdat"),
                     "--out", str(d / "calib.ptqc")]) == 0
    return d


@pytest.fixture(scope="session")
def seed_runs(seed_dir):
    """``quantize`` then ``eval`` on the bundled seed for both modes at k=8 and k=6."""
    import json
    import time

    runs = {}
    for mode in ("base", "ptq4vit"):
        for k in (8, 6):
            d = seed_dir / f"{mode}_k{k}"
            d.mkdir()
            t0 = time.perf_counter()
            rc = cli.main(["quantize", "--model", str(seed_dir / "model.tvit"), "--cache", str(seed_dir / "calib.ptqc"),
                           "--mode", mode, "--k", str(k), "--out", str(d / "report.json"),
                           "--params", str(d / "params.ptqp")])
            rc2 = cli.main(["eval", "--model", str(seed_dir / "model.tvit"), "--params", str(d / "params.ptqp"),
                            "--data", str(seed_dir / "eval.tdat"), "--report", str(d / "report.json"),
                            "--out", str(d / "eval.json")])
            seconds = time.perf_counter() - t0
            assert rc == rc2 == 0
            runs[(mode, k)] = {"dir": d, "eval": json.loads((d / "eval.json").read_text()), "seconds": seconds}
    return runs
