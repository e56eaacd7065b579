import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FROZEN = json.loads((Path(__file__).parent / "oracles" / "frozen.json").read_text())


@pytest.fixture
def frozen():
    return FROZEN


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


class CliHarness:
    """Writes configs into a scratch directory and runs ``fmdt`` through ``main``."""

    def __init__(self, root: Path):
        self.root = root
        self.out = root / "runs"
        self._n = 0

    def config(self, cfg: dict, suffix: str = ".json") -> Path:
        self._n += 1
        path = self.root / f"cfg{self._n}{suffix}"
        if suffix == ".json":
            path.write_text(json.dumps(cfg))
        else:
            path.write_text(cfg)
        return path

    def run(self, command: str, cfg, *args, suffix: str = ".json", out: Path | None = None):
        """Returns ``(exit_code, run_dir or None, stderr)``."""
        import contextlib
        import io

        from fmdt.cli import main

        path = self.config(cfg, suffix)
        so, se = io.StringIO(), io.StringIO()
        with contextlib.redirect_stdout(so), contextlib.redirect_stderr(se):
            code = main([command, "--config", str(path), "--out", str(out or self.out), *args])
        text = so.getvalue().strip()
        return code, Path(text) if code == 0 else None, se.getvalue()


@pytest.fixture(scope="session")
def cli_world(tmp_path_factory):
    """Small datasets on disk plus a harness, shared by CLI-level tests."""
    from fmdt.core import Dataset
    from fmdt.datasets import blobs, k_points
    from fmdt.io import write_fmdt

    root = tmp_path_factory.mktemp("cli")
    files = {}

    def put(name, ds):
        files[name] = root / f"{name}.fmdt"
        write_fmdt(files[name], ds)

    put("one", Dataset(np.array([[0.75, -0.5]])))
    put("pts", k_points(10, 2, seed=0))
    put("blobs_train", blobs(64, seed=0))
    put("blobs_test", blobs(32, seed=1))
    pair = np.array([[1.0, 1.0, -1.0, -1.0], [1.0, -1.0, 1.0, -1.0]])
    put("pair", Dataset(pair))
    put("obs", Dataset((pair[0] * [0, 1, 0, 1])[None]))
    put("mask", Dataset(np.array([[0.0, 1.0, 0.0, 1.0]])))
    put("truth", Dataset(pair[:1]))
    files["problem"] = root / "problem.json"
    files["problem"].write_text(json.dumps({"observation": "obs.fmdt", "mask": "mask.fmdt"}))
    return CliHarness(root), {k: str(v) for k, v in files.items()}


# acceptance criterion number -> (passed, detail)
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 12):
        if n not in ACCEPTANCE:
            terminalreporter.write_line(f"criterion {n:2d}: not selected")
            continue
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
