import os
from pathlib import Path

import numpy as np
import pytest

from sparsefa.core import ModelConfig, ModelParams, RatingsTriples, validate_and_index
from sparsefa.data import generate_synthetic

ML100K = Path(os.environ.get("ML100K_DIR", Path(__file__).resolve().parents[1] / "data" / "ml-100k"))


@pytest.fixture(scope="session")
def ml100k_dir():
    if not (ML100K / "u1.base").exists():
        pytest.skip(f"ML-100K files not found in {ML100K}; run tools/fetch_ml100k.py")
    return ML100K


def random_params(variant, k, p, C, rng, psi_mode="per-item"):
    psi = rng.uniform(0.5, 1.5, size=C)
    if psi_mode == "shared":
        psi[:] = psi[0]
    v = ModelParams(
        variant=variant,
        beta=rng.standard_normal(p),
        loadings=rng.standard_normal((C, k)),
        psi=psi,
        psi_mode=psi_mode,
        sigma2_a=float(rng.uniform(0.3, 1.5)) if variant in ("intercept-client", "intercept-both", "factor-client", "factor-both") else None,
        sigma2_b=float(rng.uniform(0.3, 1.5)) if variant in ("intercept-both", "factor-both") else None,
    )
    return v


@pytest.fixture
def small_factor():
    data, truth = generate_synthetic(20, 8, 2, 3, 5, "factor", seed=3)
    return data, validate_and_index(data), truth


def complete_instance(R, C, K, p, seed, variant="factor"):
    return generate_synthetic(R, C, K, p, C, variant, seed=seed)


def det_config(variant, k, **kw):
    return ModelConfig(variant=variant, k=k, deterministic_init=True, **kw)


# -- acceptance reporting ----------------------------------------------------------

ACCEPTANCE_LINES = {}


def record_criterion(number, passed, detail):
    """Remember one pass/fail line per acceptance criterion; printed at the end of the run."""
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
