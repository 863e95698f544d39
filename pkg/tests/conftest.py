import numpy as np
import pytest

from mfamd.data import Kind, MixedDataset, VariableSpec


def mixed_dataset(N=20, A=2, B=1, C=1, K=3, seed=0):
    """Small random mixed dataset with every level observed."""
    rng = np.random.default_rng(seed)
    schema = (
        [VariableSpec(f"x{k}", Kind.CONTINUOUS) for k in range(A)]
        + [VariableSpec(f"b{k}", Kind.BINARY, ("0", "1")) for k in range(B)]
        + [VariableSpec(f"m{k}", Kind.NOMINAL, tuple(str(i) for i in range(K))) for k in range(C)]
    )
    codes = np.concatenate(
        [np.tile([0, 1], N)[:N, None].repeat(B, 1), np.tile(np.arange(K), N)[:N, None].repeat(C, 1)], axis=1
    )
    codes = rng.permuted(codes, axis=0)
    return MixedDataset(schema=tuple(schema), continuous=rng.standard_normal((N, A)), codes=codes)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_ds():
    return mixed_dataset()


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def report(criterion: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
