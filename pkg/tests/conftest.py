import numpy as np
import pytest

from fieldattn import FieldSchema, generate_synthetic, make_teacher, synthetic_schema


@pytest.fixture
def small_schema():
    return FieldSchema(
        [("item", 12), ("cate", 6), ("ctx", 4)],
        [("b_item", 12), ("b_cate", 6)],
        max_behaviors=5,
        correspondence_map={"b_item": "item", "b_cate": "cate"},
    )


@pytest.fixture
def small_data(small_schema):
    teacher = make_teacher(small_schema, [(0, 0), (1, 1)], seed=3)
    train, test, _ = generate_synthetic(small_schema, teacher, 300, 120, seed=4, n_users=12)
    return train, test


@pytest.fixture
def synth_schema():
    return synthetic_schema(15, 2, 20, 20)


def random_block(rng, B, H, P, M, K):
    V = rng.normal(size=(B, H, P, K))
    Q = rng.normal(size=(B, M, K))
    lengths = rng.integers(0, H + 1, size=B)
    mask = np.arange(H)[None, :] < lengths[:, None]
    return V, Q, mask


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line for the acceptance summary, then return the verdict."""

    def _record(criterion, ok, detail):
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} | {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
