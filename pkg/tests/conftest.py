from __future__ import annotations

import numpy as np
import pytest

from oracles import plate_modes
from splatparse import flow as F
from splatparse import voxels as V


@pytest.fixture(scope="session")
def plate_latents():
    a, b = plate_modes(16)
    return a, b, V.encode_structure(a), V.encode_structure(b)


@pytest.fixture(scope="session")
def two_mode_flow(plate_latents):
    """Default-sized flow trained on a plate and its 90-degree rotation."""
    _, _, la, lb = plate_latents
    return F.train_toy_flow([la, lb], F.FlowConfig())


@pytest.fixture(scope="session")
def library_flow():
    lib = [V.encode_structure(g) for g in V.primitive_library(0, 64)]
    return F.train_toy_flow(lib, F.FlowConfig())


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line; the line is printed in the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _CRITERIA[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[k])
