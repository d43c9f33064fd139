"""Shared fixtures plus the acceptance-criteria summary printed after a run."""

from __future__ import annotations

import numpy as np
import pytest

from bnhtr import RenderOpts, build_atlas, build_vocab, render
from bnhtr.images import to_model_input

_ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def record_criterion(number: int, name: str, passed: bool, detail: str) -> None:
    """Store one acceptance-criterion verdict for the end-of-run summary."""
    _ACCEPTANCE.append((number, name, passed, detail))


def check_criterion(number: int, name: str, passed: bool, detail: str) -> None:
    record_criterion(number, name, passed, detail)
    assert passed, f"criterion {number} [{name}] failed: {detail}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(_ACCEPTANCE):
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number} [{name}]: {verdict} — {detail}")


WORDS = ["কলম", "বাংলা", "গ্রাম", "নদী", "আকাশ", "বই", "স্কুল", "মাটি"]


@pytest.fixture(scope="session")
def small_vocab():
    return build_vocab(WORDS)


@pytest.fixture(scope="session")
def small_atlas(small_vocab):
    return build_atlas(small_vocab, seed=7)


@pytest.fixture(scope="session")
def word_images(small_atlas):
    """(8, 3, 32, 64) float images for WORDS, rendered without distortion."""
    stack = np.stack(
        [
            to_model_input(
                render(w, small_atlas, RenderOpts(), seed=i).image.pixels[0], 32, 64
            )
            for i, w in enumerate(WORDS)
        ]
    )
    return stack.astype(np.float32)
