from pathlib import Path

import numpy as np
import pytest

from tripletbench import GroundTruth, Run, TripletTaxonomy, load_taxonomy

DATA = Path(__file__).parent / "data"


@pytest.fixture
def small_tax():
    return TripletTaxonomy(np.array([(0, 0, 0), (0, 1, 2), (1, 0, 2)]), 2, 2, 3)


@pytest.fixture(scope="session")
def challenge_tax():
    return load_taxonomy(DATA / "cholect50_taxonomy.csv")


def synthetic_corpus(tax, n_videos=3, n_frames=60, seed=0, density=0.04):
    """Random binary ground truth plus a noisy run correlated with it."""
    rng = np.random.default_rng(seed)
    c = tax.num_triplets
    labels, probs = {}, {}
    for k in range(n_videos):
        g = (rng.random((n_frames, c)) < density).astype(np.int8)
        g[rng.integers(0, n_frames, size=n_frames // 2), rng.integers(0, c, size=n_frames // 2)] = 1
        noise = rng.random((n_frames, c))
        probs[f"VID{k:02d}"] = np.clip(0.55 * g + 0.45 * noise, 0.0, 1.0)
        labels[f"VID{k:02d}"] = g
    return Run("team", probs), GroundTruth(labels)


@pytest.fixture
def corpus(challenge_tax):
    return synthetic_corpus(challenge_tax)


# ---------------------------------------------------------------- acceptance

_criteria: dict = {}


def pytest_runtest_logreport(report):
    marker = getattr(report, "acceptance", None)
    if marker is None:
        return
    if report.when == "call" or report.outcome == "failed":
        ok = report.outcome != "failed"
        _criteria[marker] = _criteria.get(marker, True) and ok


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("acceptance")
    if mark is not None:
        outcome.get_result().acceptance = mark.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if _criteria[n] else 'FAIL'}")
