import re
from dataclasses import dataclass

import numpy as np
import pytest

from saecluster.pca import PcaModel, fit_pca
from saecluster.pipeline import YearGraphs, build_year_graphs
from saecluster.synth import SynthConfig, Universe, generate_universe


@dataclass
class World:
    universe: Universe
    model: PcaModel
    graphs: YearGraphs

    @property
    def panels(self):
        return {p.year: p for p in self.universe.panels}

    @property
    def returns(self):
        return {p.year: p.returns for p in self.universe.panels}


def build_world(config: SynthConfig, n_components: int = 40) -> World:
    u = generate_universe(config)
    vectors = [v for p in u.panels for v in p.summed_features.values()]
    model = fit_pca(vectors, n_components=min(n_components, len(vectors) - 1))
    return World(u, model, build_year_graphs(u.panels, model))


@pytest.fixture(scope="session")
def small_world() -> World:
    """60 companies in 4 sectors over 8 years, no prices."""
    cfg = SynthConfig(n_companies=60, n_sectors=4, start_year=2001, n_years=8, feature_dim=512,
                      with_prices=False, seed=11)
    return build_world(cfg)


def random_walk(rng: np.random.Generator, n: int, scale: float = 1.0) -> np.ndarray:
    return 50.0 + np.cumsum(rng.normal(scale=scale, size=n))


# one "criterion N: PASS|FAIL, details" line per acceptance check, shown after the run
ACCEPTANCE_LINES: dict[int, str] = {}
N_CRITERIA = 11


@pytest.fixture
def record_criterion():
    def record(number: int, passed: bool, details: str) -> bool:
        ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}, {details}"
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    ran = set()
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", getattr(rep, "nodeid", ""))
            if m:
                ran.add(int(m.group(1)))
    if not ran:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for k in range(1, N_CRITERIA + 1):
        if k in ACCEPTANCE_LINES:
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
        elif k in ran:
            terminalreporter.write_line(f"criterion {k}: FAIL, raised before reporting")
        else:
            terminalreporter.write_line(f"criterion {k}: not run")
