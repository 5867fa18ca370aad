import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mfvr.cli import ExperimentConfig, run_alpha_sweep
from mfvr.cross_entropy import EMConfig
from mfvr.models import beam_pair, plate_pair


@pytest.fixture(scope="session")
def beam_pair_built():
    return beam_pair(threads=2)


@pytest.fixture(scope="session")
def plate_pair_built():
    return plate_pair(threads=2)


@pytest.fixture(scope="session")
def fem_reports():
    """Desk-scale fixed-weight comparisons for both PDE problems.

    Thresholds are calibrated offline against the reported failure
    probabilities (desk-scale reference sizes); the online comparison uses
    the common-random-number sweep at equal cost, whose per-replication
    estimates feed the ordering tests.  The low-to-high-fidelity
    allocation ratio is a configuration choice; at desk scale the plate
    uses a smaller ratio than the full-size tables since its pair
    correlation cannot amortise a large high-fidelity sacrifice.
    """
    reports = {}
    for problem, opts, rho in (
        ("beam", {"target_pf_hf": 1.173e-3, "target_pf_lf": 2.2428e-2,
                  "n_ref_hf": 86_000, "n_ref_lf": 4_500}, 4.0),
        ("plate", {"target_pf_hf": 0.02, "target_pf_lf": 0.03}, 2.0),
    ):
        start = time.time()
        cfg = ExperimentConfig(
            problem=problem, budget=90, replications=40, seed=42, threads=2,
            lf_hf_ratio=rho, em=EMConfig(n_s=5000, tau=0.1, k_init=5),
            problem_options=opts,
        )
        reports[problem] = (run_alpha_sweep(cfg, include_ensembles=False),
                            time.time() - start)
    return reports
