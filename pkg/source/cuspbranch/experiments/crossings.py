"""
Crossing times of the Airy-predicted branch with the zero-mode eigenvalues.
"""

import logging
import math
from pathlib import Path

import numpy as np
import pandas as pd

from cuspbranch.branches import predicted_crossings
from cuspbranch.experiments.common import ExperimentOutput
from cuspbranch.model import airy_predict, zero_mode_spectrum
from cuspbranch.schemas.run_config import RunConfig

logger = logging.getLogger(__name__)


def run_crossings(config: RunConfig, run_dir: Path, threads: int) -> ExperimentOutput:
    """Solve (k pi)^2 + a_1 t^{2/3} = c_n t^2 for n = 1..n_max and fit the two-term law."""
    output = ExperimentOutput()
    k = config.k_target
    if k < 1:
        raise ValueError("the crossings experiment needs k_target >= 1")
    prediction = airy_predict(k, 1)
    n_range = range(1, config.n_max + 1)
    result = predicted_crossings(k, config.beta, prediction, n_range)
    constants = zero_mode_spectrum(1.0, config.beta, config.n_max).constants
    target = k * math.log(config.beta)
    tau = result.tau_fit
    c = constants[: len(result.records)]
    table = pd.DataFrame(
        {
            "n": [r.n for r in result.records],
            "t_n": [r.t_n for r in result.records],
            "n_t_n": [r.n_t_n for r in result.records],
            "target_k_ln_beta": target,
            "residual": [r.residual for r in result.records],
            "two_term_law": k * math.pi * c**-0.5 + tau * c ** (-5.0 / 6.0),
        }
    )
    output.tables["crossings"] = table
    output.plots["crossings"] = (table, ["n", "t_n", "n_t_n"])
    final = float(table["n_t_n"].iloc[-1])
    output.summary.update(
        k=k,
        beta=config.beta,
        airy_coefficient=prediction.coefficient,
        tau_fit=tau,
        tau_expected=result.tau_expected,
        tau_relative_error=abs(tau - result.tau_expected) / abs(result.tau_expected),
        final_n_t_n=final,
        final_relative_error=abs(final - target) / target,
        strictly_decreasing=bool(np.all(np.diff(table["t_n"].to_numpy()) < 0.0)),
    )
    logger.info(
        "Crossings k=%d: final n t_n = %.6f against k ln beta = %.6f", k, final, target
    )
    return output
