from pathlib import Path
from typing import Callable, Dict

from cuspbranch.experiments.common import ExperimentOutput
from cuspbranch.experiments.crossings import run_crossings
from cuspbranch.experiments.degenerate import run_degenerate
from cuspbranch.experiments.model_asymptotics import run_model_asymptotics
from cuspbranch.experiments.sweep import run_sweep
from cuspbranch.experiments.verify_forms import run_verify_forms
from cuspbranch.schemas.run_config import RunConfig
from cuspbranch.utils.constant import Experiment

ExperimentRunner = Callable[[RunConfig, Path, int], ExperimentOutput]

# Registry of experiment runners mapped by experiment name
EXPERIMENT_RUNNERS: Dict[str, ExperimentRunner] = {
    Experiment.MODEL_ASYMPTOTICS.value: run_model_asymptotics,
    Experiment.DEGENERATE.value: run_degenerate,
    Experiment.CROSSINGS.value: run_crossings,
    Experiment.SWEEP.value: run_sweep,
    Experiment.VERIFY_FORMS.value: run_verify_forms,
}


def run_experiment(config: RunConfig, run_dir: Path, threads: int) -> ExperimentOutput:
    """
    Run the experiment named by the configuration.

    Args:
        config: validated run configuration
        run_dir: directory the runner may write extra artifacts to
        threads: worker pool size

    Returns:
        Tables, plot data and summary of the run

    Raises:
        ValueError: If the experiment is not supported
    """
    name = config.experiment.value
    runner = EXPERIMENT_RUNNERS.get(name)

    if not runner:
        supported = ", ".join(EXPERIMENT_RUNNERS.keys())
        raise ValueError(
            f"Unsupported experiment: '{name}'. Supported experiments are: {supported}"
        )

    return runner(config, run_dir, threads)
