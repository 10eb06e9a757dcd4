"""
Schema definitions for batch run configuration.

A run is described by a flat ``key=value`` text file. Nested fields use dotted
keys (``mesh.n_layer=24``) and list fields take comma-separated values.
"""

import math
import typing
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Type, Union

from pydantic import BaseModel, Field, ValidationError, model_validator

from cuspbranch.geometry import GENERIC_ALPHA_BAR_MIN
from cuspbranch.utils.constant import Experiment
from cuspbranch.utils.errors import ConfigInvalid

DEFAULT_BETA = 1.5
GENERIC_MARGIN = 0.1
K_MAX_MARGIN = 8


class MeshParameters(BaseModel):
    """
    Parameters of the graded y-mesh.

    The mesh is uniform with spacing t_min^{2/3} / n_layer on the Airy layer
    core above y = 1, grows geometrically out to the end of the layer and is
    capped at h_max beyond it.
    """

    n_layer: int = Field(default=16, gt=0, description="Cells per t^{2/3} in the layer core")
    h_max: float = Field(default=0.05, gt=0.0, description="Largest cell width")
    core_widths: float = Field(
        default=2.0, gt=0.0, description="Uniform core length in units of t^{2/3}"
    )
    layer_widths: float = Field(
        default=10.0, gt=0.0, description="Graded layer length in units of t^{2/3}"
    )
    y_max: Optional[float] = Field(
        default=None, description="Cutoff height; derived from the energy range when unset"
    )
    points_per_wavelength: int = Field(
        default=12, gt=2, description="Nodes per local wavelength of oscillating profiles"
    )
    uniform_cells: Optional[int] = Field(
        default=None,
        gt=0,
        description="Use a uniform mesh with this many cells instead of the graded one",
    )
    refine_truncation: bool = Field(
        default=True,
        description="Grow y_max and double k_max until the watched eigenvalues settle",
    )
    truncation_tol: float = Field(
        default=1e-8, gt=0.0, description="Relative eigenvalue change accepted as settled"
    )
    max_refinements: int = Field(
        default=3, ge=1, description="Rounds of truncation refinement before giving up"
    )

    class Config:
        """Configuration for the MeshParameters model."""

        validate_assignment = True
        extra = "forbid"


class DiagnosticConstants(BaseModel):
    """
    Constants of the branch diagnostics.

    None of these are fixed by the theory; they set the windows in which the
    measurements are taken.
    """

    rho: float = Field(
        default=0.5, gt=0.0, lt=1.0, description="Mode-k mass threshold of the set K(t, rho)"
    )
    eta: float = Field(
        default=0.5, gt=0.0, description="Crossing window |E - lambda0| <= eta t^{5/3}"
    )
    delta: float = Field(
        default=0.5, gt=0.0, description="Crossing window length delta t_n^{8/3}"
    )
    classify_tol: float = Field(
        default=0.1, gt=0.0, description="Snap tolerance of the limit classification"
    )
    window_halfwidth: float = Field(
        default=3.0, gt=0.0, description="Half width of the spectral window around (k pi)^2"
    )

    class Config:
        """Configuration for the DiagnosticConstants model."""

        validate_assignment = True
        extra = "forbid"


class RunConfig(BaseModel):
    """
    Parameters of one batch run.

    The experiment selects the runner; the remaining fields are shared and a
    runner ignores the ones it has no use for.
    """

    experiment: Experiment = Field(description="Experiment to run")
    beta: float = Field(
        default=DEFAULT_BETA, gt=1.0, description="Truncation height of the zero mode"
    )
    alpha_bar: float = Field(
        gt=1.0,
        description="Height above which the normalising map is the identity; derived when unset",
    )
    t_min: float = Field(default=0.02, gt=0.0, description="Smallest degeneration parameter")
    t_max: float = Field(default=0.3, gt=0.0, lt=1.0, description="Largest degeneration parameter")
    t_count: int = Field(default=20, ge=3, description="Number of log-spaced t samples")
    k_max: Optional[int] = Field(
        default=None, ge=0, description="Highest Fourier mode kept; k_target + 8 when unset"
    )
    k_target: int = Field(default=1, ge=0, description="Limit integer k of the studied branch")
    ell: int = Field(default=1, ge=1, description="Mode of the model-asymptotics experiment")
    branch_count: int = Field(default=3, ge=1, description="Number of branches to follow")
    seeds: List[float] = Field(
        default_factory=list,
        description="Seed energies at t_max; derived from the Airy law when empty",
    )
    n_max: int = Field(
        default=30, ge=1, description="Highest zero-mode index scanned for crossings"
    )
    eig_count: int = Field(default=6, ge=1, description="Eigenpairs per solve")
    c_values: List[float] = Field(default_factory=lambda: [0.0, 0.25], description="Sweep c values")
    w_fractions: List[float] = Field(
        default_factory=lambda: [0.25, 0.5, 0.75],
        description="Sweep w positions as fractions of (2c, c + 1)",
    )
    test_functions: int = Field(
        default=10, ge=1, description="Random test functions of the verify-forms experiment"
    )
    output_dir: str = Field(default="runs", description="Directory holding run directories")
    seed: int = Field(default=0, description="Seed of the random generator")
    mesh: MeshParameters = Field(default_factory=MeshParameters, description="Mesh parameters")
    diagnostics: DiagnosticConstants = Field(
        default_factory=DiagnosticConstants, description="Diagnostic constants"
    )

    class Config:
        """Configuration for the RunConfig model."""

        validate_assignment = True
        extra = "forbid"

    @model_validator(mode="before")
    @classmethod
    def fill_alpha_bar(cls, data: Any) -> Any:
        """Default alpha_bar = (beta + 1) / 2.

        A sweep needs alpha_bar > 2 + sqrt(3); when (beta + 1) / 2 falls short it
        takes alpha_bar = 2 + sqrt(3) + 0.1 and, unless beta was given,
        beta = 2 alpha_bar - 1 + 0.1.
        """
        if not isinstance(data, dict) or data.get("alpha_bar") is not None:
            return data
        try:
            beta = float(data.get("beta", DEFAULT_BETA))
            experiment = Experiment(data.get("experiment"))
        except (TypeError, ValueError):
            return data
        filled = dict(data)
        alpha_bar = (beta + 1.0) / 2.0
        if experiment is Experiment.SWEEP and alpha_bar <= GENERIC_ALPHA_BAR_MIN:
            alpha_bar = GENERIC_ALPHA_BAR_MIN + GENERIC_MARGIN
            if data.get("beta") is None:
                filled["beta"] = 2.0 * alpha_bar - 1.0 + GENERIC_MARGIN
        filled["alpha_bar"] = alpha_bar
        return filled

    @model_validator(mode="after")
    def check_ranges(self) -> "RunConfig":
        if not self.alpha_bar < self.beta:
            raise ValueError(f"alpha_bar={self.alpha_bar} must lie in (1, beta={self.beta})")
        if not self.t_min < self.t_max:
            raise ValueError(f"t_min={self.t_min} must be below t_max={self.t_max}")
        if self.experiment in (Experiment.CROSSINGS, Experiment.DEGENERATE):
            k = self.k_target
            if k >= 2 and not self.beta < k / (k - 1):
                raise ValueError(
                    f"beta={self.beta} violates 1 < beta < k/(k-1) = {k / (k - 1):.6g} for k={k}"
                )
            if self.k_max is not None and self.k_max < k:
                raise ValueError(f"k_max={self.k_max} must cover k_target={k}")
        if self.experiment is Experiment.SWEEP and self.alpha_bar <= GENERIC_ALPHA_BAR_MIN:
            raise ValueError(
                f"sweep needs alpha_bar > 2 + sqrt(3) = {GENERIC_ALPHA_BAR_MIN:.6f}"
            )
        return self

    @property
    def k_start(self) -> int:
        """Mode cutoff the truncation refinement starts from."""
        return self.k_max if self.k_max is not None else self.k_target + K_MAX_MARGIN

    @property
    def limit_energy(self) -> float:
        return (self.k_target * math.pi) ** 2

    @property
    def window(self) -> Tuple[float, float]:
        half = self.diagnostics.window_halfwidth
        return self.limit_energy - half, self.limit_energy + half


def _list_field(model: Type[BaseModel], name: str) -> bool:
    info = model.model_fields.get(name)
    return info is not None and typing.get_origin(info.annotation) in (list, List)


def _nested_model(model: Type[BaseModel], name: str) -> Optional[Type[BaseModel]]:
    info = model.model_fields.get(name)
    if info is not None and isinstance(info.annotation, type) and issubclass(
        info.annotation, BaseModel
    ):
        return info.annotation
    return None


def parse_config_text(text: str) -> Dict[str, Any]:
    """Turn ``key=value`` lines into a nested dict; ``#`` starts a comment."""
    data: Dict[str, Any] = {}
    errors = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {number}: expected key=value, got '{line}'")
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        model: Type[BaseModel] = RunConfig
        target = data
        *parents, leaf = key.split(".")
        for parent in parents:
            nested = _nested_model(model, parent)
            if nested is None:
                errors.append(f"line {number}: '{parent}' is not a section")
                break
            model = nested
            target = target.setdefault(parent, {})
        else:
            if _list_field(model, leaf):
                target[leaf] = [item.strip() for item in value.split(",") if item.strip()]
            else:
                target[leaf] = value
    if errors:
        raise ConfigInvalid(errors)
    return data


def build_config(data: Dict[str, Any]) -> RunConfig:
    """Validate a nested dict, mapping pydantic errors to ConfigInvalid."""
    try:
        return RunConfig(**data)
    except ValidationError as e:
        messages = []
        for err in e.errors():
            location = ".".join(str(p) for p in err["loc"]) or "config"
            messages.append(f"{location}: {err['msg']}")
        raise ConfigInvalid(messages) from e


def load_config(
    path: Union[str, Path], overrides: Optional[Dict[str, Any]] = None
) -> RunConfig:
    """Read and validate a run configuration file.

    Args:
        path: key=value config file
        overrides: top-level values taking precedence over the file

    Raises:
        ConfigInvalid: on unreadable files, malformed lines or failed validation
    """
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigInvalid([f"config: cannot read {path}: {e}"]) from e
    data = parse_config_text(text)
    data.update(overrides or {})
    return build_config(data)
