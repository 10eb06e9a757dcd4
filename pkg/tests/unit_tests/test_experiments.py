import math

import pandas as pd
import pytest

from cuspbranch.experiments.common import refine_truncation, resolve_truncation
from cuspbranch.experiments.degenerate import identity_changed
from cuspbranch.forms import assemble_a
from cuspbranch.modespace import uniform_grid
from cuspbranch.schemas.run_config import build_config


def _model_family(t):
    return lambda dofmap: assemble_a(t, dofmap)


class TestTruncation:
    def test_settled_truncation_is_kept(self, coarse_grid):
        truncation = refine_truncation(coarse_grid, 2, _model_family(0.3), count=3)
        assert truncation.refined
        assert truncation.converged
        assert truncation.rounds == 1
        assert truncation.change < 1e-8
        assert truncation.dofmap.k_max == 2
        assert truncation.dofmap.grid.y_max == pytest.approx(coarse_grid.y_max)

    def test_short_strip_grows(self):
        grid = uniform_grid(1.5, 1.6, 40, 1.25)
        truncation = refine_truncation(grid, 2, _model_family(0.3), count=3)
        assert truncation.dofmap.grid.y_max >= 2.6 - 1e-9
        assert truncation.dofmap.k_max == 2
        summary = truncation.as_summary()
        assert summary["y_max"] == truncation.dofmap.grid.y_max
        assert summary["rounds"] >= 1

    def test_refinement_can_be_switched_off(self, coarse_grid):
        config = build_config({"experiment": "degenerate", "mesh": {"refine_truncation": "false"}})
        truncation = resolve_truncation(config, coarse_grid, _model_family(0.3))
        assert not truncation.refined
        assert truncation.rounds == 0
        assert math.isnan(truncation.change)
        assert truncation.dofmap.k_max == config.k_target + 8
        assert truncation.dofmap.grid is coarse_grid


class TestIdentityChanged:
    masses = pd.DataFrame({"t": [0.3, 0.1, 0.05], "k_mass": [0.99, 0.9, 0.3]})

    def test_mass_loss_at_smallest_t(self):
        assert identity_changed(1, 1, self.masses, 0.5)
        assert not identity_changed(1, 1, self.masses, 0.2)

    def test_other_limit(self):
        kept = self.masses.assign(k_mass=0.95)
        assert identity_changed(0, 1, kept, 0.5)
        assert not identity_changed(1, 1, kept, 0.5)
