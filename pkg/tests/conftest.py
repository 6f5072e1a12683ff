import os
import textwrap

import numpy as np
import pytest

from dlhim.pde_problems import (FieldSample, Grid1D, ProblemInstance, ProblemKind, assemble_diffusion,
                                direct_solve, make_instance)

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def unit_diffusion(n, rhs=None):
    """k = 1 diffusion: A = tridiag(-1, 2, -1) / h^2."""
    grid = Grid1D(n)
    k = FieldSample(grid, np.ones(n + 2), with_boundary=True)
    return assemble_diffusion(k, grid, rhs)


def unit_instance(n, seed=0):
    f = np.random.default_rng(seed).standard_normal(n)
    system = unit_diffusion(n, f)
    return ProblemInstance(system, direct_solve(system))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def diffusion_instance():
    return make_instance(ProblemKind.DIFFUSION, Grid1D(31), coeff_seed=11, source_seed=12)


@pytest.fixture
def helmholtz_instance():
    return make_instance(ProblemKind.HELMHOLTZ, Grid1D(31), coeff_seed=21, source_seed=22)


@pytest.fixture
def tiny_config(tmp_path):
    """Small but complete experiment YAML; returns its path."""
    text = textwrap.dedent(f"""\
        name: tiny
        seed: 3
        output_dir: {tmp_path / 'out'}
        threads: 1
        problem:
          kind: diffusion
        grids:
          train: 15
          test: [31]
        dataset:
          train_size: 6
          test_size: 3
        operator:
          kind: deeponet
          width: 8
          depth: 2
        objective:
          basis: residual
          norm: l2
        training:
          epochs: 2
          batch_size: 3
        smoother:
          sweeps: 3
        solvers:
          - strategy: fixed_step
            max_cycles: 20
          - strategy: physics_aware_aa
            memory: 3
            max_cycles: 20
        benchmark:
          seeds: [0]
          instances: 1
        """)
    path = tmp_path / "tiny.yaml"
    path.write_text(text)
    return str(path)
