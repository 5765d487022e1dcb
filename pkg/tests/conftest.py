import numpy as np
import pytest

from ouukit import (MaternSpec, SemilinearProblem, assemble_mass, build_kle,
                    build_mesh, build_source_basis)


@pytest.fixture(scope="session")
def mesh12():
    return build_mesh(12, 12)


@pytest.fixture(scope="session")
def mass12(mesh12):
    return assemble_mass(mesh12, lumped=True)


@pytest.fixture(scope="session")
def kle12(mesh12):
    return build_kle(mesh12, MaternSpec(0.1, 5.0, -1.0), rank=10)


@pytest.fixture(scope="session")
def problem12(mesh12, mass12):
    src = build_source_basis(mesh12, 3, 0.08)
    return SemilinearProblem(mesh=mesh12, reaction=0.1, sources=src,
                             mass_lumped=mass12)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
