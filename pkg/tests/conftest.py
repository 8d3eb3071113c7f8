import numpy as np
import pytest

from fe2rom.materials import (ElasticParams, J2LinearHardening, J2LinearParams,
                              LinearElastic)
from fe2rom.mesh import INCLUSION, MATRIX, build_rve_mesh, homogeneous_rve_mesh
from fe2rom.rve import Rve

MATRIX_ELASTIC = ElasticParams(1.0, 0.3)
MATRIX_J2 = J2LinearParams(MATRIX_ELASTIC, 0.01, 0.016)
INCLUSION_ELASTIC = ElasticParams(10.0, 0.3)


def desk_materials():
    return {MATRIX: J2LinearHardening(MATRIX_J2),
            INCLUSION: LinearElastic(INCLUSION_ELASTIC)}


@pytest.fixture(scope='session')
def coarse_mesh():
    return build_rve_mesh(level='coarse')


@pytest.fixture(scope='session')
def coarse_rve(coarse_mesh):
    return Rve(coarse_mesh, desk_materials())


@pytest.fixture(scope='session')
def elastic_rve(coarse_mesh):
    return Rve(coarse_mesh, {MATRIX: LinearElastic(MATRIX_ELASTIC),
                             INCLUSION: LinearElastic(INCLUSION_ELASTIC)})


@pytest.fixture(scope='session')
def homogeneous_rve():
    return Rve(homogeneous_rve_mesh(3), {MATRIX: J2LinearHardening(MATRIX_J2)})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------------------
# Acceptance summary: one PASS/FAIL line per criterion
# ---------------------------------------------------------------------------
ACCEPTANCE = {}


def record_criterion(number, ok, detail):
    ACCEPTANCE[number] = ('PASS' if ok else 'FAIL', detail)
    return ok


def pytest_runtest_logreport(report):
    if report.when != 'call' or 'test_acceptance' not in report.nodeid:
        return
    name = report.nodeid.split('::')[-1]
    if name.startswith('test_criterion_') and report.failed:
        number = int(name.split('_')[2])
        if number not in ACCEPTANCE:
            msg = str(report.longrepr).strip().splitlines()[-1]
            ACCEPTANCE[number] = ('FAIL', f"error: {msg}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section('acceptance criteria')
    for number in sorted(ACCEPTANCE):
        verdict, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {verdict}  {detail}")
