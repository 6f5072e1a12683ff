import json
import os

import numpy as np
import pytest

from dlhim.datasets import MANIFEST_FILE, load_dataset, load_record, record_name, reference_residual, save_dataset
from dlhim.errors import DatasetError
from dlhim.pde_problems import (DIFFUSION_COEFFICIENT, HELMHOLTZ_WAVENUMBER, SOURCE_FIELD, Grid1D,
                                ProblemKind, generate_instances)


def _write(path, kind=ProblemKind.DIFFUSION, count=3, seed=9, with_solution=True):
    coeff = DIFFUSION_COEFFICIENT if kind == ProblemKind.DIFFUSION else HELMHOLTZ_WAVENUMBER
    instances = generate_instances(kind, Grid1D(31), count, seed, coeff, SOURCE_FIELD, with_solution)
    save_dataset(instances, str(path), coeff, SOURCE_FIELD, seed)
    return instances


@pytest.mark.parametrize("kind", list(ProblemKind))
def test_round_trip(tmp_path, kind):
    original = _write(tmp_path, kind)
    dataset = load_dataset(str(tmp_path))
    assert dataset.kind == kind
    assert len(dataset) == 3 and dataset.has_solutions
    for a, b in zip(original, dataset):
        np.testing.assert_array_equal(a.system.rhs, b.system.rhs)
        np.testing.assert_array_equal(a.system.diag, b.system.diag)
        np.testing.assert_array_equal(a.solution, b.solution)
        assert (a.coeff_seed, a.source_seed) == (b.coeff_seed, b.source_seed)


def test_regeneration_is_byte_identical(tmp_path):
    _write(tmp_path / "a")
    _write(tmp_path / "b")
    names = sorted(os.listdir(tmp_path / "a"))
    assert names == sorted(os.listdir(tmp_path / "b"))
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_manifest_contents(tmp_path):
    _write(tmp_path, count=2, seed=4)
    manifest = json.loads((tmp_path / MANIFEST_FILE).read_text())
    assert manifest["count"] == 2
    assert manifest["master_seed"] == 4
    assert manifest["records"] == [record_name(0), record_name(1)]
    assert manifest["coefficient"]["clip_min"] == 0.3


def test_records_without_solution(tmp_path):
    _write(tmp_path, with_solution=False)
    dataset = load_dataset(str(tmp_path))
    assert not dataset.has_solutions
    assert np.isnan(reference_residual(dataset[0]))


def test_reference_solutions_solve_their_systems(tmp_path):
    _write(tmp_path, ProblemKind.HELMHOLTZ)
    for instance in load_dataset(str(tmp_path)):
        assert reference_residual(instance) <= 1e-10


def test_limit(tmp_path):
    _write(tmp_path)
    assert len(load_dataset(str(tmp_path), limit=2)) == 2


def test_missing_manifest(tmp_path):
    with pytest.raises(DatasetError, match="manifest"):
        load_dataset(str(tmp_path))


def test_truncated_record(tmp_path):
    _write(tmp_path)
    path = tmp_path / record_name(1)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(DatasetError):
        load_record(str(path))


def test_version_mismatch(tmp_path):
    _write(tmp_path)
    manifest_path = tmp_path / MANIFEST_FILE
    manifest = json.loads(manifest_path.read_text())
    manifest["format_version"] = "99"
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(DatasetError, match="version"):
        load_dataset(str(tmp_path))


def test_empty_dataset_refused(tmp_path):
    with pytest.raises(DatasetError):
        save_dataset([], str(tmp_path), DIFFUSION_COEFFICIENT, SOURCE_FIELD)
