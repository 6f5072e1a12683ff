"""
Datasets - Instance records on disk

A dataset directory holds one `.rec` container per instance (header: problem
kind, grid size, GRF configs, seeds; payloads k, f and optionally u*) and a
`manifest.json` listing the records in order with the format version.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from dlhim.containers import read_container, write_container
from dlhim.errors import DatasetError
from dlhim.pde_problems import (FieldSample, GrfConfig, Grid1D, ProblemInstance, ProblemKind,
                                assemble_diffusion, assemble_helmholtz)

logger = logging.getLogger(__name__)

FORMAT_VERSION = "1"
MANIFEST_FILE = "manifest.json"


@dataclass
class Dataset:
    instances: List[ProblemInstance]
    kind: ProblemKind
    n_interior: int
    master_seed: int = 0
    coefficient: Dict = field(default_factory=dict)
    source: Dict = field(default_factory=dict)

    def __len__(self):
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def __getitem__(self, index: int) -> ProblemInstance:
        return self.instances[index]

    @property
    def has_solutions(self) -> bool:
        return all(inst.solution is not None for inst in self.instances)


def record_name(index: int) -> str:
    return f"instance_{index:05d}.rec"


def _record_header(instance: ProblemInstance, coeff_cfg: GrfConfig, source_cfg: GrfConfig) -> Dict:
    k = instance.system.coefficient
    return {
        "format_version": FORMAT_VERSION,
        "kind": instance.kind.value,
        "n_interior": instance.grid.n_interior,
        "coefficient": asdict(coeff_cfg),
        "source": asdict(source_cfg),
        "coeff_seed": int(instance.coeff_seed),
        "source_seed": int(instance.source_seed),
        "k_with_boundary": bool(k.with_boundary),
    }


def save_dataset(instances: Sequence[ProblemInstance], out_dir: str, coeff_cfg: GrfConfig,
                 source_cfg: GrfConfig, master_seed: int = 0) -> str:
    """Write records + manifest; returns the manifest path."""
    if not instances:
        raise DatasetError("refusing to write an empty dataset")
    os.makedirs(out_dir, exist_ok=True)

    names = []
    for index, instance in enumerate(instances):
        payloads = {
            "k": instance.system.coefficient.values,
            "f": instance.system.rhs,
        }
        if instance.solution is not None:
            payloads["u"] = instance.solution
        name = record_name(index)
        write_container(os.path.join(out_dir, name),
                        _record_header(instance, coeff_cfg, source_cfg), payloads)
        names.append(name)

    first = instances[0]
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": first.kind.value,
        "n_interior": first.grid.n_interior,
        "master_seed": int(master_seed),
        "count": len(names),
        "with_solution": all(inst.solution is not None for inst in instances),
        "coefficient": asdict(coeff_cfg),
        "source": asdict(source_cfg),
        "records": names,
    }
    path = os.path.join(out_dir, MANIFEST_FILE)
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")

    logger.info("Wrote %d %s records (n=%d) to %s", len(names), first.kind.value,
                first.grid.n_interior, out_dir)
    return path


def _load_manifest(data_dir: str) -> Dict:
    path = os.path.join(data_dir, MANIFEST_FILE)
    if not os.path.exists(path):
        raise DatasetError(f"no dataset manifest at {path}")
    try:
        with open(path, "r") as f:
            manifest = json.load(f)
    except (json.JSONDecodeError, IOError) as e:
        raise DatasetError(f"unreadable manifest {path}: {e}")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"{path}: dataset version {manifest.get('format_version')!r}, "
                           f"expected {FORMAT_VERSION!r}")
    return manifest


def load_record(path: str) -> ProblemInstance:
    try:
        header, payloads = read_container(path)
    except (OSError, ValueError) as e:
        raise DatasetError(f"cannot read record: {e}")
    if header.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"{path}: record version {header.get('format_version')!r}")

    try:
        kind = ProblemKind(header["kind"])
        grid = Grid1D(int(header["n_interior"]))
        k = FieldSample(grid, payloads["k"], bool(header["k_with_boundary"]))
        f = payloads["f"]
        if kind == ProblemKind.DIFFUSION:
            system = assemble_diffusion(k, grid, f)
        else:
            system = assemble_helmholtz(k, grid, f)
    except (KeyError, ValueError) as e:
        raise DatasetError(f"{path}: inconsistent record ({e})")

    return ProblemInstance(system, payloads.get("u"), int(header["coeff_seed"]), int(header["source_seed"]))


def load_dataset(data_dir: str, limit: Optional[int] = None) -> Dataset:
    manifest = _load_manifest(data_dir)
    names = manifest.get("records", [])
    if limit is not None:
        names = names[:limit]
    instances = [load_record(os.path.join(data_dir, name)) for name in names]
    if not instances:
        raise DatasetError(f"dataset at {data_dir} lists no records")

    return Dataset(
        instances=instances,
        kind=ProblemKind(manifest["kind"]),
        n_interior=int(manifest["n_interior"]),
        master_seed=int(manifest.get("master_seed", 0)),
        coefficient=manifest.get("coefficient", {}),
        source=manifest.get("source", {}),
    )


def reference_residual(instance: ProblemInstance) -> float:
    """||f - A u*|| / ||f||, or NaN without a reference solution."""
    if instance.solution is None:
        return float("nan")
    f_norm = float(np.linalg.norm(instance.system.rhs))
    res = float(np.linalg.norm(instance.system.residual(instance.solution)))
    return res / f_norm if f_norm > 0 else res
