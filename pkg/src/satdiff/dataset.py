"""On-disk instance datasets.

A dataset directory holds one DIMACS file per instance named
``<family>_<size>_<index>.cnf`` (size is n for 3-SAT, v for cliques), an
optional companion ``.solutions`` file per instance, and ``manifest.json``
recording how the directory was generated.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from satdiff.formula import CnfFormula, parse_solutions, read_dimacs, write_dimacs, write_solutions
from satdiff.generators import encode_3clique, gen_3sat, gen_er_graph, instance_rng
from satdiff.oracle import DEFAULT_CAP, enumerate_solutions
from satdiff.train import TrainExample

MANIFEST = "manifest.json"
_NAME = re.compile(r"^(?P<family>[a-z0-9]+)_(?P<size>\d+)_(?P<index>\d+)\.cnf$")


@dataclass
class Instance:
    path: Path
    family: str
    size: int
    index: int
    formula: CnfFormula

    @property
    def solutions_path(self) -> Path:
        return self.path.with_suffix(".solutions")


def instance_name(family: str, size: int, index: int) -> str:
    return f"{family}_{size}_{index}.cnf"


def _sub_seed(seed: int, index: int) -> int:
    return int(instance_rng(seed, index).integers(2**63))


def _write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def sample_3sat(sizes: tuple[int, int], mode: str, count: int, seed: int,
                start: int = 0) -> list[CnfFormula]:
    """Instances ``start .. start+count-1`` of the stream ``seed``.

    Instance i has n drawn uniformly from the inclusive range ``sizes`` and
    depends only on (seed, i).
    """
    lo, hi = sizes
    out = []
    for i in range(start, start + count):
        n = int(instance_rng(seed, i, 1).integers(lo, hi + 1))
        out.append(gen_3sat(n, mode, seed=_sub_seed(seed, i)))
    return out


def generate_3sat(out_dir, sizes: tuple[int, int], mode: str, count: int, seed: int,
                  enumerate_cap: int | None = None) -> list[Path]:
    """Write ``count`` instances of :func:`sample_3sat` to ``out_dir``."""
    lo, hi = sizes
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, f in enumerate(sample_3sat(sizes, mode, count, seed)):
        paths.append(_save(out / instance_name("3sat", f.num_vars, i), f, enumerate_cap))
    _write_manifest(out, {"family": "3sat", "vars": [lo, hi], "mode": mode, "count": count,
                          "seed": seed, "enumerate_cap": enumerate_cap})
    return paths


def generate_clique(out_dir, sizes: tuple[int, int], count: int, seed: int,
                    enumerate_cap: int | None = None) -> list[Path]:
    lo, hi = sizes
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        v = int(instance_rng(seed, i, 1).integers(lo, hi + 1))
        f, _ = encode_3clique(gen_er_graph(v, seed=_sub_seed(seed, i)))
        paths.append(_save(out / instance_name("clique", v, i), f, enumerate_cap))
    _write_manifest(out, {"family": "clique", "vertices": [lo, hi], "count": count,
                          "seed": seed, "enumerate_cap": enumerate_cap})
    return paths


def _save(path: Path, f: CnfFormula, enumerate_cap: int | None) -> Path:
    _write(path, write_dimacs(f))
    if enumerate_cap is not None:
        sols, _ = enumerate_solutions(f, enumerate_cap)
        _write(path.with_suffix(".solutions"), write_solutions(sols))
    return path


def _write_manifest(out: Path, record: dict) -> None:
    _write(out / MANIFEST, json.dumps(record, indent=2, sort_keys=True) + "\n")


def read_manifest(data_dir) -> dict:
    path = Path(data_dir) / MANIFEST
    return json.loads(path.read_text()) if path.exists() else {}


def load_instances(data_dir) -> list[Instance]:
    """All instances in ``data_dir`` sorted by (family, index)."""
    root = Path(data_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"no such dataset directory: {root}")
    out = []
    for path in root.iterdir():
        m = _NAME.match(path.name)
        if m is None:
            continue
        out.append(Instance(path, m["family"], int(m["size"]), int(m["index"]), read_dimacs(path)))
    if not out:
        raise FileNotFoundError(f"no .cnf instances in {root}")
    return sorted(out, key=lambda inst: (inst.family, inst.index))


def instance_solutions(inst: Instance, cap: int = DEFAULT_CAP) -> np.ndarray:
    """Solutions from the companion file, or enumerated if it is absent."""
    n = inst.formula.num_vars
    if inst.solutions_path.exists():
        sols = parse_solutions(inst.solutions_path.read_text(), num_vars=n)
    else:
        sols, _ = enumerate_solutions(inst.formula, cap)
    return np.array(sols, dtype=bool).reshape(-1, n)


def training_examples(instances: Sequence[Instance], mode: str = "first", seed: int = 0,
                      cap: int = DEFAULT_CAP):
    """One TrainExample per satisfiable instance; unsatisfiable ones are dropped.

    ``first`` takes the lexicographically first solution, ``uniform`` draws
    one uniformly from the (possibly capped) solution list.
    """
    if mode not in ("first", "uniform"):
        raise ValueError(f"unknown solution mode {mode!r}")
    out = []
    for inst in instances:
        if mode == "first" and not inst.solutions_path.exists():
            sols, _ = enumerate_solutions(inst.formula, cap=1)
            sols = np.array(sols, dtype=bool).reshape(-1, inst.formula.num_vars)
        else:
            sols = instance_solutions(inst, cap)
        if len(sols) == 0:
            continue
        if mode == "first":
            chosen = sols[0]
        else:
            chosen = sols[instance_rng(seed, inst.index, 2).integers(len(sols))]
        out.append(TrainExample(inst.formula, chosen))
    return out
