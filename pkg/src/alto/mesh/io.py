"""ASCII OBJ (vertices and triangular faces only) and XYZ point files."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from alto.errors import ContractError
from alto.mesh.marching import Mesh


def write_obj(path, mesh: Mesh) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {i + 1} {j + 1} {k + 1}" for i, j, k in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_obj(path) -> Mesh:
    """Read ``v`` and ``f`` records; polygons are fan-triangulated, other records ignored."""
    verts, faces = [], []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        try:
            if parts[0] == "v":
                verts.append([float(t) for t in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(t.split("/")[0]) for t in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                faces.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
        except ValueError:
            raise ContractError(f"{path}:{n}: malformed {parts[0]} record") from None
    return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def read_xyz(path) -> np.ndarray:
    """One ``x y z`` triple per line; blank lines and ``#`` comments are skipped."""
    rows = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ContractError(f"{path}:{n}: expected 3 values, got {len(parts)}")
        try:
            rows.append([float(t) for t in parts])
        except ValueError:
            raise ContractError(f"{path}:{n}: non-numeric coordinate") from None
    if not rows:
        raise ContractError(f"{path}: no points")
    return np.array(rows, dtype=np.float64)


def write_xyz(path, points: np.ndarray, header: str | None = None) -> None:
    lines = [] if header is None else [f"# {h}" for h in header.splitlines()]
    lines += [f"{x!r} {y!r} {z!r}" for x, y, z in np.asarray(points, dtype=np.float64).tolist()]
    Path(path).write_text("\n".join(lines) + "\n")
