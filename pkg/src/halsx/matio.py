"""Dense-matrix CSV I/O: a ``rows,cols`` header line, then the values."""

import numpy as np


def write_matrix(path, M):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    with open(path, "w") as fh:
        fh.write(f"{M.shape[0]},{M.shape[1]}\n")
        for row in M:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_matrix(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if len(header) != 2:
            raise ValueError(f"expected 'rows,cols' header in {path}")
        rows, cols = int(header[0]), int(header[1])
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.shape != (rows, cols):
        raise ValueError(
            f"{path}: header says {(rows, cols)}, body has {data.shape}"
        )
    return data
