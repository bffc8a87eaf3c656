import numpy as np
import pytest

from mcfkit.data import ColumnSpec, Dataset


def make_dataset(x, d, y, n_arms=None, kinds=None, names=None, ids=None, aux=None):
    """Dataset from arrays with continuous covariates x0, x1, ... by default."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    d = np.asarray(d)
    y = np.asarray(y, dtype=float)
    kinds = kinds or ["continuous"] * x.shape[1]
    names = names or [f"x{j}" for j in range(x.shape[1])]
    k = n_arms or int(d.max()) + 1
    schema = []
    for nm, kind, col in zip(names, kinds, x.T):
        ncat = int(col.max()) + 1 if kind == "unordered" else None
        schema.append(ColumnSpec(nm, kind, ("confounder", "heterogeneity", "policy"), ncat))
    schema.append(ColumnSpec("d", "unordered", ("treatment",), k))
    y2 = y if y.ndim == 2 else y[:, None]
    schema += [ColumnSpec(f"y{m}", roles=("outcome",)) for m in range(y2.shape[1])]
    for key in (aux or {}):
        schema.append(ColumnSpec(key, roles=("auxiliary",)))
    return Dataset(schema, x, d, y2, ids, aux or {})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
