import socket

import numpy as np
import pytest

from relbridge import tensor as T
from relbridge.datasets import RelationalDataset, Split
from relbridge.graph import FKLink, ForeignKeySpec
from relbridge.table import Column, ColumnKind, Table


class NetworkBlocked(RuntimeError):
    pass


@pytest.fixture(autouse=True)
def no_network(monkeypatch):
    """Any attempt to open a socket fails the test."""

    def guard(*args, **kwargs):
        raise NetworkBlocked("network access attempted during tests")

    monkeypatch.setattr(socket.socket, "connect", guard)
    monkeypatch.setattr(socket.socket, "connect_ex", guard)
    monkeypatch.setattr(socket, "create_connection", guard)
    monkeypatch.setattr(socket, "getaddrinfo", guard)


def numeric_grad(f, x, h=1e-6):
    """Central differences of scalar ``f`` with respect to array ``x`` (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)


def check_grads(build, arrays, tol=1e-4, h=1e-6):
    """``build(*tensors) -> scalar Tensor``; compare autodiff with central differences.

    The error is measured jointly over all inputs of the instance, relative to
    the largest gradient entry, so inputs whose true gradient is exactly zero
    are held to the same absolute standard as the rest.
    """
    params = [T.Parameter(a) for a in arrays]
    loss = build(*params)
    T.backward(loss, params)
    analytic, numeric = [], []
    for p in params:
        num = numeric_grad(lambda: float(build(*[T.Tensor(q.data) for q in params]).data), p.data, h)
        analytic.append(p.grad.ravel())
        numeric.append(num.ravel())
    worst = rel_error(np.concatenate(analytic), np.concatenate(numeric))
    assert worst < tol, worst
    return worst


def toy_dataset():
    """users/movies/ratings: 4 users, 3 movies, 5 ratings (one dangling, one duplicate)."""
    users = Table("users", [
        Column("uid", ColumnKind.IDENTIFIER, ["u1", "u2", "u3", "u4"]),
        Column("gender", ColumnKind.CATEGORICAL, ["F", "M", "F", "M"]),
        Column("age", ColumnKind.CATEGORICAL, ["a", "b", "a", "b"]),
    ], "uid")
    movies = Table("movies", [
        Column("mid", ColumnKind.IDENTIFIER, ["m1", "m2", "m3"]),
        Column("genre", ColumnKind.CATEGORICAL, ["x", "y", "x"]),
        Column("year", ColumnKind.NUMERICAL, [1990.0, 2000.0, 2010.0]),
    ], "mid")
    ratings = Table("ratings", [
        Column("uid", ColumnKind.IDENTIFIER, ["u1", "u1", "u2", "u9", "u1"]),
        Column("mid", ColumnKind.IDENTIFIER, ["m1", "m2", "m2", "m1", "m1"]),
        Column("stars", ColumnKind.NUMERICAL, [5.0, 3.0, 4.0, 1.0, 2.0]),
    ])
    fk = ForeignKeySpec("ratings", (FKLink("uid", "users", "uid"), FKLink("mid", "movies", "mid")))
    ds = RelationalDataset(
        name="toy",
        tables={"users": users, "movies": movies, "ratings": ratings},
        fk_specs=[fk],
        target_table="users",
        target_column="age",
    )
    ds.split = Split(np.array([0, 1]), np.array([2]), np.array([3]))
    return ds


@pytest.fixture
def toy():
    return toy_dataset()


# one "criterion N: PASS/FAIL" line per acceptance check, echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
