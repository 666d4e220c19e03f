import pytest

from nfnpcdr.data import Interaction, Task
from nfnpcdr.model import NFNPCDR, ModelConfig
from nfnpcdr.npencoder import IdMaps

TINY = ModelConfig(d1=4, d2=8, d3=8, hidden=8, flow="planar", flow_steps=2, pool_size=3)


def ix(user, item, rating, ts=0):
    return Interaction(user, item, rating, ts)


def tiny_id_maps():
    return IdMaps({"a": 0, "b": 1},
                  {f"s{i}": i for i in range(4)},
                  {f"t{i}": i for i in range(4)})


def tiny_tasks():
    return [
        Task("a", (ix("a", "s0", 4, 0), ix("a", "s2", 5, 1), ix("a", "s1", 2, 2)),
             (ix("a", "t1", 3, 0), ix("a", "t3", 5, 1))),
        Task("b", (ix("b", "s3", 1, 0), ix("b", "s1", 4, 1)),
             (ix("b", "t0", 2, 0), ix("b", "t2", 4, 1), ix("b", "t1", 1, 2))),
    ]


@pytest.fixture
def tiny():
    """(model, tasks) on the tiny configuration."""
    return NFNPCDR(TINY, tiny_id_maps(), seed=3), tiny_tasks()


def random_tasks(rng, n_tasks, n_users=6, n_items=10, max_len=6):
    """Tasks with random support/query sets over a small id space."""
    tasks = []
    for k in range(n_tasks):
        u = f"u{k % n_users}"
        s_items = rng.choice(n_items, rng.integers(1, max_len + 1), replace=False)
        q_items = rng.choice(n_items, rng.integers(1, max_len + 1), replace=False)
        sup = tuple(ix(u, f"s{j}", int(rng.integers(1, 6)), t) for t, j in enumerate(s_items))
        qry = tuple(ix(u, f"t{j}", int(rng.integers(1, 6)), t) for t, j in enumerate(q_items))
        tasks.append(Task(u, sup, qry))
    ids = IdMaps({f"u{i}": i for i in range(n_users)},
                 {f"s{j}": j for j in range(n_items)},
                 {f"t{j}": j for j in range(n_items)})
    return ids, tasks


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[0].lstrip("C").rstrip(":"))):
            terminalreporter.write_line(line)
