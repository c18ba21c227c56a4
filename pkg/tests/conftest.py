import numpy as np
import pytest

from sccvfl import data
from sccvfl import engine as en


def toy_dataset(n: int = 120, seed: int = 0) -> data.Dataset:
    """Six numeric features; columns 0-2 depend on s, 3-5 do not."""
    rng = np.random.default_rng(seed)
    s = rng.integers(0, 2, n)
    base = rng.normal(size=(n, 6))
    base[:, :3] += 1.5 * s[:, None]
    y = (base[:, 0] + base[:, 3] + 0.3 * rng.normal(size=n) > 0.7).astype(int)
    schema = [data.ColumnSchema(f"f{j}") for j in range(6)]
    schema += [data.ColumnSchema("y", role="label", encoding=None),
               data.ColumnSchema("s", role="protected", encoding=None)]
    return data.Dataset(base, y, s, schema, [f"f{j}" for j in range(6)])


TOY_LAYOUT = data.VerticalLayout((("A", (0, 1, 3)), ("B", (2, 4, 5))))


def small_hyper(**kw) -> en.Hyper:
    base = dict(hidden=8, latent_dim=2, gen_hidden=8, adv_hidden=8, max_epochs=12, patience=50,
                refresh_interval=5, max_refreshes=1, n_perm=10, gen_batch=64, gen_steps=1)
    base.update(kw)
    return en.Hyper(**base)


def small_weights(**kw) -> en.LossWeights:
    base = dict(warmup_epochs=3, ramp_epochs=2)
    base.update(kw)
    return en.LossWeights(**base)


@pytest.fixture(scope="session")
def toy_splits() -> en.Splits:
    return en.prepare_splits(toy_dataset(160), data.SplitSpec(seed=0))


@pytest.fixture(scope="session")
def toy_layout() -> data.VerticalLayout:
    return TOY_LAYOUT


VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda v: int(v.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
