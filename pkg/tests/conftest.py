import numpy as np
import pytest

from tabsynth.table import CATEGORICAL, CONTINUOUS, Column, Schema, Table


def make_toy(n=5000, seed=0):
    """One 3-level categorical (0.7/0.2/0.1) and one bimodal continuous column."""
    rng = np.random.default_rng(seed)
    c = rng.choice(3, size=n, p=[0.7, 0.2, 0.1])
    upper = rng.random(n) < 0.5
    x = np.where(upper, rng.normal(8.0, 0.5, n), rng.normal(0.0, 1.0, n))
    schema = Schema([Column("c", CATEGORICAL, ("a", "b", "c")), Column("x", CONTINUOUS)])
    return Table(schema, {"c": c, "x": x})


def make_toy_claims(n=5000, seed=0):
    """Toy frequency data: the toy columns plus exposure and a Poisson claim count."""
    rng = np.random.default_rng(seed)
    toy = make_toy(n, seed)
    exposure = rng.uniform(0.1, 1.0, n)
    eta = -1.0 + np.array([0.0, 0.5, 1.0])[toy.data["c"]] + 0.05 * toy.data["x"]
    claims = rng.poisson(exposure * np.exp(eta)).astype(np.float64)
    schema = Schema(list(toy.schema) + [Column("exposure", CONTINUOUS), Column("claims", CONTINUOUS)])
    return Table(schema, {**toy.data, "exposure": exposure, "claims": claims})


def make_tpl_like(n=3000, seed=0):
    """Raw table with the French TPL column names and plausible value ranges."""
    rng = np.random.default_rng(seed)
    power = rng.integers(4, 16, n)
    areas = list("ABCDEF")
    brands = ["B1", "B2", "B3", "B12"]
    regions = ["R11", "R24", "R82", "R93"]
    rows = []
    exposure = np.round(rng.uniform(0.001, 1.2, n), 4)
    claims = rng.poisson(0.1 * exposure * 1.5, n)
    claims[:5] = [0, 5, 7, 1, 4]
    for i in range(n):
        rows.append(
            (
                float(claims[i]),
                float(exposure[i]),
                areas[rng.integers(6)],
                str(power[i]),
                float(rng.integers(0, 25)),
                float(rng.choice([50, 55, 68, 76, 90, 100, 125, 150])),
                brands[rng.integers(4)],
                ["Diesel", "Regular"][rng.integers(2)],
                float(np.round(np.exp(rng.normal(6, 1.5)))) + 1.0,
                regions[rng.integers(4)],
            )
        )
    schema = Schema(
        [
            Column("ClaimNb", CONTINUOUS),
            Column("Exposure", CONTINUOUS),
            Column("Area", CATEGORICAL),
            Column("VehPower", CATEGORICAL),
            Column("VehAge", CONTINUOUS),
            Column("BonusMalus", CONTINUOUS),
            Column("VehBrand", CATEGORICAL),
            Column("VehGas", CATEGORICAL),
            Column("Density", CONTINUOUS),
            Column("Region", CATEGORICAL),
        ]
    )
    return Table.from_records(schema, rows)


RISK_CLASSES = ["Super Preferred Nonsmoker", "Preferred Nonsmoker", "Residual Standard Nonsmoker", "Smoker", "Aggregate"]
ISSUE_AGES = ["20-29", "30-39", "40-49", "50-59", "60-69"]
JUMPS = ["1.00-2.00", "2.01-3.00", "3.01-4.00", "4.01-5.00", "10.01+"]


def make_lapse_like(n=2000, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(n):
        exposure = float(rng.integers(1, 400))
        jump = int(rng.integers(len(JUMPS)))
        rate = min(0.9, 0.1 + 0.12 * jump + rng.normal(0, 0.03))
        lapses = float(rng.binomial(int(exposure), max(rate, 0.0)))
        rows.append(
            (
                lapses,
                exposure,
                RISK_CLASSES[rng.integers(len(RISK_CLASSES))],
                ["<100k", "100k-250k", "250k+"][rng.integers(3)],
                ISSUE_AGES[rng.integers(len(ISSUE_AGES))],
                JUMPS[jump],
                ["11", "12", "13"][rng.integers(3)],
            )
        )
    schema = Schema(
        [
            Column("lapse_count", CONTINUOUS),
            Column("exposure", CONTINUOUS),
            Column("risk_class", CATEGORICAL),
            Column("face_amount", CATEGORICAL),
            Column("issue_age", CATEGORICAL),
            Column("premium_jump_ratio", CATEGORICAL),
            Column("duration", CATEGORICAL),
        ]
    )
    return Table.from_records(schema, rows)


@pytest.fixture
def toy():
    return make_toy()


@pytest.fixture
def toy_claims():
    return make_toy_claims()


def newton_poisson(X, y, offset, iters=100):
    """Independent oracle: Newton-Raphson on the Poisson log-likelihood, starting from zero."""
    beta = np.zeros(X.shape[1])
    for _ in range(iters):
        mu = np.exp(X @ beta + offset)
        score = X.T @ (y - mu)
        info = X.T @ (X * mu[:, None])
        delta = np.linalg.solve(info, score)
        beta = beta + delta
        if np.max(np.abs(delta)) < 1e-14:
            break
    return beta


def simulate_poisson(n, seed, b0=0.5, b1=0.3):
    """y ~ Poisson(exposure * exp(b0 + b1 x)) as a table with columns x, exposure, y."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    exposure = rng.uniform(0.2, 2.0, n)
    y = rng.poisson(exposure * np.exp(b0 + b1 * x)).astype(np.float64)
    schema = Schema([Column("x", CONTINUOUS), Column("exposure", CONTINUOUS), Column("y", CONTINUOUS)])
    return Table(schema, {"x": x, "exposure": exposure, "y": y})


TOY_RECIPE = {
    "name": "toy",
    "pre": [
        {"op": "clamp_upper", "column": "claims", "bound": 4},
        {"op": "to_categorical", "column": "claims", "mapping": {str(i): str(i) for i in range(5)}},
    ],
    "post": [
        {"op": "to_numeric", "column": "claims", "mapping": {str(i): i for i in range(5)}},
        {"op": "clamp_both", "column": "exposure", "lo": 0.01, "hi": 1},
    ],
}

TOY_FORMULA = {"response": "claims", "offset": "exposure", "predictors": ["c", "x"]}


def toy_study_config(**overrides):
    """Study config dict for the toy claims data; ``train`` entries override training defaults."""
    d = {"label": "toy", "k": 5, "seed": 0, "recipe": TOY_RECIPE, "formula": TOY_FORMULA, "train": {}}
    train = overrides.pop("train", {})
    d.update(overrides)
    d["train"] = {**d["train"], **train}
    return d


QUICK_TRAIN = {"epochs": 2, "batch_size": 100, "noise_dim": 16, "generator_hidden": [32, 32], "critic_hidden": [32, 32]}


@pytest.fixture(scope="session")
def acceptance(request):
    """Records one PASS/FAIL line per acceptance criterion and fails the test on FAIL."""
    lines = request.config.acceptance_lines = getattr(request.config, "acceptance_lines", {})

    def check(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[number] = line
        print(line)
        assert ok, line

    def skip(number, reason):
        lines[number] = f"criterion {number:>2}: SKIP  {reason}"
        pytest.skip(reason)

    check.skip = skip
    return check


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "acceptance_lines", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
