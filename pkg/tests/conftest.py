import io

import numpy as np
import pytest
from hypothesis import settings

from carcensus.taxonomy import CarClass, ClassTable

settings.register_profile("ci", max_examples=60, deadline=None)
settings.load_profile("ci")


def make_table(specs):
    """``specs``: (make, body_type, price, mpg, country) tuples, ids by position."""
    classes = []
    for i, (make, body, price, mpg, country) in enumerate(specs):
        classes.append(
            CarClass(i, make, f"{make} M{i}", f"{make} M{i} s", (2010, 2012), "base", body,
                     float(price), float(mpg), country, country != "USA")
        )
    return ClassTable(tuple(classes))


@pytest.fixture
def small_table():
    return make_table(
        [
            ("Hummer", "SUV", 60000, 14, "USA"),
            ("Honda", "sedan", 20000, 32, "Japan"),
            ("Honda", "coupe", 22000, 30, "Japan"),
            ("Ford", "sedan", 18000, 28, "USA"),
            ("Ford", "crew-cab truck", 35000, 17, "USA"),
            ("BMW", "sedan", 45000, 25, "Germany"),
        ]
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def text(s):
    return io.StringIO(s)


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
