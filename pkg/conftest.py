# -*- coding: utf-8 -*-
# file: conftest.py
# Makes the extarm package importable from a source checkout and gates Monte Carlo tests.

import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))


def pytest_addoption(parser):
    parser.addoption("--run-monte-carlo", action="store_true", default=False,
                     help="run the long Monte Carlo validation tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-monte-carlo"):
        return
    skip = pytest.mark.skip(reason="needs --run-monte-carlo")
    for item in items:
        if "monte_carlo" in item.keywords:
            item.add_marker(skip)
