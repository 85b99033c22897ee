"""Shared fixtures: family catalogs and fitted models are built once per session.

Set ``CISLUNAR_TEST_CACHE`` to a directory to keep catalogs and models
between sessions.
"""

import os
from pathlib import Path

import pytest

from cislunar_nmpc import cli
from cislunar_nmpc import families as fam
from cislunar_nmpc import surrogate as sur

CATALOG_COUNT = 200
HOLDOUT = 0.2

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":")[1:])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory):
    env = os.environ.get("CISLUNAR_TEST_CACHE")
    if env:
        path = Path(env)
        path.mkdir(parents=True, exist_ok=True)
        return path
    return tmp_path_factory.mktemp("families")


class _Families:
    """Lazily generated catalogs and held-out model fits, keyed by tag string."""

    def __init__(self, root: Path):
        self.root = root
        self.times = {}
        self._cats = {}
        self._models = {}

    def catalog(self, tag) -> fam.FamilyCatalog:
        key = str(tag)
        if key not in self._cats:
            path = self.root / f"{key}.json"
            if path.exists():
                self._cats[key] = fam.FamilyCatalog.load(path)
                self.times.setdefault(key, None)
            else:
                import time
                t0 = time.perf_counter()
                cat = fam.generate_family(fam.FamilyTag.parse(key), CATALOG_COUNT)
                self.times[key] = time.perf_counter() - t0
                cat.save(path)
                self._cats[key] = cat
        return self._cats[key]

    def model(self, tag) -> sur.MprModel:
        key = str(tag)
        if key not in self._models:
            path = self.root / f"{key}.model.json"
            if path.exists():
                self._models[key] = sur.MprModel.load(path)
            else:
                model = sur.build_model(self.catalog(key), holdout=HOLDOUT)
                model.save(path)
                self._models[key] = model
        return self._models[key]


@pytest.fixture(scope="session")
def families(cache_dir):
    return _Families(cache_dir)


@pytest.fixture(scope="session")
def ho_catalog(families):
    return families.catalog("HO-L1-N")


@pytest.fixture(scope="session")
def ho_model(families):
    return families.model("HO-L1-N")


@pytest.fixture(scope="session")
def ho_member(ho_catalog, ho_model):
    return ho_catalog[cli.default_member(ho_catalog, ho_model)]


@pytest.fixture(scope="session")
def lo_catalog(families):
    return families.catalog("LO-L1")
