import json
import os
import warnings
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from hurdlegee.data import ingest_csv
from hurdlegee.simulation import TimeTruth, TruthSpec, generate_dataset

DATA = Path(__file__).parent / "data"
GOLDEN = Path(__file__).parent / "golden"

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def fixture200():
    return ingest_csv(DATA / "fixture200.csv")


@pytest.fixture(scope="session")
def oracle_values():
    with open(DATA / "oracle_values.json", encoding="utf-8") as fh:
        return json.load(fh)


def small_dataset(n=40, seed=0, times=(1,), rho=0.3, corr="exchangeable", beta=(0.6, -0.5), gamma=None,
                  cutpoints=(-0.3, 1.0), teeth=(7, 8, 9, 10), zones=("C", "M", "I", "O"), **kw):
    cols = kw.pop("covariate_names", ("dental_age", "Total_mgF"))
    tt = {t: TimeTruth(alpha=0.3, beta=beta, cutpoints=cutpoints, gamma=gamma) for t in times}
    spec = TruthSpec(n, tt, correlation=corr, rho=rho, teeth=teeth, zones=zones, covariate_names=cols, **kw)
    return generate_dataset(spec, seed)


@pytest.fixture
def quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield
