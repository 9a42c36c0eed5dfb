import json

import numpy as np
import pytest

from manifold_bsde import estimates as es
from manifold_bsde import gauges as gg
from manifold_bsde import geometry as geo
from manifold_bsde.errors import RegistryError
from manifold_bsde.report import CSV_COLUMNS

NAMES = ["2der1", "derkpos", "estimhess1", "estimhess2", "minA", "minhesspsi", "minhessdelta", "2tp2",
         "2majdpsi"]


def test_registry_names():
    assert sorted(es.REGISTRY) == sorted(NAMES)


def test_unknown_name():
    with pytest.raises(RegistryError, match="nope"):
        es.verify_estimate("nope")


@pytest.mark.parametrize("name", NAMES)
def test_passes_with_defaults(name):
    rep = es.verify_estimate(name, sample_count=300, seed=1)
    assert rep.passed and rep.min_margin >= -1e-6
    assert rep.name == name and rep.params["sample_count"] == 300
    assert set(rep.csv_row()) == set(CSV_COLUMNS)
    json.dumps(rep.json_record())


def test_deterministic_given_seed():
    a = es.verify_estimate("2tp2", sample_count=200, seed=4)
    b = es.verify_estimate("2tp2", sample_count=200, seed=4)
    assert a.min_margin == b.min_margin and a.fitted_constants == b.fitted_constants


def test_2der1_difference():
    rep = es.verify_estimate("2der1", geo.sphere(), sample_count=500)
    assert rep.details["max_abs_difference"] <= 1e-5


def test_estimhess2_sphere():
    rep = es.verify_estimate("estimhess2", geo.sphere(), gg.sin_power(geo.sphere(), 1.5), 500)
    assert rep.min_margin >= -1e-6


def test_minA_emery_flat():
    rep = es.verify_estimate("minA", geo.flat(2), gg.emery(0.1), 500)
    assert rep.passed
    assert rep.fitted_constants["eta"] >= 0.1 ** 2 / 2


def test_fitted_constants_reported():
    rep = es.verify_estimate("minhesspsi", sample_count=300)
    assert {"alpha", "beta", "radius"} <= set(rep.fitted_constants)
    assert all(np.isfinite(v) for v in rep.fitted_constants.values())


def test_neighbourhood_radius_positive():
    assert es.neighbourhood_radius(1.5, 1.0, 1.0) > 0
