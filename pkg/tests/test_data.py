import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hurdlegee.data import (
    DEFAULT_COVARIATES,
    LOCATION_COLUMNS,
    CsvSchema,
    Dataset,
    fri_distribution,
    ingest_csv,
    presence_view,
    severity_view,
)
from hurdlegee.errors import BadCategory, BadValue, DuplicateCell, EmptyTime, MissingColumn

from conftest import small_dataset

HEADER = "cluster_id,time,tooth,zone,fri," + ",".join(DEFAULT_COVARIATES)


def write(tmp_path, lines, name="d.csv"):
    p = tmp_path / name
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return p


def row(cid=1, t=1, tooth=7, zone="C", fri=0, cov=None):
    cov = cov or [0] * len(DEFAULT_COVARIATES)
    return ",".join(map(str, [cid, t, tooth, zone, fri, *cov]))


def test_one_row_file(tmp_path):
    d = ingest_csv(write(tmp_path, [HEADER, row()]))
    assert len(d) == 1
    pv = presence_view(d, 1)
    assert pv.w.tolist() == [0.0]
    assert pv.y_zero.tolist() == [1.0]


def test_fri_out_of_range(tmp_path):
    with pytest.raises(BadCategory):
        ingest_csv(write(tmp_path, [HEADER, row(fri=4)]))


@pytest.mark.parametrize("kw", [{"tooth": 6}, {"zone": "X"}, {"t": 5}])
def test_bad_categories(tmp_path, kw):
    with pytest.raises(BadCategory):
        ingest_csv(write(tmp_path, [HEADER, row(**kw)]))


def test_missing_column(tmp_path):
    with pytest.raises(MissingColumn):
        ingest_csv(write(tmp_path, ["cluster_id,time,tooth,zone,fri", "1,1,7,C,0"]))


def test_duplicate_cell(tmp_path):
    with pytest.raises(DuplicateCell):
        ingest_csv(write(tmp_path, [HEADER, row(fri=0), row(fri=1)]))


def test_missing_covariate_strict_and_lenient(tmp_path):
    bad = row(cid=2).split(",")
    bad[6] = ""
    p = write(tmp_path, [HEADER, row(), ",".join(bad), row(cid=3)])
    with pytest.raises(BadValue):
        ingest_csv(p)
    d = ingest_csv(p, strict=False)
    assert len(d) == 2 and d.dropped_rows == 1


def test_schema_mapping(tmp_path):
    names = [f"c{i}" for i in range(len(DEFAULT_COVARIATES))]
    hdr = "kid,visit,t,z,score," + ",".join(names)
    p = write(tmp_path, [hdr, row()])
    schema = CsvSchema("kid", "visit", "t", "z", "score", dict(zip(DEFAULT_COVARIATES, names)))
    d = ingest_csv(p, schema)
    assert d.covariate_names == DEFAULT_COVARIATES


def test_presence_and_severity_coding(tmp_path):
    lines = [HEADER, row(zone="C", fri=0), row(zone="M", fri=2), row(zone="I", fri=1), row(zone="O", fri=3)]
    d = ingest_csv(write(tmp_path, lines))
    assert presence_view(d, 1).w.tolist() == [0.0, 1.0, 1.0, 1.0]
    sv = severity_view(d, 1)
    assert sv.level.tolist() == [2, 1, 3]
    assert sv.Z.tolist() == [[0, 1, 0], [1, 0, 0], [0, 0, 1]]


def test_ordering_teeth_7_and_10(tmp_path):
    # rows deliberately shuffled
    cells = [(10, "C"), (7, "O"), (7, "C"), (10, "I"), (7, "M"), (10, "O"), (7, "I"), (10, "M")]
    d = ingest_csv(write(tmp_path, [HEADER] + [row(tooth=t, zone=z) for t, z in cells]))
    pv = presence_view(d, 1)
    got = list(zip(pv.tooth.tolist(), pv.zone.tolist()))
    assert len(got) == 8
    assert got == [(7, 0), (7, 1), (7, 2), (7, 3), (10, 0), (10, 1), (10, 2), (10, 3)]


def test_all_zero_cluster_absent_from_severity(tmp_path):
    lines = [HEADER, row(cid=1, fri=0), row(cid=1, zone="M", fri=0), row(cid=2, fri=1)]
    d = ingest_csv(write(tmp_path, lines))
    sv = severity_view(d, 1)
    assert sv.cluster_ids.tolist() == ["2"]


def test_empty_time(tmp_path):
    d = ingest_csv(write(tmp_path, [HEADER, row()]))
    with pytest.raises(EmptyTime):
        presence_view(d, 2)
    with pytest.raises(EmptyTime):
        severity_view(d, 1)


def test_design_dummies():
    d = small_dataset(n=3, seed=1, covariate_names=DEFAULT_COVARIATES, beta=(0.1,) * 7)
    X = d.design()
    names = d.design_names
    assert names == DEFAULT_COVARIATES + LOCATION_COLUMNS
    teeth = X[:, [names.index(c) for c in ("Tooth8", "Tooth9", "Tooth10")]]
    zones = X[:, [names.index(c) for c in ("ZoneM", "ZoneI", "ZoneO")]]
    for k in range(len(d)):
        assert teeth[k].sum() == (0 if d.tooth[k] == 7 else 1)
        assert zones[k].sum() == (0 if d.zone[k] == "C" else 1)
        if d.tooth[k] != 7:
            assert teeth[k, [8, 9, 10].index(d.tooth[k])] == 1


def test_round_trip_bit_exact(tmp_path, fixture200):
    p = tmp_path / "rt.csv"
    fixture200.write_csv(p)
    again = ingest_csv(p)
    assert again.to_csv() == fixture200.to_csv()
    np.testing.assert_array_equal(again.covariates, fixture200.covariates)


def test_fixture_scale_dataset():
    # a 606-cluster synthetic file at the documented row count
    from hurdlegee.simulation import TimeTruth, TruthSpec, generate_dataset

    tt = {t: TimeTruth(0.5, (0.0,) * 7) for t in (1, 2, 3, 4)}
    spec = TruthSpec(606, tt, missing_rate=1 - 21407 / (606 * 64))
    d = generate_dataset(spec, 7)
    assert d.n_clusters == 606
    assert abs(len(d) - 21407) < 400


def test_distribution_counts(tmp_path, fixture200):
    d = ingest_csv(write(tmp_path, [HEADER, row(fri=2)]))
    counts = fri_distribution(d)
    assert sum(c for *_, c in counts) == 1
    assert [c for *_, c in counts if c] == [1]
    assert sum(c for *_, c in fri_distribution(fixture200)) == len(fixture200)


@given(st.integers(0, 10_000))
def test_view_partition_property(seed):
    d = small_dataset(n=6, seed=seed, missing_rate=0.3, visit_prob=0.7, times=(1, 2))
    for t in (1, 2):
        n_t = int(np.sum(d.time == t))
        if n_t == 0:
            with pytest.raises(EmptyTime):
                presence_view(d, t)
            continue
        zeros = int(np.sum((d.time == t) & (d.fri == 0)))
        try:
            sev = severity_view(d, t).n_obs
        except EmptyTime:
            sev = 0
        assert sev + zeros == n_t
        pv = presence_view(d, t)
        assert pv.n_obs == n_t
        # indicator rows always sum to one
        if sev:
            assert np.all(severity_view(d, t).Z.sum(axis=1) == 1)


def test_dataset_rejects_bad_arrays():
    with pytest.raises(BadCategory):
        Dataset(["1"], [1], [7], ["C"], [5], [[0.0] * 7])
