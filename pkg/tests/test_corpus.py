import json
from datetime import timezone

import numpy as np
import pytest
from conftest import corpus, rec

from nprkit import geo, solar
from nprkit.corpus import (
    Condition,
    Role,
    load_corpus,
    load_image,
    parse_instant,
    save_corpus,
    save_image,
    split_by_condition,
)
from nprkit.errors import CorpusError


def _write_lines(path, objs):
    path.write_text("".join((o if isinstance(o, str) else json.dumps(o)) + "\n" for o in objs))
    return path


def _obj(i, **kw):
    return {"id": i, "path": f"img/{i}.png", "lat": 35.6 + 0.001 * len(i), "lon": 139.7, "role": "Query", **kw}


def test_three_valid_lines(tmp_path):
    meta = _write_lines(tmp_path / "m.jsonl", [_obj("a"), _obj("bb"), _obj("ccc", role="Database")])
    c = load_corpus(meta, tmp_path)
    assert [r.id for r in c.records] == ["a", "bb", "ccc"]
    assert c["a"].condition is Condition.UNKNOWN
    assert c["a"].timestamp_utc is None
    assert c["a"].image_path == tmp_path / "img" / "a.png"
    assert [r.id for r in c.database()] == ["ccc"]


def test_lat_out_of_range_names_line(tmp_path):
    meta = _write_lines(tmp_path / "m.jsonl", [_obj("a", lat=91)])
    with pytest.raises(CorpusError, match=r"line 1: lat"):
        load_corpus(meta, tmp_path)


def test_lon_range_is_half_open(tmp_path):
    with pytest.raises(CorpusError, match="lon"):
        load_corpus(_write_lines(tmp_path / "m.jsonl", [_obj("a", lon=180.0)]), tmp_path)
    c = load_corpus(_write_lines(tmp_path / "n.jsonl", [_obj("a", lon=-180.0)]), tmp_path)
    assert c["a"].lon == -180.0


def test_duplicate_id_named(tmp_path):
    lines = [_obj("q1"), _obj("q2"), _obj("q3"), _obj("q1")]
    with pytest.raises(CorpusError, match=r"duplicate id 'q1'.*line 1"):
        load_corpus(_write_lines(tmp_path / "m.jsonl", lines), tmp_path)


@pytest.mark.parametrize("line, field", [
    ("{not json", "JSON"),
    ('{"id": "a", "path": "x", "lat": 1, "role": "Query"}', "lon"),
    ('{"id": "a", "path": "x", "lat": 1, "lon": 2, "role": "Satellite"}', "role"),
    ('{"id": "a", "path": "x", "lat": 1, "lon": 2, "role": "Query", "condition": "Dusk"}', "condition"),
    ('{"id": "a", "path": "x", "lat": 1, "lon": 2, "role": "Query", "timestamp_utc": "yesterday"}', "timestamp_utc"),
    ('{"id": "a", "path": "x", "lat": 1, "lon": 2, "role": "Query", "utm_east": 5}', "utm"),
])
def test_malformed_lines(tmp_path, line, field):
    meta = _write_lines(tmp_path / "m.jsonl", [_obj("ok"), line])
    with pytest.raises(CorpusError, match=rf"line 2: .*{field}"):
        load_corpus(meta, tmp_path)


def test_utm_must_round_trip(tmp_path):
    good = rec("x")
    obj = _obj("a", lat=good.lat, lon=good.lon, utm_east=good.utm_east + 5.0,
               utm_north=good.utm_north, utm_zone="54N")
    with pytest.raises(CorpusError, match="disagree"):
        load_corpus(_write_lines(tmp_path / "m.jsonl", [obj]), tmp_path)


def test_heading_normalized():
    assert rec("a", heading_deg=-30).heading_deg == 330.0
    assert rec("b", heading_deg=720).heading_deg == 0.0


def test_utm_computed_when_absent():
    r = rec("a")
    assert r.utm_zone == 54 and r.utm_northern
    back = geo.utm_to_latlon(r.utm_east, r.utm_north, r.utm_zone, r.utm_northern)
    assert geo.haversine_m((r.lat, r.lon), back) < 1e-3


def test_round_trip_all_fields(tmp_path):
    recs = [
        rec("a", heading_deg=12.5, timestamp_utc="2014-09-24T09:15:00Z", condition="Night"),
        rec("b", lat=-33.9, lon=18.4, role=Role.DATABASE, heading_deg=0.0),
        rec("c", lat=88.0, lon=0.0, condition=Condition.SUNSET),  # polar: no UTM
    ]
    c = corpus(*recs)
    out = tmp_path / "c.jsonl"
    save_corpus(c, out)
    back = load_corpus(out, ".")
    assert back.records == c.records
    save_corpus(back, tmp_path / "d.jsonl")
    assert (tmp_path / "d.jsonl").read_bytes() == out.read_bytes()


def test_parse_instant_forms():
    a = parse_instant("2014-09-24T09:15:00Z")
    b = parse_instant("2014-09-24T18:15:00+09:00")
    c = parse_instant("2014-09-24T09:15:00")
    assert a == b == c
    assert a.tzinfo == timezone.utc


def test_split_identity_labeler():
    c = corpus(rec("a", condition="Day"), rec("b", condition="Day"), rec("c", condition="Night"),
               rec("db", role=Role.DATABASE, condition="Night"))
    groups = split_by_condition(c)
    assert groups[Condition.DAY] == ["a", "b"]
    assert groups[Condition.NIGHT] == ["c"]
    assert groups[Condition.SUNSET] == [] and groups[Condition.UNKNOWN] == []


def test_split_empty_queries():
    groups = split_by_condition(corpus(rec("db", role=Role.DATABASE)))
    assert all(v == [] for v in groups.values())
    assert set(groups) == set(Condition)


def test_split_partitions_queries(rng):
    conds = list(Condition)
    recs = [rec(f"q{i}", condition=conds[rng.integers(4)]) for i in range(40)]
    groups = split_by_condition(corpus(*recs))
    flat = [i for ids in groups.values() for i in ids]
    assert sorted(flat) == sorted(r.id for r in recs)
    assert len(flat) == len(set(flat))


def test_split_solar_labeler_matches_oracle_table():
    import oracles
    from datetime import date, timedelta
    lat, lon = 35.6762, 139.6503
    recs = []
    for d in range(1, 29):
        day = date(2014, 9, d)
        # oracle sunset; timestamps 30 min either side are unambiguous
        sset = oracles.noaa_sunset(lat, lon, day)
        recs.append(rec(f"b{d:02d}", timestamp_utc=sset - timedelta(minutes=30)))
        recs.append(rec(f"a{d:02d}", timestamp_utc=sset + timedelta(minutes=30)))
    groups = split_by_condition(corpus(*recs), solar.solar_labeler())
    assert groups[Condition.NIGHT] == sorted(r.id for r in recs if r.id.startswith("a"))
    assert groups[Condition.DAY] == sorted(r.id for r in recs if r.id.startswith("b"))


def test_image_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (7, 9, 3), dtype=np.uint8)
    save_image(tmp_path / "x.png", img)
    assert np.array_equal(load_image(tmp_path / "x.png"), img)


def test_grayscale_image_loads_as_rgb(tmp_path):
    from PIL import Image
    Image.fromarray(np.full((4, 4), 200, np.uint8), "L").save(tmp_path / "g.png")
    im = load_image(tmp_path / "g.png")
    assert im.shape == (4, 4, 3) and im.dtype == np.uint8


def test_corpus_rejects_duplicate_ids():
    with pytest.raises(CorpusError):
        corpus(rec("a"), rec("a"))
