import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from galamm import DataError, SpecError, dump_spec, load_dataset, load_spec, parse_spec, write_dataset
from galamm.modelspec import spec_to_dict

from conftest import make_dataset, random_intercept_spec

HEADER = ["response", "family_group", "dispersion_group", "item", "trials", "level2_id", "x"]


def nested_spec():
    return parse_spec(
        {
            "items": ["y", "k"],
            "families": [{"id": "gau", "family": "gaussian"}, {"id": "bin", "family": "binomial"}],
            "dispersion_groups": [{"id": "d"}, {"id": "b", "fixed": 1.0}],
            "levels": [{"level": 2, "name": "pupil", "parent": 3}, {"level": 3, "name": "school"}],
            "latent": [{"name": "e2", "level": 2}, {"name": "e3", "level": 3}],
            "loadings": [
                {"latent": "e2", "items": ["y"], "value": 1.0},
                {"latent": "e2", "items": ["k"], "symbol": "lk"},
                {"latent": "e3", "items": ["y"], "value": 1.0},
            ],
            "regressions": [{"name": "int", "per_item": True}, {"name": "bx", "covariate": "x"}],
            "covariates": {"x": 2},
        }
    )


HEADER3 = ["response", "family_group", "dispersion_group", "item", "trials", "level2_id", "level3_id", "x"]


def test_roundtrip_file(tmp_path, rng):
    spec = nested_spec()
    rows = []
    for s in range(3):
        for p in range(4):
            x = rng.normal()
            rows.append([rng.normal(), "gau", "d", "y", 1, f"p{s}{p}", f"s{s}", x])
            rows.append([int(rng.integers(0, 9)), "bin", "b", "k", 8, f"p{s}{p}", f"s{s}", x])
    ds = make_dataset(spec, HEADER3, rows)
    assert ds.n == 24 and ds.level_sizes == {2: 12, 3: 3}
    path = tmp_path / "d.csv"
    write_dataset(ds, path, spec)
    back = load_dataset(path, spec)
    np.testing.assert_array_equal(back.response, ds.response)
    np.testing.assert_array_equal(back.units[2], ds.units[2])
    np.testing.assert_array_equal(back.covariates["x"], ds.covariates["x"])
    assert back.rows[1].trials == 8 and back.rows[1].level_ids == {2: "p00", 3: "s0"}


def test_missing_rows_dropped(tmp_path):
    spec = random_intercept_spec()
    path = tmp_path / "d.csv"
    path.write_text("response,family_group,dispersion_group,item,trials,level2_id\n1.0,f,d,y,1,a\nNA,f,d,y,1,a\n\n2.0,f,d,y,1,b\n")
    ds = load_dataset(path, spec)
    assert ds.n == 2 and ds.dropped == 1


@pytest.mark.parametrize(
    "row, match",
    [
        (["1.0", "gau", "d", "y", 1, "p1", "s1", "abc"], "row 2: non-numeric x"),
        (["1.0", "zzz", "d", "y", 1, "p1", "s1", "0"], "row 2: unknown family group"),
        (["1.0", "gau", "q", "y", 1, "p1", "s1", "0"], "row 2: unknown dispersion group"),
        (["1.0", "gau", "d", "w", 1, "p1", "s1", "0"], "row 2: unknown item"),
        (["9", "bin", "b", "k", 8, "p1", "s1", "0"], "trials bound"),
        (["1.5", "bin", "b", "k", 8, "p1", "s1", "0"], "outside 0..8"),
        (["1", "bin", "b", "k", 0, "p1", "s1", "0"], "trials must be a positive integer"),
        (["1.0", "gau", "d", "y", 1, "", "s1", "0"], "missing level2_id"),
        (["inf", "gau", "d", "y", 1, "p1", "s1", "0"], "non-finite response"),
    ],
)
def test_row_errors_name_line_and_field(row, match):
    with pytest.raises(DataError, match=match):
        make_dataset(nested_spec(), HEADER3, [row])


def test_structural_errors():
    spec = nested_spec()
    with pytest.raises(DataError, match="missing column 'level3_id'"):
        make_dataset(spec, HEADER, [["1", "gau", "d", "y", 1, "p", "0"]])
    with pytest.raises(DataError, match="more than one level-3 unit"):
        make_dataset(spec, HEADER3, [["1", "gau", "d", "y", 1, "p", "s1", "0"], ["1", "gau", "d", "y", 1, "p", "s2", "0"]])
    with pytest.raises(DataError, match="varies within level-2 unit"):
        make_dataset(spec, HEADER3, [["1", "gau", "d", "y", 1, "p", "s1", "0"], ["1", "gau", "d", "y", 1, "p", "s1", "1"]])
    with pytest.raises(DataError, match="expected 8 fields"):
        make_dataset(spec, HEADER3, [["1", "gau"]])
    with pytest.raises(DataError, match="no usable rows"):
        make_dataset(spec, HEADER3, [["", "gau", "d", "y", 1, "p", "s1", "0"]])


def test_duplicate_ids_are_repeated_measures():
    spec = random_intercept_spec()
    ds = make_dataset(spec, HEADER[:-1], [["1", "f", "d", "y", 1, "b"], ["2", "f", "d", "y", 1, "a"], ["3", "f", "d", "y", 1, "b"]])
    assert ds.level_sizes[2] == 2
    np.testing.assert_array_equal(ds.units[2], [0, 1, 0])


def test_standardize():
    spec = random_intercept_spec()
    ds = make_dataset(spec, HEADER[:-1], [[str(v), "f", "d", "y", 1, "a"] for v in (1.0, 2.0, 6.0)])
    from galamm.data import standardize_responses

    out = standardize_responses(ds, ["d"])
    assert out.response.mean() == pytest.approx(0.0, abs=1e-14)
    assert out.response.std() == pytest.approx(1.0)
    assert out.standardization["d"] == (3.0, pytest.approx(np.std([1.0, 2.0, 6.0])))


def test_spec_yaml_roundtrip(tmp_path):
    spec = nested_spec()
    p = tmp_path / "m.yaml"
    dump_spec(spec, p)
    assert spec_to_dict(load_spec(p)) == spec_to_dict(spec)


@pytest.mark.parametrize(
    "patch, match",
    [
        ({"items": ["y", "y"]}, r"\[items\] duplicate"),
        ({"levels": [{"level": 3, "name": "x"}]}, r"\[levels\]"),
        ({"loadings": [{"latent": "e2", "items": ["y"], "symbol": "a"}, {"latent": "e3", "items": ["y"], "value": 1.0}]}, "anchor"),
        ({"smooths": [{"name": "s", "covariate": "x", "k": 2}]}, "k must be at least 3"),
        ({"bogus": 1}, "unknown sections"),
        ({"structural": [{"target": "e3", "source": "e2"}]}, "cannot predict higher-level"),
    ],
)
def test_spec_errors(patch, match):
    doc = spec_to_dict(nested_spec())
    doc.update(patch)
    with pytest.raises(SpecError, match=match):
        parse_spec(doc)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e6, 1e6), st.sampled_from(["a", "b", "c", "d"])), min_size=1, max_size=30))
def test_property_units_first_appearance(rows):
    spec = random_intercept_spec()
    ds = make_dataset(spec, HEADER[:-1], [[repr(y), "f", "d", "y", 1, c] for y, c in rows])
    labels = list(dict.fromkeys(c for _, c in rows))
    assert list(ds.unit_labels[2]) == labels
    np.testing.assert_array_equal(ds.response, [y for y, _ in rows])
