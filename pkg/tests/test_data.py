import numpy as np
import pytest

from randbal.data import (
    ClusterRecord,
    DegenerateBlockWarning,
    DegenerateDesignError,
    InputError,
    UnitRecord,
    aggregate_units,
    build_design,
    check_assignment,
    clusters_from_arrays,
    design_from_arrays,
    interaction_expand,
    read_cluster_csv,
    read_unit_csv,
)


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_block_summaries(d3):
    design, _ = d3
    assert design.B == 2
    assert list(design.sizes) == [4, 3]
    assert list(design.n_treated) == [2, 1]
    assert np.allclose(design.m_bar, [1.0, 2.0])
    assert np.allclose(design.h, [1.0, 2 / 3])
    assert list(design.starts) == [0, 4]


def test_degenerate_block_is_excluded_with_warning():
    clusters = [ClusterRecord("a", "A", 1, 2), ClusterRecord("b", "A", 0, 3),
                ClusterRecord("c", "B", 1, 1), ClusterRecord("d", "B", 1, 1)]
    with pytest.warns(DegenerateBlockWarning):
        design = build_design(clusters)
    assert design.B == 1
    assert design.excluded[0]["block_id"] == "B"


def test_all_blocks_degenerate_raises():
    clusters = [ClusterRecord("a", "A", 1, 1), ClusterRecord("b", "A", 1, 1)]
    with pytest.warns(DegenerateBlockWarning), pytest.raises(DegenerateDesignError):
        build_design(clusters)


@pytest.mark.parametrize("bad", [
    [ClusterRecord("a", "A", 1, 1), ClusterRecord("a", "A", 0, 1)],
    [ClusterRecord("a", "A", 2, 1), ClusterRecord("b", "A", 0, 1)],
    [ClusterRecord("a", "A", 1, 0), ClusterRecord("b", "A", 0, 1)],
    [],
])
def test_invalid_clusters_rejected(bad):
    with pytest.raises(InputError):
        build_design(bad)


def test_check_assignment_counts(d1):
    design, _ = d1
    check_assignment(design, [0, 1, 1, 0])
    with pytest.raises(InputError):
        check_assignment(design, [1, 1, 1, 0])
    with pytest.raises(InputError):
        check_assignment(design, [1, 0, 0])
    with pytest.raises(InputError):
        check_assignment(design, [2, 0, 0, 0])


def test_unit_aggregation_sums_and_sizes():
    units = [UnitRecord("h1", "A", 1, (1.0, 30.0)), UnitRecord("h1", "A", 1, (0.0, 40.0)),
             UnitRecord("h2", "A", 0, (1.0, 50.0))]
    clusters, X = aggregate_units(units, ["v", "age"])
    by_id = {c.cluster_id: c for c in clusters}
    assert by_id["h1"].m == 2 and by_id["h2"].m == 1
    assert np.allclose(X.column("age"), [70.0, 50.0])


def test_unit_aggregation_rejects_mixed_assignment():
    units = [UnitRecord("h1", "A", 1, (1.0,)), UnitRecord("h1", "A", 0, (0.0,))]
    with pytest.raises(InputError):
        aggregate_units(units, ["v"])


def test_unit_order_does_not_matter():
    rng = np.random.default_rng(3)
    units = [UnitRecord(f"c{i % 5}", "A", int(i % 5 < 2), tuple(rng.normal(size=2))) for i in range(20)]
    _, X1 = aggregate_units(units, ["a", "b"])
    _, X2 = aggregate_units(units[::-1], ["a", "b"])
    assert np.array_equal(X1.values, X2.values)
    assert np.array_equal(X1.units.values, X2.units.values)


def test_interactions_are_unit_level_products():
    units = [UnitRecord("h1", "A", 1, (1.0, 2.0)), UnitRecord("h1", "A", 1, (3.0, 4.0)),
             UnitRecord("h2", "A", 0, (5.0, 6.0))]
    _, X = aggregate_units(units, ["a", "b"])
    Xi = interaction_expand(X)
    assert Xi.names == ("a", "b", "a*a", "a*b", "b*b")
    h1 = Xi.values[list(Xi.cluster_ids).index("h1")]
    # sum of products, not product of sums
    assert h1[3] == 1 * 2 + 3 * 4
    assert h1[2] == 1 + 9


def test_interactions_need_units():
    _, X = clusters_from_arrays([0, 0, 0, 0], [1, 1, 0, 0], [1, 1, 1, 1], [1, 2, 3, 4])
    with pytest.raises(InputError):
        interaction_expand(X)


def test_read_cluster_csv(tmp_path):
    p = write(tmp_path / "c.csv", "cluster_id,block_id,z,m,x\nc2,B,0,2,5\nc1,B,1,3,4\n")
    clusters, X = read_cluster_csv(p)
    assert [c.cluster_id for c in clusters] == ["c1", "c2"]
    assert X.names == ("x",)
    assert np.allclose(X.values[:, 0], [4, 5])


@pytest.mark.parametrize("text, fragment", [
    ("cluster_id,block_id,z,x\nc1,B,1,4\n", "missing required"),
    ("cluster_id,block_id,z,m,x\nc1,B,1,2,NA\n", "line 2"),
    ("cluster_id,block_id,z,m,x\nc1,B,1,2,abc\n", "not a number"),
    ("cluster_id,block_id,z,m,x\nc1,B,3,2,1\n", "expected 0 or 1"),
    ("cluster_id,block_id,z,m,x\nc1,B,1,0,1\n", "positive integer"),
    ("cluster_id,block_id,z,m,x\nc1,B,1,2\n", "expected 5 fields"),
    ("", "empty file"),
])
def test_read_cluster_csv_errors(tmp_path, text, fragment):
    p = write(tmp_path / "c.csv", text)
    with pytest.raises(InputError, match=fragment):
        read_cluster_csv(p)


def test_read_missing_file(tmp_path):
    with pytest.raises(InputError):
        read_cluster_csv(tmp_path / "nope.csv")


def test_read_unit_csv(tmp_path):
    p = write(tmp_path / "u.csv", "cluster_id,block_id,z,v\nh1,A,1,1\nh1,A,1,0\nh2,A,0,1\n")
    clusters, X = read_unit_csv(p)
    design = build_design(clusters)
    assert list(design.m) == [2, 1]
    assert np.allclose(design.align(X)[:, 0], [1, 1])


def test_design_from_arrays_row_order():
    design, X = design_from_arrays([1, 0, 1, 0], [1, 0, 0, 1], [1, 2, 3, 4], [10, 20, 30, 40])
    assert list(X[:, 0]) == [20, 40, 10, 30]
    assert list(design.z) == [0, 1, 1, 0]
