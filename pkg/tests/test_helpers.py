import helpers


def test_derive_seed_is_stable_and_key_sensitive():
    seed = helpers.derive_seed(0, "LR", 5, 2)
    assert seed == helpers.derive_seed(0, "LR", 5, 2)
    assert 0 <= seed < 2**64
    others = {helpers.derive_seed(0, "LR", 5, 3), helpers.derive_seed(0, "RF", 5, 2), helpers.derive_seed(1, "LR", 5, 2)}
    assert seed not in others
    assert len(others) == 3


def test_parallel_map_keeps_order():
    items = list(range(20))
    assert helpers.parallel_map(lambda x: x * x, items, threads=4) == [x * x for x in items]
    assert helpers.parallel_map(str, [], threads=4) == []


def test_iter_cases_skips_files_and_hidden(tmp_path):
    for name in ("b", "a", ".cache"):
        (tmp_path / name).mkdir()
    (tmp_path / "notes.txt").write_text("x", encoding="utf-8")
    assert [case.name for case in helpers.iter_cases(tmp_path)] == ["a", "b"]


def test_error_hierarchy():
    assert issubclass(helpers.ValidationError, ValueError)
    assert issubclass(helpers.IoFailure, OSError)
    assert issubclass(helpers.IoFailure, helpers.GlomstatError)


def test_count_and_percentage_table():
    table = helpers.count_and_percentage_table("Levels", "Level", 4, [("***", 1), ("ns", 3)])
    assert table.row_count == 2
    assert [column.header for column in table.columns] == ["Level", "Count", "Percentage"]
    empty = helpers.count_and_percentage_table("Levels", "Level", 0, [("ns", 0)])
    assert empty.row_count == 1
