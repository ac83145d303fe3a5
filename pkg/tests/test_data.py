import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from vflsim.core import EmptyData, LabelAccessError, ModelState, ParseError
from vflsim.data import (
    RawDataset,
    make_synthetic,
    minmax_normalize_features,
    minmax_normalize_labels,
    parse_csv,
    parse_libsvm,
    train_test_split,
    vertical_partition_dataset,
    write_csv,
    write_libsvm,
)


def write(tmp_path, text, name="f.txt", mode="w"):
    p = tmp_path / name
    if mode == "wb":
        p.write_bytes(text)
    else:
        p.write_text(text, encoding="utf-8")
    return p


class TestLibsvm:
    def test_single_line(self, tmp_path):
        ds = parse_libsvm(write(tmp_path, "+1 1:0.5 3:1.0\n"))
        assert ds.y.tolist() == [1.0]
        assert ds.d == 3
        assert ds.dense().tolist() == [[0.5, 0.0, 1.0]]

    def test_label_only_row_is_all_zero(self, tmp_path):
        ds = parse_libsvm(write(tmp_path, "-1\n+1 2:2"))
        assert ds.n == 2
        assert ds.dense().tolist() == [[0.0, 0.0], [0.0, 2.0]]

    def test_comments_blank_lines_and_qid(self, tmp_path):
        ds = parse_libsvm(write(tmp_path, "# header\n\n1 qid:3 2:1 # trailing\n"))
        assert ds.n == 1 and ds.dense().tolist() == [[0.0, 1.0]]

    def test_dimension_override(self, tmp_path):
        path = write(tmp_path, "1 2:1\n")
        assert parse_libsvm(path, n_features=10).d == 10
        with pytest.raises(ParseError):
            parse_libsvm(path, n_features=1)

    @pytest.mark.parametrize(
        "text,line",
        [("1 1:0.5\nx 1:2\n", 2), ("1 0:1\n", 1), ("1 2:1 1:1\n", 1), ("1 1-2\n", 1), ("1\n1 3:abc\n", 2), ("1 1:nan", 1)],
    )
    def test_malformed_lines_report_position(self, tmp_path, text, line):
        with pytest.raises(ParseError) as exc:
            parse_libsvm(write(tmp_path, text))
        assert exc.value.line == line

    def test_empty_file(self, tmp_path):
        with pytest.raises(EmptyData):
            parse_libsvm(write(tmp_path, "\n# nothing\n"))

    def test_round_trip(self, tmp_path, rng):
        X = sp.random(100, 30, density=0.2, random_state=3, format="csr")
        X.data = rng.standard_normal(X.nnz)
        y = rng.choice([-1.0, 1.0], 100)
        path = tmp_path / "rt.svm"
        write_libsvm(path, RawDataset(X, y))
        back = parse_libsvm(path, n_features=30)
        assert np.array_equal(back.y, y)
        assert np.array_equal(back.dense(), X.toarray())

    @given(st.binary(max_size=300))
    def test_random_bytes_never_crash(self, tmp_path_factory, blob):
        path = tmp_path_factory.mktemp("fuzz") / "f.svm"
        path.write_bytes(blob)
        try:
            parse_libsvm(path)
        except (ParseError, EmptyData):
            pass


class TestCsv:
    def test_small_file(self, tmp_path):
        ds = parse_csv(write(tmp_path, "y,a,b\n1,2,3\n0,4,5\n"), label_column=0)
        assert ds.n == 2 and ds.d == 2
        assert ds.y.tolist() == [1.0, -1.0]
        assert ds.dense().tolist() == [[2, 3], [4, 5]]

    def test_label_by_name_and_regression(self, tmp_path):
        ds = parse_csv(write(tmp_path, "a,target\n1,2.5\n3,7\n"), label_column="target", classification=False)
        assert ds.y.tolist() == [2.5, 7.0]
        assert ds.dense().tolist() == [[1], [3]]

    def test_non_numeric_cell_position(self, tmp_path):
        with pytest.raises(ParseError) as exc:
            parse_csv(write(tmp_path, "y,a,b\n1,2,3\n0,4,oops\n"))
        assert (exc.value.line, exc.value.column) == (3, 3)

    def test_ragged_row(self, tmp_path):
        with pytest.raises(ParseError) as exc:
            parse_csv(write(tmp_path, "y,a\n1,2,3\n"))
        assert exc.value.line == 2

    def test_nul_byte_is_parse_error(self, tmp_path):
        with pytest.raises(ParseError):
            parse_csv(write(tmp_path, "y,a\n1,\x002\n"))

    def test_bad_classification_labels(self, tmp_path):
        with pytest.raises(ParseError):
            parse_csv(write(tmp_path, "y,a\n2,1\n0,1\n"))

    def test_empty(self, tmp_path):
        with pytest.raises(EmptyData):
            parse_csv(write(tmp_path, ""))
        with pytest.raises(EmptyData):
            parse_csv(write(tmp_path, "y,a\n", name="g.csv"))

    def test_invalid_utf8(self, tmp_path):
        with pytest.raises(ParseError) as exc:
            parse_csv(write(tmp_path, b"y,a\n1,2\n\xff,3\n", mode="wb"))
        assert exc.value.line == 3

    def test_matches_generator(self, tmp_path):
        raw = make_synthetic(100, 6, seed=4)
        path = tmp_path / "syn.csv"
        write_csv(path, raw)
        back = parse_csv(path)
        assert np.array_equal(back.dense(), raw.dense())
        assert np.array_equal(back.y, raw.y)

    @given(st.binary(max_size=300))
    def test_random_bytes_never_crash(self, tmp_path_factory, blob):
        path = tmp_path_factory.mktemp("fuzz") / "f.csv"
        path.write_bytes(blob)
        try:
            parse_csv(path)
        except (ParseError, EmptyData):
            pass


class TestTransforms:
    def test_label_minmax(self):
        ds = minmax_normalize_labels(RawDataset(np.zeros((3, 1)), np.array([0.0, 5.0, 10.0])))
        assert ds.y.tolist() == [0.0, 0.5, 1.0]

    def test_constant_labels(self):
        ds = minmax_normalize_labels(RawDataset(np.zeros((2, 1)), np.array([3.0, 3.0])))
        assert ds.y.tolist() == [0.0, 0.0]

    @given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=50))
    def test_label_inverse_round_trip(self, ys):
        y = np.array(ys)
        ds = minmax_normalize_labels(RawDataset(np.zeros((len(y), 1)), y))
        if np.ptp(y) > 0:
            assert np.allclose(ds.inverse_labels(ds.y), y, rtol=0, atol=1e-12 * (1 + np.abs(y).max()))
        assert ds.y.min() >= 0 and ds.y.max() <= 1

    def test_feature_minmax(self, rng):
        ds = minmax_normalize_features(RawDataset(rng.standard_normal((20, 4)) * 5, np.ones(20)))
        X = ds.dense()
        assert np.allclose(X.min(axis=0), 0) and np.allclose(X.max(axis=0), 1)

    def test_split_sizes_and_cover(self):
        raw = make_synthetic(10, 3, seed=0)
        tr, te = train_test_split(raw, 0.2, seed=5)
        assert (tr.n, te.n) == (8, 2)
        rows = {tuple(r) for r in np.vstack([tr.dense(), te.dense()])}
        assert rows == {tuple(r) for r in raw.dense()}
        tr2, te2 = train_test_split(raw, 0.2, seed=5)
        assert np.array_equal(te.dense(), te2.dense())

    def test_split_needs_two_samples(self):
        with pytest.raises(EmptyData):
            train_test_split(make_synthetic(1, 3, seed=0), 0.5, seed=0)
        with pytest.raises(ValueError):
            train_test_split(make_synthetic(5, 3, seed=0), 1.0, seed=0)


class TestPartitioned:
    @pytest.mark.parametrize("sparse", [False, True])
    def test_lossless_routing(self, rng, sparse):
        raw = make_synthetic(40, 17, seed=2)
        if sparse:
            raw = RawDataset(sp.csr_matrix(np.where(np.abs(raw.dense()) > 0.2, raw.dense(), 0.0)), raw.y)
        data = vertical_partition_dataset(raw, 4, seed=9)
        X = raw.dense()
        assert np.array_equal(data.assemble(), X)
        for _ in range(100):
            w = rng.standard_normal(17)
            i = int(rng.integers(40))
            model = ModelState(data.partition, w)
            total = sum(data.partial(ell, i, model.block(ell)) for ell in range(4))
            assert abs(total - X[i] @ w) <= 1e-12 * (1 + abs(X[i] @ w))

    def test_single_party_is_identity(self):
        raw = make_synthetic(10, 5, seed=1)
        data = vertical_partition_dataset(raw, 1, seed=0)
        assert np.array_equal(data.blocks[0], raw.dense())

    def test_label_firewall(self):
        data = vertical_partition_dataset(make_synthetic(10, 6, seed=1), 3, seed=0)
        with pytest.raises(LabelAccessError):
            data.labels_for(0)  # no roles assigned yet
        data = data.with_roles(1)
        assert data.labels_for(0) is not None
        for passive in (1, 2):
            with pytest.raises(LabelAccessError):
                data.labels_for(passive)
        assert data.active_parties == [0]
