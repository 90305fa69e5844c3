import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustcp.data import DataError, Dataset, SplitSpec, gen_blobs, load_csv, split, write_csv
from robustcp.models import forward_logits
from robustcp.training import TrainConfig, train_standard


class TestBlobs:
    def test_balanced_in_box_and_seeded(self):
        ds = gen_blobs(4, 3, 25, 0.2, seed=5)
        assert len(ds) == 100
        np.testing.assert_array_equal(np.bincount(ds.y), [25] * 4)
        assert ds.X.min() >= 0.0 and ds.X.max() <= 1.0
        assert ds.equals(gen_blobs(4, 3, 25, 0.2, seed=5))
        assert not ds.equals(gen_blobs(4, 3, 25, 0.2, seed=6))

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            gen_blobs(3, 2, 0, 0.1)

    def test_bad_spread(self):
        with pytest.raises(DataError):
            gen_blobs(3, 2, 10, -1.0)

    def test_unplaceable_means(self):
        with pytest.raises(DataError, match="spread"):
            gen_blobs(10, 1, 5, 0.4, max_tries=50)

    def test_well_separated_is_learnable(self):
        ds = gen_blobs(2, 2, 100, 0.05, seed=0)
        p, _ = train_standard(ds, TrainConfig(epochs=20, batch_size=16, lr=0.5, seed=0))
        assert np.mean(forward_logits(p, ds.X).argmax(axis=1) == ds.y) >= 0.95


class TestCsv:
    def test_label_mapping_by_first_appearance(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("x0,x1,label\n0.1,0.2,a\n0.3,0.4,b\n0.5,0.6,a\n")
        ds = load_csv(path)
        assert ds.num_classes == 2 and ds.classes == ("a", "b")
        np.testing.assert_array_equal(ds.y, [0, 1, 0])

    def test_nan_reports_line(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("x0,label\n0.1,a\nnan,b\n")
        with pytest.raises(DataError, match=":3:"):
            load_csv(path)

    def test_non_numeric_and_ragged(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("x0,label\nabc,a\n")
        with pytest.raises(DataError, match=":2:"):
            load_csv(path)
        path.write_text("x0,label\n0.1\n")
        with pytest.raises(DataError, match=":2:"):
            load_csv(path)

    def test_out_of_box_rejected(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("x0,label\n0.1,a\n1.5,b\n")
        with pytest.raises(DataError, match=":3:"):
            load_csv(path)
        assert load_csv(path, box=None).X.max() == 1.5

    def test_minmax_normalisation(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("x0,x1,label\n10,-1,a\n20,1,b\n15,0,a\n")
        ds = load_csv(path, normalize="minmax")
        np.testing.assert_allclose(ds.X, [[0, 0], [1, 1], [0.5, 0.5]])

    def test_round_trip(self, tmp_path):
        ds = gen_blobs(3, 4, 10, 0.1, seed=1)
        write_csv(ds, tmp_path / "d.csv")
        back = load_csv(tmp_path / "d.csv")
        assert back.equals(ds)

    def test_fixed_class_list(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("x0,label\n0.1,b\n0.2,a\n")
        ds = load_csv(path, classes=["a", "b", "c"])
        np.testing.assert_array_equal(ds.y, [1, 0])
        assert ds.num_classes == 3
        path.write_text("x0,label\n0.1,z\n")
        with pytest.raises(DataError, match="unknown class"):
            load_csv(path, classes=["a", "b"])


class TestSplit:
    def test_half_quarter_quarter(self):
        ds = gen_blobs(4, 2, 25, 0.1, seed=0)
        parts = split(ds, SplitSpec(0.5, 0.25, 0.25, seed=0))
        assert [len(p) for p in parts] == [50, 25, 25]

    def test_empty_train_allowed(self):
        ds = gen_blobs(2, 2, 50, 0.1, seed=0)
        tr, cal, te = split(ds, SplitSpec(0.0, 0.2, 0.8))
        assert (len(tr), len(cal), len(te)) == (0, 20, 80)

    def test_empty_eval_part_rejected(self):
        ds = gen_blobs(2, 2, 50, 0.1, seed=0)
        with pytest.raises(DataError):
            split(ds, SplitSpec(0.9, 0.1, 0.0))

    def test_bad_fractions(self):
        with pytest.raises(DataError):
            SplitSpec(0.5, 0.5, 0.5)
        with pytest.raises(DataError):
            SplitSpec(-0.1, 0.6, 0.5)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 200), st.floats(0, 1), st.floats(0.05, 1), st.integers(0, 1000))
    def test_partition(self, n, a, b, seed):
        train = a * 0.8
        cal = (1 - train) * b * 0.5 + 0.01
        test = 1.0 - train - cal
        ds = Dataset(np.zeros((n, 1)), np.zeros(n, dtype=int), 2)
        parts = split(ds, SplitSpec(train, cal, test, seed=seed, require_eval=False))
        idx = np.concatenate([p.indices for p in parts])
        assert sorted(idx.tolist()) == list(range(n))
        assert sum(len(p) for p in parts) == n
