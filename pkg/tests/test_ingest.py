import numpy as np
import pytest

from mismatchglm.cli import inject_mismatch
from mismatchglm.blocks import BlockPartition
from mismatchglm.ingest import IngestError, ingest_csv


def write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


BASIC = "grp,x,resp\na,1.0,2.0\nb,2.0,3.0\na,3.0,4.0\n"


class TestBasics:
    def test_categorical_reference_coding(self, tmp_path):
        path = write(tmp_path, BASIC)
        out = ingest_csv(path, {"response": "resp", "categorical": [{"column": "grp", "reference": "a"}]})
        # intercept plus one indicator for the non-reference level
        assert out.dataset.X.shape == (3, 2)
        assert out.feature_names == ("intercept", "grp=b")
        assert np.array_equal(out.dataset.X[:, 1], [0.0, 1.0, 0.0])

    def test_numeric_and_response(self, tmp_path):
        path = write(tmp_path, BASIC)
        out = ingest_csv(path, {"response": "resp", "numeric": ["x"]})
        assert np.array_equal(out.dataset.y, [2.0, 3.0, 4.0])
        assert np.array_equal(out.dataset.X[:, 1], [1.0, 2.0, 3.0])

    def test_sqrt_transform(self, tmp_path):
        path = write(tmp_path, "x,resp\n1,4\n1,9\n")
        out = ingest_csv(path, {"response": "resp", "numeric": ["x"], "transform": "sqrt"})
        assert np.array_equal(out.dataset.y, [2.0, 3.0])

    def test_missing_column_named(self, tmp_path):
        path = write(tmp_path, BASIC)
        with pytest.raises(IngestError, match="nope"):
            ingest_csv(path, {"response": "nope"})

    def test_non_numeric_cell_names_row(self, tmp_path):
        path = write(tmp_path, "x,resp\n1.0,2.0\nbad,3.0\n")
        with pytest.raises(IngestError, match="row 2"):
            ingest_csv(path, {"response": "resp", "numeric": ["x"]})

    def test_missing_reference_level(self, tmp_path):
        path = write(tmp_path, BASIC)
        with pytest.raises(IngestError, match="reference"):
            ingest_csv(path, {"response": "resp", "categorical": [{"column": "grp", "reference": "z"}]})

    def test_header_required(self, tmp_path):
        path = write(tmp_path, "")
        with pytest.raises(IngestError):
            ingest_csv(path, {"response": "resp"})


class TestDeriveFilterInteract:
    CSV = (
        "season,yr,temp,wk,resp\n"
        "1,0,0.50,3,10\n"
        "2,0,0.60,4,20\n"
        "2,1,0.70,5,30\n"
        "3,1,0.80,6,40\n"
        "3,1,0.20,0,50\n"
        "1,1,0.30,2,15\n"
        "2,0,0.40,1,25\n"
        "3,0,0.90,4,35\n"
        "1,0,0.10,5,45\n"
        "2,1,0.55,6,55\n"
    )

    def test_derive_round_and_blocking(self, tmp_path):
        path = write(tmp_path, self.CSV)
        out = ingest_csv(
            path,
            {
                "response": "resp",
                "derive": [{"name": "temp_c", "column": "temp", "scale": 47.0, "offset": -8.0, "round": True}],
                "blocking": ["temp_c"],
            },
        )
        # all ten rounded values are distinct -> singleton blocks
        assert out.blocks.n_blocks == 10

    def test_drop_rows(self, tmp_path):
        path = write(tmp_path, self.CSV)
        out = ingest_csv(
            path,
            {
                "response": "resp",
                "numeric": ["temp"],
                "drop_rows": [{"column": "temp", "op": ">", "value": 0.65}],
            },
        )
        assert out.dataset.n == 7
        assert out.n_rows_dropped == 3

    def test_indicator_membership(self, tmp_path):
        path = write(tmp_path, self.CSV)
        out = ingest_csv(
            path,
            {
                "response": "resp",
                "indicators": [{"name": "wk_late", "column": "wk", "values": [4, 5, 6]}],
            },
        )
        assert np.array_equal(out.dataset.X[:, 1], [0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0])

    def test_interactions_expand_categorical(self, tmp_path):
        path = write(tmp_path, self.CSV)
        out = ingest_csv(
            path,
            {
                "response": "resp",
                "numeric": ["temp", "yr"],
                "categorical": [{"column": "season", "reference": "1"}],
                "interactions": [["yr", "temp"], ["season", "temp"]],
            },
        )
        names = out.feature_names
        assert "yr*temp" in names
        assert "season=2*temp" in names and "season=3*temp" in names
        # intercept + temp + yr + 2 season levels + 1 + 2 interaction columns
        assert out.dataset.X.shape[1] == 8

    def test_unknown_interaction_term(self, tmp_path):
        path = write(tmp_path, self.CSV)
        with pytest.raises(IngestError, match="interactions"):
            ingest_csv(path, {"response": "resp", "interactions": [["ghost", "temp"]]})

    def test_blocking_on_tuples(self, tmp_path):
        path = write(tmp_path, self.CSV)
        out = ingest_csv(path, {"response": "resp", "blocking": ["season", "yr"]})
        assert out.blocks.n_blocks == 6  # distinct (season, yr) pairs
        assert out.block_key == ("season", "yr")

    def test_truth_response(self, tmp_path):
        path = write(tmp_path, "x,resp,truth\n1,2,3\n2,4,5\n")
        out = ingest_csv(path, {"response": "resp", "numeric": ["x"], "truth_response": "truth"})
        assert np.array_equal(out.y_true, [3.0, 5.0])


class TestInjectMismatch:
    def _dataset(self, tmp_path, blocking):
        path = write(
            tmp_path,
            "g,x,resp\n" + "".join(f"{i // 3},{i},{i * 10}\n" for i in range(12)),
        )
        return ingest_csv(path, {"response": "resp", "numeric": ["x"], "blocking": blocking})

    def test_singleton_blocks_no_mismatch(self, tmp_path):
        out = self._dataset(tmp_path, ["x"])  # x unique per row
        injected = inject_mismatch(out.dataset, out.blocks, seed=4)
        assert injected.mismatch_fraction() == 0.0
        assert np.array_equal(injected.y, out.dataset.y)

    def test_seed_reproducible_and_truth_recorded(self, tmp_path):
        out = self._dataset(tmp_path, ["g"])
        a = inject_mismatch(out.dataset, out.blocks, seed=11)
        b = inject_mismatch(out.dataset, out.blocks, seed=11)
        assert np.array_equal(a.y, b.y)
        assert np.array_equal(a.pi_star, b.pi_star)
        assert np.array_equal(a.y, a.y_star[a.pi_star])
        frac = a.mismatch_fraction()
        assert 0.0 <= frac <= 1.0

    def test_block_mean_fraction(self, tmp_path):
        out = self._dataset(tmp_path, ["g"])  # four blocks of three
        fracs = [
            inject_mismatch(out.dataset, out.blocks, seed=s).mismatch_fraction()
            for s in range(300)
        ]
        expected = (12 - 4) / 12
        assert abs(float(np.mean(fracs)) - expected) < 0.05
