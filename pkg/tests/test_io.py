import numpy as np
import pytest
import scipy.sparse as sp

from biasedamp.bias import estimate_bias
from biasedamp.errors import DegenerateTermError, DomainError, ParseError
from biasedamp.io import (read_bias, read_counts, read_model, read_rows, rows_to_csv, write_bias, write_counts,
                          write_model, write_rows)
from biasedamp.model import CountMatrix, PriorSpec, generate_ground_truth, sample_counts


def test_matrix_market_round_trip_large(tmp_path):
    rng = np.random.default_rng(0)
    Z = sp.random(1000, 2000, density=0.01, random_state=rng, data_rvs=lambda k: rng.integers(1, 50, k))
    counts = CountMatrix(Z)
    write_counts(tmp_path / "z.mtx", counts)
    back = read_counts(tmp_path / "z.mtx")
    assert back.shape == (1000, 2000)
    assert (back.Z != counts.Z).nnz == 0
    # writing the read-back matrix reproduces the file byte for byte
    write_counts(tmp_path / "z2.mtx", back)
    assert (tmp_path / "z.mtx").read_bytes() == (tmp_path / "z2.mtx").read_bytes()


def test_csv_round_trip(tmp_path):
    counts = CountMatrix(sp.csr_matrix(np.array([[2, 0, 1], [0, 3, 0]])))
    write_counts(tmp_path / "z.csv", counts)
    assert (tmp_path / "z.csv").read_text() == "2,0,1\n0,3,0\n"
    assert np.array_equal(read_counts(tmp_path / "z.csv").toarray(), counts.toarray())


def test_hand_file_to_bias(tmp_path):
    p = tmp_path / "z.mtx"
    p.write_text("%%MatrixMarket matrix coordinate integer general\n2 2 2\n1 1 2\n2 2 2\n")
    est = estimate_bias(read_counts(p))
    np.testing.assert_array_equal(est.r_u_hat, [1, 1])


@pytest.mark.parametrize("text, line", [
    ("%%MatrixMarket matrix coordinate integer general\n2 2 2\n1 1 2\n2 x 2\n", 4),
    ("%%MatrixMarket matrix coordinate integer general\n% comment\n2 2 1\n3 1 2\n", 4),
    ("%%MatrixMarket matrix coordinate integer general\n2 2\n", 2),
    ("not a matrix\n", 1),
])
def test_matrix_market_parse_errors(tmp_path, text, line):
    p = tmp_path / "bad.mtx"
    p.write_text(text)
    with pytest.raises(ParseError) as e:
        read_counts(p)
    assert e.value.line == line


def test_csv_parse_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("1,2\n3,x\n")
    with pytest.raises(ParseError) as e:
        read_counts(p)
    assert e.value.line == 2
    p.write_text("1,2\n3\n")
    with pytest.raises(ParseError) as e:
        read_counts(p)
    assert e.value.line == 2
    p.write_text("1,2\n3,-1\n")
    with pytest.raises(DomainError):
        read_counts(p)


def test_negative_matrix_market(tmp_path):
    p = tmp_path / "neg.mtx"
    p.write_text("%%MatrixMarket matrix coordinate integer general\n2 2 1\n1 1 -2\n")
    with pytest.raises(DomainError):
        read_counts(p)


def test_zero_column_reaches_bias_step(tmp_path):
    p = tmp_path / "z.mtx"
    p.write_text("%%MatrixMarket matrix coordinate integer general\n2 3 2\n1 1 2\n2 3 2\n")
    with pytest.raises(DegenerateTermError) as e:
        estimate_bias(read_counts(p))
    assert e.value.cols == [1]


def test_model_round_trip_bitwise(tmp_path):
    model = generate_ground_truth(PriorSpec(), 40, 60, 3, seed=5)
    write_model(tmp_path / "m", model)
    back = read_model(tmp_path / "m")
    for f in ("U", "V", "s_u", "s_v"):
        assert np.array_equal(getattr(back, f), getattr(model, f))
    assert back.seed == 5
    (tmp_path / "m" / "U.csv").write_text("1,2\n")
    with pytest.raises(ParseError):
        read_model(tmp_path / "m")


def test_bias_round_trip(tmp_path):
    model = generate_ground_truth(PriorSpec(), 40, 60, 3, seed=6)
    est = estimate_bias(sample_counts(model, 1))
    write_bias(tmp_path / "b", est)
    back = read_bias(tmp_path / "b")
    assert np.array_equal(back.r_u_hat, est.r_u_hat) and np.array_equal(back.r_v_hat, est.r_v_hat)
    assert back.z_tot == est.z_tot and back.lambda0_hat == est.lambda0_hat


def test_rows_round_trip(tmp_path):
    rows = [dict(k=0, x=0.1, s="a"), dict(k=1, x=1 / 3, s="b")]
    write_rows(tmp_path / "r.csv", rows)
    back = read_rows(tmp_path / "r.csv")
    assert [float(r["x"]) for r in back] == [0.1, 1 / 3]
    assert rows_to_csv([]) == ""
