import numpy as np
import pytest
from scipy import stats

from melodygen import melody_vdb as vdb
from melodygen.errors import FormatError, ValidationError
from melodygen.smallnet import make_rng


def unit_vectors(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def build_index(vectors, **kwargs):
    idx = vdb.HnswIndex(dim=vectors.shape[1], **kwargs)
    for i, v in enumerate(vectors):
        idx.insert(i, v)
    return idx


class TestInsert:
    def test_first_insert_becomes_entry_and_is_searchable(self):
        rng = make_rng(0)
        v = unit_vectors(rng, 1, 8)[0]
        idx = vdb.HnswIndex(dim=8, seed=0)
        idx.insert(7, v)
        assert idx.entry_point == 7
        hits = idx.search(v, k=1, ef_search=4).hits
        assert hits[0][0] == 7
        assert hits[0][1] == pytest.approx(1.0, abs=1e-6)

    def test_duplicate_id_rejected_index_unchanged(self):
        rng = make_rng(1)
        vs = unit_vectors(rng, 2, 8)
        idx = vdb.HnswIndex(dim=8, seed=0)
        idx.insert(0, vs[0])
        with pytest.raises(ValidationError):
            idx.insert(0, vs[1])
        assert len(idx) == 1
        assert np.allclose(idx.vector_of(0), vs[0], atol=1e-6)

    def test_non_unit_vector_rejected(self):
        idx = vdb.HnswIndex(dim=4, seed=0)
        with pytest.raises(ValidationError):
            idx.insert(0, np.array([1.0, 1.0, 0.0, 0.0]))

    def test_dim_mismatch(self):
        idx = vdb.HnswIndex(dim=4, seed=0)
        with pytest.raises(ValidationError):
            idx.insert(0, np.array([1.0, 0.0]))

    def test_level_histogram_matches_geometric(self):
        # levels are floor(-ln(u) * lambda): geometric with p = 1 - e^(-1/lambda)
        rng = make_rng(2)
        idx = build_index(unit_vectors(rng, 1000, 8), M=16, ef_construction=16, seed=3)
        levels = np.array(idx._levels)
        p = 1.0 - np.exp(-1.0 / idx.level_lambda)
        max_level = levels.max()
        observed = np.bincount(levels, minlength=max_level + 1).astype(float)
        expected = np.array([1000 * p * (1 - p) ** l for l in range(max_level + 1)])
        # merge the sparse tail so every chi-square cell expects >= 5
        while len(expected) > 2 and expected[-1] < 5:
            expected[-2] += expected[-1]
            observed[-2] += observed[-1]
            expected, observed = expected[:-1], observed[:-1]
        expected *= observed.sum() / expected.sum()
        result = stats.chisquare(observed, expected)
        assert result.pvalue > 0.01

    def test_invariants_after_build(self):
        rng = make_rng(3)
        idx = build_index(unit_vectors(rng, 200, 16), M=8, ef_construction=32, seed=4)
        idx.check_invariants(check_reachability=True)


class TestSearch:
    def test_query_equal_to_indexed_vector(self):
        rng = make_rng(4)
        vs = unit_vectors(rng, 30, 12)
        idx = build_index(vs, M=8, ef_construction=24, seed=5)
        hits = idx.search(vs[17], k=3, ef_search=16).hits
        assert hits[0][0] == 17
        assert hits[0][1] == pytest.approx(1.0, abs=1e-6)

    def test_size_one_index(self):
        rng = make_rng(5)
        vs = unit_vectors(rng, 2, 8)
        idx = vdb.HnswIndex(dim=8, seed=0)
        idx.insert(42, vs[0])
        assert idx.search(vs[1], k=5, ef_search=8).hits[0][0] == 42

    def test_empty_index_rejected(self):
        with pytest.raises(ValidationError):
            vdb.HnswIndex(dim=4, seed=0).search(np.array([1.0, 0, 0, 0]), k=1, ef_search=4)

    def test_bad_k_and_ef(self):
        rng = make_rng(6)
        idx = build_index(unit_vectors(rng, 5, 4), M=4, ef_construction=8, seed=0)
        q = unit_vectors(rng, 1, 4)[0]
        with pytest.raises(ValidationError):
            idx.search(q, k=0, ef_search=4)
        with pytest.raises(ValidationError):
            idx.search(q, k=5, ef_search=3)

    def test_similarities_non_increasing_no_duplicates(self):
        rng = make_rng(7)
        idx = build_index(unit_vectors(rng, 64, 16), M=8, ef_construction=32, seed=8)
        res = idx.search(unit_vectors(rng, 1, 16)[0], k=10, ef_search=32)
        sims = [s for _, s in res.hits]
        assert sims == sorted(sims, reverse=True)
        assert len({i for i, _ in res.hits}) == len(res.hits)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_exhaustive_agreement_with_brute_force(self, seed):
        rng = make_rng(100 + seed)
        vs = unit_vectors(rng, 50, 16)
        idx = build_index(vs, M=8, ef_construction=40, seed=seed)
        for _ in range(40):
            q = unit_vectors(rng, 1, 16)[0]
            assert idx.search(q, k=5, ef_search=50).hits == vdb.brute_knn(idx.vectors(), q, 5).hits


class TestBruteKnn:
    def test_orthonormal_basis(self):
        vectors = {i: np.eye(4)[i] for i in range(4)}
        res = vdb.brute_knn(vectors, np.eye(4)[1], k=4)
        assert res.hits[0] == (1, pytest.approx(1.0))
        assert all(s == pytest.approx(0.0) for _, s in res.hits[1:])

    def test_k_larger_than_n(self):
        vectors = {i: np.eye(3)[i] for i in range(3)}
        res = vdb.brute_knn(vectors, np.eye(3)[0], k=10)
        assert len(res.hits) == 3

    def test_ties_broken_by_ascending_id(self):
        v = np.array([1.0, 0.0])
        res = vdb.brute_knn({5: v, 2: v, 9: v}, v, k=3)
        assert [i for i, _ in res.hits] == [2, 5, 9]

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            vdb.brute_knn({}, np.array([1.0]), k=1)


class TestPersistence:
    def test_empty_roundtrip(self, tmp_path):
        idx = vdb.HnswIndex(dim=8, M=4, ef_construction=16, seed=0)
        path = tmp_path / "e.mvdb"
        vdb.persist(idx, path)
        back = vdb.restore(path)
        assert len(back) == 0 and back.dim == 8 and back.entry_point is None

    def test_roundtrip_is_graph_and_vector_identical(self, tmp_path):
        rng = make_rng(9)
        idx = build_index(unit_vectors(rng, 120, 16), M=8, ef_construction=32, seed=10)
        path = tmp_path / "i.mvdb"
        vdb.persist(idx, path)
        back = vdb.restore(path)
        assert back._ids == idx._ids
        assert back._levels == idx._levels
        assert back._neighbors == idx._neighbors
        assert np.array_equal(back._vecs[:len(back)], idx._vecs[:len(idx)])
        assert back.entry_point == idx.entry_point

    def test_search_results_bit_identical_after_roundtrip(self, tmp_path):
        rng = make_rng(10)
        idx = build_index(unit_vectors(rng, 1000, 32), M=8, ef_construction=32, seed=11)
        path = tmp_path / "big.mvdb"
        vdb.persist(idx, path)
        back = vdb.restore(path)
        for qi in range(20):
            q = unit_vectors(make_rng(2000 + qi), 1, 32)[0]
            assert idx.search(q, 10, 64).hits == back.search(q, 10, 64).hits

    def test_corrupted_magic_is_format_error(self, tmp_path):
        rng = make_rng(11)
        idx = build_index(unit_vectors(rng, 10, 8), M=4, ef_construction=8, seed=12)
        path = tmp_path / "c.mvdb"
        vdb.persist(idx, path)
        raw = bytearray(path.read_bytes())
        raw[0:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError) as e:
            vdb.restore(path)
        assert e.value.offset == 0

    def test_truncation_reports_offset(self, tmp_path):
        rng = make_rng(12)
        idx = build_index(unit_vectors(rng, 10, 8), M=4, ef_construction=8, seed=13)
        path = tmp_path / "t.mvdb"
        vdb.persist(idx, path)
        path.write_bytes(path.read_bytes()[:60])
        with pytest.raises(FormatError) as e:
            vdb.restore(path)
        assert e.value.offset is not None

    def test_version_mismatch(self, tmp_path):
        idx = vdb.HnswIndex(dim=4, seed=0)
        path = tmp_path / "v.mvdb"
        vdb.persist(idx, path)
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            vdb.restore(path)

    def test_restored_invariants_pass(self, tmp_path):
        rng = make_rng(13)
        idx = build_index(unit_vectors(rng, 80, 8), M=6, ef_construction=24, seed=14)
        path = tmp_path / "inv.mvdb"
        vdb.persist(idx, path)
        vdb.restore(path).check_invariants(check_reachability=True)
