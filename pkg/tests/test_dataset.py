import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reidkit.dataset import (
    BadMagic,
    CountMismatch,
    Dataset,
    DimMismatch,
    DuplicateImageId,
    EmbeddingFormatError,
    EmptySplit,
    ImageRecord,
    MalformedRow,
    NonFiniteValue,
    Role,
    TruncatedFile,
    dump_metadata,
    encode_matrix,
    load_dataset,
    load_embeddings,
    load_metadata,
    parse_metadata,
    validate_dataset,
    write_matrix,
)

HEADER = "image_id,identity_id,camera_id,role\n"


def meta(tmp_path, body, name="meta.csv"):
    p = tmp_path / name
    p.write_text(HEADER + body, encoding="utf-8")
    return p


def raw_remb(count, dim, values, magic=b"REMB", version=1):
    return struct.pack("<4sIII", magic, version, count, dim) + np.asarray(values, dtype="<f4").tobytes()


class TestLoadMetadata:
    def test_three_rows(self, tmp_path):
        d = load_metadata(meta(tmp_path, "q1,1,0,query\ng1,1,1,gallery\ng2,2,0,gallery\n"))
        assert len(d.queries) == 1
        assert len(d.gallery) == 2
        assert d.queries[0] == ImageRecord("q1", 1, 0, Role.QUERY)

    def test_file_order_preserved(self, tmp_path):
        d = load_metadata(meta(tmp_path, "g9,1,0,gallery\nq1,1,0,query\ng2,2,0,gallery\ng1,3,1,gallery\n"))
        assert [r.image_id for r in d.gallery] == ["g9", "g2", "g1"]

    def test_duplicate_id(self, tmp_path):
        with pytest.raises(DuplicateImageId) as exc:
            load_metadata(meta(tmp_path, "q1,1,0,query\ng7,1,1,gallery\ng7,2,0,gallery\n"))
        assert exc.value.line == 4

    def test_non_integer_identity(self, tmp_path):
        with pytest.raises(MalformedRow) as exc:
            load_metadata(meta(tmp_path, "q1,1,0,query\nimg9,abc,2,gallery\n"))
        assert exc.value.line == 3

    @pytest.mark.parametrize(
        "row",
        ["g1,1,0,probe", "g1,1,0", "g1,-1,0,gallery", "g1,1,x,gallery", ",1,0,gallery"],
    )
    def test_malformed_rows(self, tmp_path, row):
        with pytest.raises(MalformedRow):
            load_metadata(meta(tmp_path, f"q1,1,0,query\n{row}\n"))

    def test_bad_header(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("id,ident,cam,role\nq,1,0,query\n", encoding="utf-8")
        with pytest.raises(MalformedRow) as exc:
            load_metadata(p)
        assert exc.value.line == 1

    @pytest.mark.parametrize("body", ["q1,1,0,query\n", "g1,1,0,gallery\n", ""])
    def test_empty_split(self, tmp_path, body):
        with pytest.raises(EmptySplit):
            load_metadata(meta(tmp_path, body))


ids = st.text(alphabet="abcdefghij0123456789_-", min_size=1, max_size=8)


@settings(max_examples=100)
@given(
    st.lists(
        st.tuples(ids, st.integers(0, 10**6), st.integers(0, 500), st.sampled_from(list(Role))),
        min_size=2,
        max_size=30,
        unique_by=lambda t: t[0],
    ).filter(lambda rows: {r[3] for r in rows} == set(Role))
)
def test_metadata_round_trip(rows):
    records = [ImageRecord(*r) for r in rows]
    d = parse_metadata(dump_metadata(records).splitlines(keepends=True))
    again = parse_metadata(dump_metadata(d.records).splitlines(keepends=True))
    assert d == again
    assert list(d.queries) == [r for r in records if r.role is Role.QUERY]
    assert list(d.gallery) == [r for r in records if r.role is Role.GALLERY]


class TestLoadEmbeddings:
    def test_parse(self, tmp_path):
        p = tmp_path / "e.remb"
        p.write_bytes(raw_remb(2, 4, np.arange(8)))
        e = load_embeddings(p, 2, 4)
        assert e.shape == (2, 4)
        assert e.dtype == np.float32
        np.testing.assert_array_equal(e, np.arange(8).reshape(2, 4))

    def test_truncated(self, tmp_path):
        p = tmp_path / "e.remb"
        p.write_bytes(raw_remb(2, 4, np.arange(7)))
        with pytest.raises(TruncatedFile):
            load_embeddings(p, 2)

    def test_short_header(self, tmp_path):
        p = tmp_path / "e.remb"
        p.write_bytes(b"REMB\x01\x00")
        with pytest.raises(TruncatedFile):
            load_embeddings(p, 2)

    def test_nan_location(self, tmp_path):
        v = np.zeros((2, 4))
        v[1, 2] = np.nan
        p = tmp_path / "e.remb"
        p.write_bytes(raw_remb(2, 4, v))
        with pytest.raises(NonFiniteValue) as exc:
            load_embeddings(p, 2)
        assert (exc.value.row, exc.value.col) == (1, 2)

    def test_inf_rejected(self, tmp_path):
        v = np.zeros((3, 2))
        v[2, 0] = -np.inf
        p = tmp_path / "e.remb"
        p.write_bytes(raw_remb(3, 2, v))
        with pytest.raises(NonFiniteValue):
            load_embeddings(p, 3)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "e.remb"
        p.write_bytes(raw_remb(1, 1, [1.0], magic=b"NOPE"))
        with pytest.raises(BadMagic):
            load_embeddings(p, 1)

    def test_bad_version(self, tmp_path):
        p = tmp_path / "e.remb"
        p.write_bytes(raw_remb(1, 1, [1.0], version=2))
        with pytest.raises(EmbeddingFormatError):
            load_embeddings(p, 1)

    def test_count_mismatch(self, tmp_path):
        p = tmp_path / "e.remb"
        write_matrix(p, np.ones((3, 2)))
        with pytest.raises(CountMismatch):
            load_embeddings(p, 2)

    def test_dim_mismatch(self, tmp_path):
        p = tmp_path / "e.remb"
        write_matrix(p, np.ones((3, 2)))
        with pytest.raises(DimMismatch):
            load_embeddings(p, 3, 5)

    def test_little_endian_layout(self):
        b = encode_matrix(np.array([[1.5, -2.0]]))
        assert b[:4] == b"REMB"
        assert struct.unpack("<III", b[4:16]) == (1, 1, 2)
        assert struct.unpack("<2f", b[16:]) == (1.5, -2.0)


def test_load_dataset_checks_dims(tmp_path):
    m = meta(tmp_path, "q1,1,0,query\ng1,1,1,gallery\n")
    write_matrix(tmp_path / "q.remb", np.ones((1, 4)))
    write_matrix(tmp_path / "g.remb", np.ones((1, 3)))
    with pytest.raises(DimMismatch):
        load_dataset(m, tmp_path / "q.remb", tmp_path / "g.remb")


def test_dataset_embeddings_read_only():
    q = ImageRecord("q", 1, 0, Role.QUERY)
    g = ImageRecord("g", 1, 1, Role.GALLERY)
    d = Dataset((q,), (g,), np.ones((1, 2)), np.ones((1, 2)))
    with pytest.raises(ValueError):
        d.query_embeddings[0, 0] = 5


class TestValidate:
    def records(self, rows):
        return [ImageRecord(i, a, c, Role(r)) for i, a, c, r in rows]

    def test_no_targets(self):
        recs = self.records([("q", 5, 0, "query"), ("g1", 1, 0, "gallery"), ("g2", 1, 1, "gallery"),
                             ("g3", 1, 0, "gallery"), ("g4", 1, 1, "gallery")])
        d = Dataset(tuple(recs[:1]), tuple(recs[1:]))
        assert "identity 5: no targets" in validate_dataset(d)

    def test_clean(self):
        recs = self.records([("q", 1, 0, "query"), ("g1", 1, 1, "gallery"), ("g2", 2, 0, "gallery"),
                             ("g3", 2, 1, "gallery"), ("g4", 1, 0, "gallery")])
        d = Dataset(tuple(recs[:1]), tuple(recs[1:]))
        assert validate_dataset(d) == []

    def test_singleton_camera(self):
        recs = self.records([("q", 1, 0, "query"), ("g1", 1, 1, "gallery"), ("g2", 1, 1, "gallery"),
                             ("g3", 1, 3, "gallery")])
        d = Dataset(tuple(recs[:1]), tuple(recs[1:]))
        w = validate_dataset(d)
        assert "camera 3: singleton" in w

    def test_single_camera_identity(self):
        recs = self.records([("q", 1, 0, "query"), ("g1", 1, 1, "gallery"), ("g2", 2, 1, "gallery"),
                             ("g3", 2, 1, "gallery")])
        d = Dataset(tuple(recs[:1]), tuple(recs[1:]))
        assert "identity 2: single camera" in validate_dataset(d)

    def test_does_not_mutate(self):
        recs = self.records([("q", 5, 0, "query"), ("g1", 1, 3, "gallery")])
        d = Dataset(tuple(recs[:1]), tuple(recs[1:]))
        before = (d.queries, d.gallery)
        validate_dataset(d)
        assert (d.queries, d.gallery) == before
