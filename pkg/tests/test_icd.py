import pytest

from ecgscreen.cohort import Episode, EpisodeKind
from ecgscreen.errors import DanglingLink, MalformedCode
from ecgscreen.icd import (
    IcdCode,
    LabelKind,
    LabelVocabulary,
    build_vocabulary,
    category_of,
    chapter_of,
    parse_code,
    read_vocabulary_csv,
    write_vocabulary_csv,
)


def _episode(episode_id, patient_id, codes):
    return Episode(
        episode_id=episode_id,
        patient_id=patient_id,
        kind=EpisodeKind.ED,
        start_time=0,
        end_time=3600,
        codes=tuple(parse_code(c) for c in codes),
    )


class TestParseCode:
    @pytest.mark.parametrize(
        "raw,expected",
        [
            ("I21", "I21"),
            ("i214", "I214"),
            ("  E1152  ", "E1152"),
            ("Z999999", "Z999999"),
            ("A00", "A00"),
        ],
    )
    def test_normalizes(self, raw, expected):
        assert parse_code(raw).text == expected

    @pytest.mark.parametrize(
        "raw", ["", "I2", "21I4", "I21!", "I2145678", "1214", "I 21"]
    )
    def test_rejects_malformed(self, raw):
        with pytest.raises(MalformedCode):
            parse_code(raw)

    def test_icdcode_validates_on_construction(self):
        with pytest.raises(MalformedCode):
            IcdCode("bad code")


class TestHierarchy:
    def test_category_truncates_to_three_chars(self):
        assert category_of(parse_code("I2510")).text == "I25"

    def test_category_idempotent(self):
        c = category_of(parse_code("I21"))
        assert category_of(c) == c == parse_code("I21")

    def test_chapter_is_first_letter(self):
        assert chapter_of(parse_code("E1152")) == "E"
        assert chapter_of(parse_code("I214")) == "I"


class TestVocabulary:
    def test_counts_distinct_ecgs_and_applies_threshold(self):
        episodes = [
            _episode(1, 1, ["I214", "E1152"]),
            _episode(2, 2, ["I214"]),
            _episode(3, 3, ["E1152"]),
        ]
        # ECG 10 links twice to episodes carrying I214: counts once
        links = [(10, 1), (10, 2), (11, 2), (12, 3)]
        vocab = build_vocabulary(episodes, links, LabelKind.FULL_CODE, min_support=2)
        assert [(l.text, s) for l, s in vocab.entries] == [("E1152", 2), ("I214", 2)]
        vocab3 = build_vocabulary(episodes, links, LabelKind.FULL_CODE, min_support=3)
        assert len(vocab3) == 0

    def test_category_kind_merges_codes_sharing_prefix(self):
        episodes = [_episode(1, 1, ["I214"]), _episode(2, 2, ["I219"])]
        links = [(10, 1), (11, 2)]
        vocab = build_vocabulary(episodes, links, LabelKind.CATEGORY, min_support=2)
        assert [(l.text, s) for l, s in vocab.entries] == [("I21", 2)]

    def test_entries_sorted_lexicographically(self):
        episodes = [_episode(1, 1, ["Z01", "A00", "I21"])]
        vocab = build_vocabulary(episodes, [(10, 1)], LabelKind.FULL_CODE, 1)
        assert [l.text for l in vocab.labels] == ["A00", "I21", "Z01"]

    def test_index_and_contains(self):
        episodes = [_episode(1, 1, ["A00", "I21"])]
        vocab = build_vocabulary(episodes, [(10, 1)], LabelKind.FULL_CODE, 1)
        assert vocab.index(parse_code("I21")) == 1
        assert parse_code("A00") in vocab
        assert parse_code("Z99") not in vocab

    def test_dangling_link_raises(self):
        with pytest.raises(DanglingLink):
            build_vocabulary([], [(10, 999)], LabelKind.FULL_CODE, 1)

    def test_rejects_unsorted_entries(self):
        with pytest.raises(ValueError):
            LabelVocabulary(
                kind=LabelKind.FULL_CODE,
                entries=((parse_code("I21"), 5), (parse_code("A00"), 5)),
                min_support=1,
            )

    def test_csv_round_trip(self, tmp_path):
        episodes = [_episode(1, 1, ["A00", "I21", "Z99"])]
        vocab = build_vocabulary(episodes, [(10, 1)], LabelKind.FULL_CODE, 1)
        path = tmp_path / "vocab.csv"
        write_vocabulary_csv(vocab, path, config_digest="abc123")
        loaded = read_vocabulary_csv(path, min_support=1)
        assert loaded == vocab
        assert path.read_text().startswith("# config_digest=abc123\n")
